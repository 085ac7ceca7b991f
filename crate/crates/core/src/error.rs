use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum KanError {
    #[error("invalid grid domain [{a}, {b}] with {omega} intervals")]
    InvalidDomain { a: f64, b: f64, omega: usize },

    #[error("spline degree {0} is not supported (only cubic, k = 3)")]
    UnsupportedDegree(usize),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, KanError>;

impl KanError {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        KanError::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures caused by NaN/inf values during numerical work.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            KanError::NonFinite(_) | KanError::NonFiniteActivation { .. }
        )
    }

    /// True when the underlying cause is a filesystem or stream failure.
    pub fn is_io(&self) -> bool {
        match self {
            KanError::Io(_) => true,
            KanError::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            KanError::Json(e) => e.is_io(),
            _ => false,
        }
    }
}
