//! JSON model files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::network::{AdaptKanNet, InitConfig};

pub const FORMAT_VERSION: u32 = 1;

/// How a model was produced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Metadata {
    pub seed: u64,
    pub init: Option<InitConfig>,
    /// Training plan as given, kept verbatim.
    pub plan: Option<serde_json::Value>,
    pub task: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub model: AdaptKanNet,
    #[serde(default)]
    pub metadata: Metadata,
}

impl ModelFile {
    pub fn new(model: AdaptKanNet, metadata: Metadata) -> Self {
        ModelFile {
            version: FORMAT_VERSION,
            model,
            metadata,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.version != FORMAT_VERSION {
            return Err(KanError::Config(format!(
                "model format version {} is not supported (expected {FORMAT_VERSION})",
                file.version
            )));
        }
        file.model.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
