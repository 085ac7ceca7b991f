//! Kolmogorov-Arnold networks whose spline activations keep their grid
//! domains in step with the data. Each input feature carries an EMA
//! histogram; edge bins that go quiet shrink the domain and out-of-domain
//! mass stretches it, with the coefficients refit by least squares.
//!
//! Alongside the network live the pieces used to exercise it: histogram OOD
//! scoring, control Lyapunov function training and simulation, symbolic
//! regression tasks and JSON model files.
//!
//! Data-parallel loops go through [`exec::Exec`]; the `parallel` feature
//! (default) runs them on rayon, and results are bitwise identical either way.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod clf;
pub mod error;
pub mod exec;
pub mod histogram;
pub mod network;
pub mod ood;
pub mod optim;
pub mod persist;
pub mod spline;
pub mod tasks;

pub use error::{KanError, Result};
