//! Spatio-temporal forecasting laboratory.
//!
//! Dense f64 tensors with a reverse-mode tape, six small convolutional and
//! recurrent forecasters sharing a spatially local regressor head, blocked
//! cross-validation, spatial/temporal diagnostics, and nonparametric model
//! comparison.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod layers;
pub mod models;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
