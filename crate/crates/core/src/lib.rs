//! Autoformer-style long-horizon forecasting: progressive series
//! decomposition with an FFT-based Auto-Correlation mechanism, trained by
//! reverse-mode differentiation on `f64` tensors.

pub mod autocorr;
pub mod bench;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod series;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ComplexTensor, Tensor};
