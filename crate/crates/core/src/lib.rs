//! Probabilistic time-series forecasting with a decoder-only Transformer that
//! uses convolutional self-attention and LogSparse attention patterns.

pub mod attention;
pub mod autodiff;
pub mod datagen;
mod error;
pub mod forecaster;
pub mod sparsity;
pub mod trainer;

pub use error::{Error, Result};
