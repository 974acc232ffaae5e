use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::sparsity::SparsityError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Sparsity(#[from] SparsityError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Data(msg.into()))
}
