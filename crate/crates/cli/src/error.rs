use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("malformed IDX file: {0}")]
    MalformedIdx(String),
    #[error("image count {images} does not match label count {labels}")]
    DimMismatch { images: usize, labels: usize },
    #[error("unknown suite `{0}` (expected one of rounding, mapping, gemm, norm, sgd, theorem1, variance)")]
    UnknownSuite(String),
    #[error("float and integer arms consumed different batch orders in epoch {0}")]
    BatchOrderMismatch(usize),
    #[error(transparent)]
    Core(#[from] dfx_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
