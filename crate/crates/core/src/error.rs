use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at flat index {index}")]
    NonFiniteInput { index: usize },

    #[error("bit width {0} outside the supported range")]
    InvalidBitWidth(u32),

    #[error("normalized exponent {0} exceeds the single-precision range")]
    ExponentOverflow(i32),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("inner dimension {inner} exceeds the int32 accumulator bound {bound}")]
    AccumulatorOverflow { inner: usize, bound: usize },

    #[error("normalization needs at least 2 elements per group, got {0}")]
    DegenerateBatch(usize),

    #[error("backward cache does not match the incoming gradient: {0}")]
    CacheMismatch(String),

    #[error("inverse square root of a non-positive value")]
    NonPositiveInput,

    #[error("learning rate {lr} exceeds the stability limit {limit}")]
    LearningRateTooLarge { lr: f64, limit: f64 },

    #[error("malformed serialized data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
