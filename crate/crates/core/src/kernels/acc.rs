use crate::error::{Error, Result};
use crate::numfmt::{renormalize, FxpTensor, RoundingContext};

/// Exact int32 accumulator tensor; element `i` is `values[i] * 2^scale_exponent`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
    pub scale_exponent: i32,
}

impl AccTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![0; shape.iter().product()],
            scale_exponent: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        let s = 2f64.powi(self.scale_exponent);
        self.values.iter().map(|&v| v as f64 * s).collect()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// One rounding back to a `bits`-wide fixed-point tensor.
    pub fn renormalize(&self, bits: u32, ctx: &mut RoundingContext) -> Result<FxpTensor> {
        renormalize(&self.values, self.scale_exponent, &self.shape, bits, ctx)
    }
}
