use crate::error::{Error, Result};

pub const MIN_BITS: u32 = 4;
pub const MAX_BITS: u32 = 8;

pub fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidBitWidth(bits))
    }
}

/// Largest mantissa magnitude of a `bits`-wide signed format; `-2^(bits-1)`
/// is never produced.
#[inline]
pub const fn max_mantissa(bits: u32) -> i32 {
    (1 << (bits - 1)) - 1
}

/// A dynamic fixed-point tensor: one shared exponent plus `bits`-wide signed
/// mantissas.
///
/// Element `i` represents `mantissas[i] * 2^(exponent - (bits - 2))`, so the
/// leading one of the largest element sits on mantissa bit `bits - 2`. An
/// all-zero tensor has no exponent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FxpTensor {
    shape: Vec<usize>,
    bits: u32,
    exponent: Option<i32>,
    mantissas: Vec<i8>,
}

impl FxpTensor {
    pub fn new(shape: Vec<usize>, bits: u32, exponent: Option<i32>, mantissas: Vec<i8>) -> Result<Self> {
        check_bits(bits)?;
        let n: usize = shape.iter().product();
        if n != mantissas.len() {
            return Err(Error::shape("FxpTensor::new", &shape, &[mantissas.len()]));
        }
        let limit = max_mantissa(bits);
        if mantissas.iter().any(|&m| (m as i32).abs() > limit) {
            return Err(Error::Format(format!("mantissa outside the {bits}-bit range")));
        }
        if exponent.is_none() && mantissas.iter().any(|&m| m != 0) {
            return Err(Error::Format("nonzero mantissas without an exponent".into()));
        }
        Ok(Self::from_parts(shape, bits, exponent, mantissas))
    }

    /// Unchecked constructor; an all-zero mantissa array drops the exponent.
    pub(crate) fn from_parts(shape: Vec<usize>, bits: u32, exponent: Option<i32>, mantissas: Vec<i8>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), mantissas.len());
        let exponent = if mantissas.iter().all(|&m| m == 0) { None } else { exponent };
        Self {
            shape,
            bits,
            exponent,
            mantissas,
        }
    }

    pub fn zeros(shape: &[usize], bits: u32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), bits, None, vec![0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn exponent(&self) -> Option<i32> {
        self.exponent
    }

    pub fn mantissas(&self) -> &[i8] {
        &self.mantissas
    }

    pub fn len(&self) -> usize {
        self.mantissas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mantissas.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.exponent.is_none()
    }

    /// Exponent of one mantissa unit, `exponent - (bits - 2)`.
    pub fn unit_exponent(&self) -> Option<i32> {
        self.exponent.map(|e| e - (self.bits as i32 - 2))
    }

    /// Exact values in `f64` (every representable value fits).
    pub fn to_f64(&self) -> Vec<f64> {
        match self.unit_exponent() {
            None => vec![0.0; self.len()],
            Some(u) => {
                let scale = 2f64.powi(u);
                self.mantissas.iter().map(|&m| m as f64 * scale).collect()
            }
        }
    }

    /// Spacing of the representable grid, `2^(exponent - (bits - 2))`.
    pub fn ulp(&self) -> f64 {
        self.unit_exponent().map_or(0.0, |u| 2f64.powi(u))
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let [r, c] = self.shape[..] else {
            return Err(Error::shape("transpose", &self.shape, &[0, 0]));
        };
        let mut out = vec![0i8; self.len()];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.mantissas[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], self.bits, self.exponent, out))
    }

    /// Replaces the mantissas, keeping shape, width and exponent.
    pub(crate) fn with_mantissas(&self, mantissas: Vec<i8>) -> Self {
        Self::from_parts(self.shape.clone(), self.bits, self.exponent, mantissas)
    }

    /// Reorders elements: `out[i] = self[perm[i]]`.
    pub(crate) fn gather(&self, shape: Vec<usize>, perm: &[usize]) -> Self {
        let mantissas = perm.iter().map(|&p| self.mantissas[p]).collect();
        Self::from_parts(shape, self.bits, self.exponent, mantissas)
    }

    pub fn neg(&self) -> Self {
        self.with_mantissas(self.mantissas.iter().map(|&m| -m).collect())
    }
}
