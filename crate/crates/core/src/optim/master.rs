use crate::error::{Error, Result};
use crate::numfmt::map::{quantize_unpacked, unpack_all};
use crate::numfmt::serialize::RawFxp;
use crate::numfmt::RoundingContext;

pub const MASTER_BITS: u32 = 16;
pub const MASTER_MAX: i32 = (1 << (MASTER_BITS - 1)) - 1;

/// A 16-bit shared-exponent tensor for optimizer state. Element `i` is
/// `mantissas[i] * 2^unit`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MasterTensor {
    pub shape: Vec<usize>,
    pub unit: Option<i32>,
    pub mantissas: Vec<i16>,
}

impl MasterTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            unit: None,
            mantissas: vec![0; shape.iter().product()],
        }
    }

    /// Linear mapping of float values onto 16-bit mantissas.
    pub fn from_f32(values: &[f32], shape: &[usize], ctx: &mut RoundingContext) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape("MasterTensor::from_f32", shape, &[values.len()]));
        }
        let mapped = quantize_unpacked(&unpack_all(values)?, MASTER_BITS, ctx.next_op());
        Ok(Self::from_parts(
            shape.to_vec(),
            mapped.exponent.map(|e| e - (MASTER_BITS as i32 - 2)),
            mapped.mantissas,
        ))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, unit: Option<i32>, mantissas: Vec<i32>) -> Self {
        debug_assert!(mantissas.iter().all(|m| m.abs() <= MASTER_MAX));
        let unit = if mantissas.iter().all(|&m| m == 0) { None } else { unit };
        Self {
            shape,
            unit,
            mantissas: mantissas.into_iter().map(|m| m as i16).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mantissas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mantissas.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        let s = self.unit.map_or(0.0, |u| 2f64.powi(u));
        self.mantissas.iter().map(|&m| m as f64 * s).collect()
    }

    pub fn ulp(&self) -> f64 {
        self.unit.map_or(0.0, |u| 2f64.powi(u))
    }

    pub fn wide(&self) -> Vec<i128> {
        self.mantissas.iter().map(|&m| m as i128).collect()
    }

    pub fn max_abs(&self) -> i32 {
        self.mantissas.iter().map(|&m| (m as i32).abs()).max().unwrap_or(0)
    }

    pub fn to_raw(&self) -> RawFxp {
        RawFxp {
            shape: self.shape.clone(),
            bits: MASTER_BITS,
            exponent: self.unit.map(|u| u + MASTER_BITS as i32 - 2),
            mantissas: self.mantissas.iter().map(|&m| m as i32).collect(),
        }
    }

    pub fn from_raw(raw: RawFxp) -> Result<Self> {
        if raw.bits != MASTER_BITS {
            return Err(Error::InvalidBitWidth(raw.bits));
        }
        if raw.mantissas.iter().any(|m| m.abs() > MASTER_MAX) {
            return Err(Error::Format("master mantissa out of range".into()));
        }
        if raw.shape.iter().product::<usize>() != raw.mantissas.len() {
            return Err(Error::Format("master tensor length mismatch".into()));
        }
        Ok(Self::from_parts(
            raw.shape,
            raw.exponent.map(|e| e - (MASTER_BITS as i32 - 2)),
            raw.mantissas,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_with_sixteen_bits() {
        let mut ctx = RoundingContext::nearest();
        let t = MasterTensor::from_f32(&[1.0, -0.5, 0.0], &[3], &mut ctx).unwrap();
        assert_eq!(t.mantissas, vec![1 << 14, -(1 << 13), 0]);
        assert_eq!(t.unit, Some(-14));
        assert_eq!(t.to_f64(), vec![1.0, -0.5, 0.0]);
        let back = MasterTensor::from_raw(t.to_raw()).unwrap();
        assert_eq!(back, t);
        assert!(MasterTensor::from_f32(&[f32::NAN], &[1], &mut ctx).is_err());
    }
}
