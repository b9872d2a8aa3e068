//! Bit-level access to single-precision floats.

use crate::error::{Error, Result};

pub const MANTISSA_BITS: u32 = 24;
pub const HIDDEN_BIT: u32 = 1 << 23;
pub const MIN_EXPONENT: i32 = -126;
pub const MAX_EXPONENT: i32 = 127;

/// Sign, unbiased exponent and 24-bit mantissa (hidden bit explicit) of an
/// `f32`.
///
/// Normal values have `mantissa24` in `[2^23, 2^24)`. Subnormals carry
/// exponent -126 and no hidden bit; zero has `mantissa24 == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnpackedFloat {
    pub sign: u8,
    pub exponent: i32,
    pub mantissa24: u32,
}

impl UnpackedFloat {
    pub fn is_zero(&self) -> bool {
        self.mantissa24 == 0
    }

    /// Packs back into an `f32`. The triple must be normalized (or subnormal
    /// at exponent -126).
    pub fn pack(&self) -> Result<f32> {
        let sign = (self.sign as u32) << 31;
        if self.mantissa24 == 0 {
            return Ok(f32::from_bits(sign));
        }
        if self.exponent > MAX_EXPONENT {
            return Err(Error::ExponentOverflow(self.exponent));
        }
        debug_assert!(self.mantissa24 < 1 << 24);
        let bits = if self.mantissa24 & HIDDEN_BIT == 0 {
            debug_assert_eq!(self.exponent, MIN_EXPONENT);
            self.mantissa24
        } else {
            debug_assert!(self.exponent >= MIN_EXPONENT);
            let biased = (self.exponent + 127) as u32;
            (biased << 23) | (self.mantissa24 & (HIDDEN_BIT - 1))
        };
        Ok(f32::from_bits(sign | bits))
    }
}

/// Unpacks a finite `f32` into sign, exponent and explicit 24-bit mantissa.
pub fn unpack(f: f32) -> Result<UnpackedFloat> {
    unpack_at(f, 0)
}

pub(crate) fn unpack_at(f: f32, index: usize) -> Result<UnpackedFloat> {
    if !f.is_finite() {
        return Err(Error::NonFiniteInput { index });
    }
    let bits = f.to_bits();
    let sign = (bits >> 31) as u8;
    let biased = ((bits >> 23) & 0xFF) as i32;
    let frac = bits & (HIDDEN_BIT - 1);
    Ok(if biased == 0 {
        UnpackedFloat {
            sign,
            exponent: MIN_EXPONENT,
            mantissa24: frac,
        }
    } else {
        UnpackedFloat {
            sign,
            exponent: biased - 127,
            mantissa24: frac | HIDDEN_BIT,
        }
    })
}

/// Largest unbiased exponent over the nonzero elements, `None` when every
/// element is zero.
pub fn shared_exponent(values: &[f32]) -> Result<Option<i32>> {
    let mut e_max = None;
    for (i, &v) in values.iter().enumerate() {
        let u = unpack_at(v, i)?;
        if !u.is_zero() {
            e_max = Some(e_max.map_or(u.exponent, |e: i32| e.max(u.exponent)));
        }
    }
    Ok(e_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference decoder working from the value rather than the bits.
    fn decode_by_value(f: f32) -> (u8, i32, u32) {
        let sign = f.is_sign_negative() as u8;
        let a = (f as f64).abs();
        if a == 0.0 {
            return (sign, MIN_EXPONENT, 0);
        }
        let mut e = a.log2().floor() as i32;
        if e < MIN_EXPONENT {
            e = MIN_EXPONENT;
        }
        let m = a / 2f64.powi(e - 23);
        (sign, e, m as u32)
    }

    #[test]
    fn unpack_examples() {
        assert_eq!(
            unpack(1.0).unwrap(),
            UnpackedFloat { sign: 0, exponent: 0, mantissa24: 1 << 23 }
        );
        assert_eq!(
            unpack(-0.75).unwrap(),
            UnpackedFloat { sign: 1, exponent: -1, mantissa24: (1 << 23) + (1 << 22) }
        );
        let tiny = 2f32.powi(-140);
        let u = unpack(tiny).unwrap();
        assert_eq!(u, UnpackedFloat { sign: 0, exponent: -126, mantissa24: 1 << 9 });
        assert_eq!(decode_by_value(tiny), (0, -126, 1 << 9));
        assert_eq!(unpack(0.0).unwrap().mantissa24, 0);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(unpack(f32::NAN), Err(Error::NonFiniteInput { .. })));
        assert!(matches!(unpack(f32::INFINITY), Err(Error::NonFiniteInput { .. })));
        assert!(matches!(
            shared_exponent(&[1.0, f32::NEG_INFINITY]),
            Err(Error::NonFiniteInput { index: 1 })
        ));
    }

    #[test]
    fn shared_exponent_examples() {
        assert_eq!(shared_exponent(&[1.0, 0.5, 0.25]).unwrap(), Some(0));
        assert_eq!(shared_exponent(&[0.0, 0.0]).unwrap(), None);
        assert_eq!(shared_exponent(&[3.5, -100.0]).unwrap(), Some(6));
        assert_eq!(decode_by_value(-100.0).1, 6);
    }

    #[test]
    fn agrees_with_value_decoder() {
        for &f in &[3.0e-39f32, 1.17e-38, 0.1, -7.25, 1.0e30, -3.4e38, 5.9e-42] {
            let u = unpack(f).unwrap();
            assert_eq!((u.sign, u.exponent, u.mantissa24), decode_by_value(f), "{f:e}");
        }
    }

    proptest::proptest! {
        #[test]
        fn repack_is_bit_exact(bits in proptest::num::u32::ANY) {
            let f = f32::from_bits(bits);
            proptest::prop_assume!(f.is_finite());
            let u = unpack(f).unwrap();
            if !u.is_zero() && u.mantissa24 & HIDDEN_BIT != 0 {
                proptest::prop_assert!((-126..=127).contains(&u.exponent));
            }
            proptest::prop_assert_eq!(u.pack().unwrap().to_bits(), bits);
        }
    }
}
