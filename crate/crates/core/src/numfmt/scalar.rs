/// Number of significant bits kept by [`FixedScalar`].
pub const SCALAR_BITS: u32 = 24;

/// A fixed-point scalar `mantissa * 2^exponent`, used for hyperparameters,
/// reciprocals and per-channel factors. Mantissas carry at most
/// [`SCALAR_BITS`] significant bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedScalar {
    pub mantissa: i64,
    pub exponent: i32,
}

impl FixedScalar {
    pub const ZERO: FixedScalar = FixedScalar { mantissa: 0, exponent: 0 };

    pub fn new(mantissa: i64, exponent: i32) -> Self {
        Self::from_wide(mantissa as i128, exponent)
    }

    /// Nearest representable scalar to `x`. `x` must be finite.
    pub fn from_f64(x: f64) -> Self {
        assert!(x.is_finite(), "fixed-point scalar from non-finite value");
        if x == 0.0 {
            return Self::ZERO;
        }
        let e = x.abs().log2().floor() as i32;
        let exponent = e - (SCALAR_BITS as i32 - 1);
        let m = (x / 2f64.powi(exponent)).round_ties_even();
        Self::from_wide(m as i128, exponent)
    }

    /// Nearest scalar to `1/n`.
    pub fn reciprocal(n: u64) -> Self {
        assert!(n > 0);
        let shift = 64 - n.leading_zeros() + SCALAR_BITS - 1;
        let num = 1u128 << shift;
        let q = num / n as u128;
        let r = num % n as u128;
        let twice = 2 * r;
        let q = if twice > n as u128 || (twice == n as u128 && q & 1 == 1) { q + 1 } else { q };
        Self::from_wide(q as i128, -(shift as i32))
    }

    /// Rounds a wide value to nearest-even at [`SCALAR_BITS`] significant bits.
    pub fn from_wide(value: i128, exponent: i32) -> Self {
        if value == 0 {
            return Self::ZERO;
        }
        let mag = value.unsigned_abs();
        let width = 128 - mag.leading_zeros();
        let (mut mag, mut exponent) = (mag, exponent);
        if width > SCALAR_BITS {
            let shift = width - SCALAR_BITS;
            mag = super::rounding::round_shift_nearest(mag, shift);
            exponent += shift as i32;
        }
        // strip trailing zeros for a canonical form
        let tz = mag.trailing_zeros();
        mag >>= tz;
        exponent += tz as i32;
        let m = mag as i64;
        Self {
            mantissa: if value < 0 { -m } else { m },
            exponent,
        }
    }

    pub fn mul(self, other: FixedScalar) -> FixedScalar {
        Self::from_wide(self.mantissa as i128 * other.mantissa as i128, self.exponent + other.exponent)
    }

    pub fn to_f64(self) -> f64 {
        self.mantissa as f64 * 2f64.powi(self.exponent)
    }

    pub fn is_zero(self) -> bool {
        self.mantissa == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powers_of_two_are_exact() {
        assert_eq!(FixedScalar::from_f64(0.125), FixedScalar { mantissa: 1, exponent: -3 });
        assert_eq!(FixedScalar::reciprocal(64), FixedScalar { mantissa: 1, exponent: -6 });
        assert_eq!(FixedScalar::from_f64(-3.0).to_f64(), -3.0);
    }

    #[test]
    fn reciprocal_is_nearest() {
        for n in 1..2000u64 {
            let r = FixedScalar::reciprocal(n).to_f64();
            let exact = 1.0 / n as f64;
            assert!((r - exact).abs() <= exact * 2f64.powi(-(SCALAR_BITS as i32)), "n={n}");
        }
    }

    #[test]
    fn from_f64_relative_error() {
        for &x in &[0.9, 1e-4, 0.1, 5e-4, 123.456, -7.7e-9] {
            let s = FixedScalar::from_f64(x);
            assert!((s.to_f64() - x).abs() <= x.abs() * 2f64.powi(-(SCALAR_BITS as i32)));
            assert!(s.mantissa.unsigned_abs() < 1 << SCALAR_BITS);
        }
    }
}
