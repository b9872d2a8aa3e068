//! Integer inverse square root.

use crate::error::{Error, Result};

/// Fractional bits of the mantissas used inside [`fxp_rsqrt`].
pub const RSQRT_FRAC_BITS: i32 = 30;

/// `2^30 / sqrt(f)` at the midpoints of 32 cells on `[1, 2)` and 32 cells on `[2, 4)`.
const SEED: [u32; 64] = [
    1065450257, 1049427536, 1034106604, 1019437682,
    1005375799, 991880210, 978913898, 966443148,
    954437177, 942867814, 931709222, 920937655,
    910531246, 900469818, 890734723, 881308694,
    872175715, 863320910, 854730438, 846391405,
    838291779, 830420321, 822766514, 815320510,
    808073073, 801015531, 794139734, 787438013,
    780903145, 774528319, 768307107, 762233438,
    753387102, 742057327, 731223792, 720851298,
    710908045, 701365222, 692196655, 683378504,
    674889000, 666708225, 658817909, 651201261,
    643842818, 636728315, 629844563, 623179354,
    616721362, 610460069, 604385689, 598489102,
    592761802, 587195840, 581783781, 576518662,
    571393950, 566403514, 561541591, 556802759,
    552181909, 547674226, 543275165, 538980433,
];

const ONE: u64 = 1 << RSQRT_FRAC_BITS;

/// Fixed-point `1/sqrt(m * 2^e)`, returned as `(y, ey)` meaning `y * 2^ey`
/// with `y` in Q30 (`2^29 < y <= 2^30`).
///
/// The input is normalized to `f` in `[1, 4)` with an even exponent, seeded
/// from a 64-entry table and refined with three Newton steps
/// `y <- y (3 - f y^2) / 2`.
pub fn fxp_rsqrt(m: i128, e: i32) -> Result<(u32, i32)> {
    if m <= 0 {
        return Err(Error::NonPositiveInput);
    }
    let m = m as u128;
    let width = 128 - m.leading_zeros() as i32;
    // m * 2^e = (m / 2^(width-1)) * 2^(e + width - 1); make that exponent even.
    let mut exp = e + width - 1;
    let mut lead = width - 1;
    if exp.rem_euclid(2) == 1 {
        exp -= 1;
        lead -= 1;
    }
    // f = m / 2^lead in Q30, in [1, 4).
    let shift = lead - RSQRT_FRAC_BITS;
    let f = if shift >= 0 {
        crate::numfmt::rounding::round_shift_nearest(m, shift as u32) as u64
    } else {
        (m << (-shift) as u32) as u64
    };
    let f = f.min(4 * ONE - 1);
    let idx = if f < 2 * ONE {
        ((f - ONE) >> 25) as usize
    } else {
        32 + ((f - 2 * ONE) >> 26) as usize
    };
    let mut y = SEED[idx] as u64;
    for _ in 0..3 {
        let y2 = (y * y) >> RSQRT_FRAC_BITS;
        let fy2 = (f * y2) >> RSQRT_FRAC_BITS;
        let t = (3 * ONE).saturating_sub(fy2);
        y = (y * t) >> (RSQRT_FRAC_BITS + 1);
    }
    Ok((y as u32, -RSQRT_FRAC_BITS - exp / 2))
}

pub fn rsqrt_to_f64(y: u32, ey: i32) -> f64 {
    y as f64 * 2f64.powi(ey)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_table_matches_midpoints() {
        for (i, &s) in SEED.iter().enumerate() {
            let mid = if i < 32 { 1.0 + (i as f64 + 0.5) / 32.0 } else { 2.0 + (i as f64 - 31.5) / 16.0 };
            assert_eq!(s as f64, (2f64.powi(30) / mid.sqrt()).round(), "entry {i}");
        }
    }

    #[test]
    fn exact_cases() {
        let (y, e) = fxp_rsqrt(1, 0).unwrap();
        assert!((rsqrt_to_f64(y, e) - 1.0).abs() <= 2f64.powi(-28));
        let (y, e) = fxp_rsqrt(4, 0).unwrap();
        assert!((rsqrt_to_f64(y, e) - 0.5).abs() <= 2f64.powi(-29));
        let (y, e) = fxp_rsqrt(2, 0).unwrap();
        assert!((rsqrt_to_f64(y, e) / std::f64::consts::FRAC_1_SQRT_2 - 1.0).abs() <= 2f64.powi(-10));
        assert!(matches!(fxp_rsqrt(0, 3), Err(Error::NonPositiveInput)));
        assert!(matches!(fxp_rsqrt(-5, 3), Err(Error::NonPositiveInput)));
    }

    proptest::proptest! {
        #[test]
        fn relative_error_and_square_round_trip(m in 1i128..(1i128 << 100), e in -200i32..200) {
            let (y, ey) = fxp_rsqrt(m, e).unwrap();
            let v = m as f64 * 2f64.powi(e);
            let r = rsqrt_to_f64(y, ey);
            let exact = 1.0 / v.sqrt();
            proptest::prop_assert!((r / exact - 1.0).abs() <= 2f64.powi(-10));
            // squaring and inverting recovers the input
            proptest::prop_assert!((1.0 / (r * r * v) - 1.0).abs() <= 2f64.powi(-9));
        }
    }
}
