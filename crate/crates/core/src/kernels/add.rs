use super::align::{common_unit, max_abs, shift_to};
use crate::error::{Error, Result};
use crate::numfmt::{renormalize_wide, FxpTensor, RoundingContext};

/// Sums wide terms given as `(values, unit)` after aligning them to a common
/// unit. Returns the sum and its unit; `None` when every term is zero.
pub(crate) fn aligned_sum(terms: &[(&[i128], i32)], len: usize) -> (Vec<i128>, Option<i32>) {
    let desc: Vec<(u128, i32)> = terms.iter().map(|(v, u)| (max_abs(v), *u)).collect();
    let Some(unit) = common_unit(&desc) else {
        return (vec![0; len], None);
    };
    let mut out = vec![0i128; len];
    for (&(values, u), &(m, _)) in terms.iter().zip(&desc) {
        if m == 0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(values) {
            *o += shift_to(v, u, unit);
        }
    }
    (out, Some(unit))
}

pub(crate) fn wide(t: &FxpTensor) -> Vec<i128> {
    t.mantissas().iter().map(|&m| m as i128).collect()
}

/// Element-wise sum `A + B`, rounded once to the width of `A`.
///
/// The operand at the smaller exponent is shifted right with a sticky bit
/// (only when the exponents are far apart); the sum is formed in wide
/// integers and renormalized.
pub fn fxp_add(a: &FxpTensor, b: &FxpTensor, ctx: &mut RoundingContext) -> Result<FxpTensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("fxp_add", a.shape(), b.shape()));
    }
    let (Some(ua), Some(ub)) = (a.unit_exponent(), b.unit_exponent()) else {
        return Ok(if a.is_zero() { b.clone() } else { a.clone() });
    };
    let (wa, wb) = (wide(a), wide(b));
    let (sum, unit) = aligned_sum(&[(&wa, ua), (&wb, ub)], a.len());
    let unit = unit.unwrap_or(0);
    renormalize_wide(&sum, |_| unit, a.shape(), a.bits(), ctx)
}

/// Sums several same-shape tensors with a single final rounding.
pub(crate) fn accumulate_renormalized(parts: &[FxpTensor], bits: u32, ctx: &mut RoundingContext) -> Result<FxpTensor> {
    let shape = parts[0].shape().to_vec();
    let wides: Vec<(Vec<i128>, i32)> = parts
        .iter()
        .filter_map(|p| Some((wide(p), p.unit_exponent()?)))
        .collect();
    let terms: Vec<(&[i128], i32)> = wides.iter().map(|(v, u)| (v.as_slice(), *u)).collect();
    let (sum, unit) = aligned_sum(&terms, parts[0].len());
    let unit = unit.unwrap_or(0);
    renormalize_wide(&sum, |_| unit, &shape, bits, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numfmt::map_to_fixed;

    #[test]
    fn zero_is_identity() {
        let mut ctx = RoundingContext::stochastic(1);
        let a = map_to_fixed(&[0.3, -1.7, 2.2], &[3], 8, &mut ctx).unwrap();
        let z = FxpTensor::zeros(&[3], 8);
        assert_eq!(fxp_add(&a, &z, &mut ctx).unwrap(), a);
        assert_eq!(fxp_add(&z, &a, &mut ctx).unwrap(), a);
    }

    #[test]
    fn one_plus_one() {
        let mut ctx = RoundingContext::stochastic(1);
        let a = map_to_fixed(&[1.0], &[1], 8, &mut ctx).unwrap();
        let s = fxp_add(&a, &a, &mut ctx).unwrap();
        assert_eq!(s.to_f64(), vec![2.0]);
        assert_eq!(s.exponent(), Some(1));
    }

    #[test]
    fn far_apart_exponents_keep_sticky_evidence() {
        let mut ctx = RoundingContext::nearest();
        let a = map_to_fixed(&[1.0e30], &[1], 8, &mut ctx).unwrap();
        let b = map_to_fixed(&[1.0e-30], &[1], 8, &mut ctx).unwrap();
        let s = fxp_add(&a, &b, &mut ctx).unwrap();
        assert_eq!(s, a);
    }

    #[test]
    fn mean_over_seeds_is_the_float_sum() {
        let x = [0.71f32, -0.33, 5.9, 1.0e-3];
        let y = [0.05f32, 0.98, -2.6, 7.0];
        let seeds = 10_000;
        let mut sum = [0f64; 4];
        let mut sq = [0f64; 4];
        for s in 0..seeds {
            let mut ctx = RoundingContext::stochastic(s);
            let a = map_to_fixed(&x, &[4], 8, &mut ctx).unwrap();
            let b = map_to_fixed(&y, &[4], 8, &mut ctx).unwrap();
            let (ab, ba) = (fxp_add(&a, &b, &mut ctx.clone()).unwrap(), fxp_add(&b, &a, &mut ctx).unwrap());
            assert_eq!(ab.to_f64(), ba.to_f64());
            for (i, v) in ab.to_f64().into_iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..4 {
            let mean = sum[i] / seeds as f64;
            let var = sq[i] / seeds as f64 - mean * mean;
            let se = (var / seeds as f64).sqrt().max(1e-12);
            let exact = x[i] as f64 + y[i] as f64;
            assert!((mean - exact).abs() <= 4.0 * se, "i={i} mean={mean} exact={exact} se={se}");
        }
    }
}
