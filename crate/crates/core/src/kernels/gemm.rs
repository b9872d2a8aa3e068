//! Integer GEMM: int8 mantissas, int16 products, int32 accumulation.

use super::acc::AccTensor;
use super::add::accumulate_renormalized;
use crate::error::{Error, Result};
use crate::numfmt::{max_mantissa, FxpTensor, RoundingContext};

/// Largest inner dimension whose worst-case dot product fits in an `i32`.
pub fn max_inner_dim(bits_a: u32, bits_b: u32) -> usize {
    let p = max_mantissa(bits_a) as i64 * max_mantissa(bits_b) as i64;
    (i32::MAX as i64 / p) as usize
}

fn dims2(op: &'static str, t: &FxpTensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

fn check_inner(k: usize, a: &FxpTensor, b: &FxpTensor) -> Result<()> {
    let bound = max_inner_dim(a.bits(), b.bits());
    if k > bound {
        return Err(Error::AccumulatorOverflow { inner: k, bound });
    }
    Ok(())
}

fn scale(a: &FxpTensor, b: &FxpTensor) -> Option<i32> {
    Some(a.unit_exponent()? + b.unit_exponent()?)
}

#[inline]
fn mac_row(acc: &mut [i32], a: i8, row: &[i8]) {
    let a = a as i16;
    for (o, &b) in acc.iter_mut().zip(row) {
        let p = a * b as i16;
        if cfg!(debug_assertions) {
            *o = o.checked_add(p as i32).expect("int32 accumulator overflow");
        } else {
            *o = o.wrapping_add(p as i32);
        }
    }
}

/// `A [m, k] x B [k, n]`, exact. The scale exponent is `e_a + e_b - 2(k - 2)`
/// for equal widths; `⊥` operands give a zero accumulator.
pub fn fxp_gemm(a: &FxpTensor, b: &FxpTensor) -> Result<AccTensor> {
    let (m, k) = dims2("fxp_gemm", a)?;
    let (k2, n) = dims2("fxp_gemm", b)?;
    if k != k2 {
        return Err(Error::shape("fxp_gemm", a.shape(), b.shape()));
    }
    check_inner(k, a, b)?;
    let Some(scale_exponent) = scale(a, b) else {
        return Ok(AccTensor::zeros(&[m, n]));
    };
    let (am, bm) = (a.mantissas(), b.mantissas());
    let mut values = vec![0i32; m * n];
    for i in 0..m {
        let out = &mut values[i * n..(i + 1) * n];
        for p in 0..k {
            let x = am[i * k + p];
            if x != 0 {
                mac_row(out, x, &bm[p * n..(p + 1) * n]);
            }
        }
    }
    Ok(AccTensor {
        shape: vec![m, n],
        values,
        scale_exponent,
    })
}

/// `A [m, k] x B^T` with `B` stored as `[n, k]`.
pub fn fxp_gemm_nt(a: &FxpTensor, b: &FxpTensor) -> Result<AccTensor> {
    let (m, k) = dims2("fxp_gemm_nt", a)?;
    let (n, k2) = dims2("fxp_gemm_nt", b)?;
    if k != k2 {
        return Err(Error::shape("fxp_gemm_nt", a.shape(), b.shape()));
    }
    check_inner(k, a, b)?;
    let Some(scale_exponent) = scale(a, b) else {
        return Ok(AccTensor::zeros(&[m, n]));
    };
    let (am, bm) = (a.mantissas(), b.mantissas());
    let mut values = vec![0i32; m * n];
    for i in 0..m {
        let row = &am[i * k..(i + 1) * k];
        for j in 0..n {
            let col = &bm[j * k..(j + 1) * k];
            let mut s = 0i32;
            for (&x, &y) in row.iter().zip(col) {
                s += (x as i16 * y as i16) as i32;
            }
            values[i * n + j] = s;
        }
    }
    Ok(AccTensor {
        shape: vec![m, n],
        values,
        scale_exponent,
    })
}

/// GEMM for inner dimensions beyond the int32 bound: the inner dimension is
/// split into tiles that each fit, every tile is renormalized to `bits`, and
/// the tiles are summed and renormalized once more.
pub fn fxp_gemm_tiled(a: &FxpTensor, b: &FxpTensor, bits: u32, ctx: &mut RoundingContext) -> Result<FxpTensor> {
    let (m, k) = dims2("fxp_gemm_tiled", a)?;
    let (k2, n) = dims2("fxp_gemm_tiled", b)?;
    if k != k2 {
        return Err(Error::shape("fxp_gemm_tiled", a.shape(), b.shape()));
    }
    let tile = max_inner_dim(a.bits(), b.bits());
    if k <= tile {
        return fxp_gemm(a, b)?.renormalize(bits, ctx);
    }
    let mut parts = Vec::new();
    for start in (0..k).step_by(tile) {
        let end = (start + tile).min(k);
        let cols: Vec<usize> = (0..m).flat_map(|i| (start..end).map(move |p| i * k + p)).collect();
        let a_t = a.gather(vec![m, end - start], &cols);
        let rows: Vec<usize> = (start * n..end * n).collect();
        let b_t = b.gather(vec![end - start, n], &rows);
        parts.push(fxp_gemm(&a_t, &b_t)?.renormalize(bits, ctx)?);
    }
    accumulate_renormalized(&parts, bits, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numfmt::map_to_fixed;

    fn random_tensor(shape: &[usize], bits: u32, e: i32, seed: u64) -> FxpTensor {
        let lim = max_mantissa(bits) as i64;
        let n: usize = shape.iter().product();
        let m = (0..n)
            .map(|i| {
                let r = crate::numfmt::rounding::mix64(seed.wrapping_mul(1_000_003) + i as u64);
                ((r % (2 * lim as u64 + 1)) as i64 - lim) as i8
            })
            .collect();
        FxpTensor::new(shape.to_vec(), bits, Some(e), m).unwrap()
    }

    fn oracle(a: &FxpTensor, b: &FxpTensor) -> Vec<i64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0i64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.mantissas()[i * k + p] as i64 * b.mantissas()[p * n + j] as i64;
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one() {
        let a = FxpTensor::new(vec![1, 1], 8, Some(0), vec![64]).unwrap();
        let acc = fxp_gemm(&a, &a).unwrap();
        assert_eq!(acc.values, vec![4096]);
        assert_eq!(acc.scale_exponent, -12);
        assert_eq!(acc.to_f64(), vec![1.0]);
    }

    #[test]
    fn identity_reproduces_operand() {
        let mut id = vec![0i8; 16];
        for i in 0..4 {
            id[i * 5] = 64;
        }
        let a = FxpTensor::new(vec![4, 4], 8, Some(0), id).unwrap();
        let b = random_tensor(&[4, 3], 8, -3, 1);
        assert_eq!(fxp_gemm(&a, &b).unwrap().to_f64(), b.to_f64());
    }

    #[test]
    fn random_against_integer_oracle() {
        for seed in 0..5 {
            let a = random_tensor(&[16, 16], 8, 2, seed);
            let b = random_tensor(&[16, 16], 8, -4, seed + 100);
            let acc = fxp_gemm(&a, &b).unwrap();
            let want = oracle(&a, &b);
            assert!(acc.values.iter().zip(&want).all(|(&x, &y)| x as i64 == y));
            assert_eq!(acc.scale_exponent, 2 - 4 - 12);
            let nt = fxp_gemm_nt(&a, &b.transpose().unwrap()).unwrap();
            assert_eq!(nt, acc);
        }
    }

    #[test]
    fn zero_operand_short_circuits() {
        let a = FxpTensor::zeros(&[2, 3], 8);
        let b = random_tensor(&[3, 2], 8, 0, 3);
        let acc = fxp_gemm(&a, &b).unwrap();
        assert!(acc.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn shape_and_accumulator_errors() {
        let a = random_tensor(&[2, 3], 8, 0, 1);
        assert!(matches!(fxp_gemm(&a, &a), Err(Error::ShapeMismatch { .. })));
        assert_eq!(max_inner_dim(8, 8), 133_144);
        let big = FxpTensor::zeros(&[1, 133_145], 8);
        let col = FxpTensor::zeros(&[133_145, 1], 8);
        assert!(matches!(fxp_gemm(&big, &col), Err(Error::AccumulatorOverflow { bound: 133_144, .. })));
    }

    #[test]
    fn tiled_matches_direct_when_it_fits() {
        let mut ctx = RoundingContext::nearest();
        let a = random_tensor(&[3, 40], 8, 0, 5);
        let b = random_tensor(&[40, 2], 8, 0, 6);
        let direct = fxp_gemm(&a, &b).unwrap().renormalize(8, &mut ctx.clone()).unwrap();
        assert_eq!(fxp_gemm_tiled(&a, &b, 8, &mut ctx).unwrap(), direct);
    }

    #[test]
    fn tiled_handles_oversized_inner_dimension() {
        let k = 140_000;
        let mut ctx = RoundingContext::nearest();
        let ones = vec![1.0f32; k];
        let a = map_to_fixed(&ones, &[1, k], 8, &mut ctx).unwrap();
        let b = map_to_fixed(&ones, &[k, 1], 8, &mut ctx).unwrap();
        let out = fxp_gemm_tiled(&a, &b, 8, &mut ctx).unwrap();
        let v = out.to_f64()[0];
        assert!((v - k as f64).abs() <= out.ulp(), "{v}");
    }
}
