//! Symmetric uniform 8-bit quantization, the usual per-tensor baseline.

use crate::error::{Error, Result};

fn check_finite(x: &[f32]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFiniteInput { index }),
        None => Ok(()),
    }
}

/// `q = round(127 * clamp(x, s) / s)` with `s = max |x|`.
pub fn uniform_quant_baseline(x: &[f32]) -> Result<(Vec<i8>, f32)> {
    check_finite(x)?;
    let s = x.iter().fold(0f32, |m, v| m.max(v.abs()));
    Ok((uniform_quantize_with_scale(x, s)?, s))
}

/// Quantizes against a given clamp scale `s`.
pub fn uniform_quantize_with_scale(x: &[f32], s: f32) -> Result<Vec<i8>> {
    check_finite(x)?;
    if s == 0.0 {
        return Ok(vec![0; x.len()]);
    }
    Ok(x
        .iter()
        .map(|&v| (127.0 * (v.clamp(-s, s) as f64) / s as f64).round() as i8)
        .collect())
}

pub fn uniform_dequantize(q: &[i8], s: f32) -> Vec<f32> {
    q.iter().map(|&v| (v as f64 * s as f64 / 127.0) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoints_and_unit() {
        let (q, s) = uniform_quant_baseline(&[-2.5, 0.0, 2.5]).unwrap();
        assert_eq!((q, s), (vec![-127, 0, 127], 2.5));
        let (q, s) = uniform_quant_baseline(&[1.0]).unwrap();
        assert_eq!(q, vec![127]);
        assert_eq!(uniform_dequantize(&q, s), vec![1.0]);
        assert!(uniform_quant_baseline(&[f32::INFINITY]).is_err());
    }

    #[test]
    fn roundtrip_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x: Vec<f32> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (q, s) = uniform_quant_baseline(&x).unwrap();
            let back = uniform_dequantize(&q, s);
            let bound = s as f64 / 254.0 * (1.0 + 1e-6);
            for (a, b) in x.iter().zip(&back) {
                assert!(((a - b) as f64).abs() <= bound);
            }
            // a tighter clamp adds exactly the clipped amount
            let c = s / 2.0;
            let back = uniform_dequantize(&uniform_quantize_with_scale(&x, c).unwrap(), c);
            for (a, b) in x.iter().zip(&back) {
                let clip = (a.abs() - c).max(0.0) as f64;
                assert!(((a - b) as f64).abs() <= c as f64 / 254.0 * (1.0 + 1e-6) + clip);
            }
        }
    }
}
