//! Softmax cross-entropy head, computed in float.

use crate::error::{Error, Result};
use crate::numfmt::{map_to_fixed, FxpTensor, RoundingContext};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// `(p - y) / B`, row-major `[B, C]`.
    pub grad: Vec<f32>,
    pub correct: usize,
}

/// Softmax cross-entropy of `logits` (`[B, C]`) against class indices.
pub fn softmax_cross_entropy(logits: &[f32], classes: usize, labels: &[usize]) -> Result<LossOutput> {
    let b = labels.len();
    if classes == 0 || logits.len() != b * classes {
        return Err(Error::shape("softmax_cross_entropy", &[logits.len()], &[b, classes]));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { index: i });
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grad = vec![0f32; logits.len()];
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Format(format!("label {label} outside {classes} classes")));
        }
        let row = &logits[r * classes..(r + 1) * classes];
        let (arg, max) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(a, m), (i, &v)| if (v as f64) > m { (i, v as f64) } else { (a, m) });
        if arg == label {
            correct += 1;
        }
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        loss += z.ln() + max - row[label] as f64;
        for (i, &v) in row.iter().enumerate() {
            let p = (v as f64 - max).exp() / z;
            let y = if i == label { 1.0 } else { 0.0 };
            grad[r * classes + i] = ((p - y) / b as f64) as f32;
        }
    }
    Ok(LossOutput {
        loss: loss / b as f64,
        grad,
        correct,
    })
}

/// Maps the loss gradient into the integer backward pass.
pub fn quantize_grad(out: &LossOutput, classes: usize, bits: u32, ctx: &mut RoundingContext) -> Result<FxpTensor> {
    map_to_fixed(&out.grad, &[out.grad.len() / classes, classes], bits, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 3, 10] {
            let out = softmax_cross_entropy(&vec![0.7; 4 * c], c, &[0, 1, 0, 1]).unwrap();
            assert!((out.loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_softmax() {
        let labels = [2usize, 0, 1];
        let mut logits = vec![0f32; 9];
        for (r, &l) in labels.iter().enumerate() {
            logits[r * 3 + l] = 80.0;
        }
        let out = softmax_cross_entropy(&logits, 3, &labels).unwrap();
        assert!(out.loss < 1e-30);
        assert_eq!(out.correct, 3);
        let mut ctx = RoundingContext::stochastic(3);
        let g = quantize_grad(&out, 3, 8, &mut ctx).unwrap();
        assert!(g.to_f64().iter().all(|v| v.abs() < 1e-30));
        assert!(out.grad.iter().all(|v| v.abs() < 1e-30));
    }

    #[test]
    fn rejects_non_finite() {
        let r = softmax_cross_entropy(&[0.0, f32::NAN], 2, &[0]);
        assert!(matches!(r, Err(Error::NonFiniteInput { index: 1 })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, c) = (5, 4);
        let logits: Vec<f32> = (0..b * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let out = softmax_cross_entropy(&logits, c, &labels).unwrap();
        // central differences of the same loss evaluated in f64
        let loss64 = |z: &[f64]| -> f64 {
            (0..b)
                .map(|r| {
                    let row = &z[r * c..(r + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m - row[labels[r]]
                })
                .sum::<f64>()
                / b as f64
        };
        let base: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        let h = 1e-5;
        for i in 0..b * c {
            let mut p = base.clone();
            let mut m = base.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (loss64(&p) - loss64(&m)) / (2.0 * h);
            assert!((fd - out.grad[i] as f64).abs() < 1e-3 * fd.abs().max(1e-3), "i={i}");
        }
    }
}
