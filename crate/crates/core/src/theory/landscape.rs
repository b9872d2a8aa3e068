//! Loss surface around trained weights along two fixed Gaussian directions,
//! evaluated by the float arm and the k-bit arm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::{FloatModel, IntModel, SgdConfig};
use crate::numfmt::RoundingContext;
use crate::optim::{MasterTensor, OptState};
use crate::report::fmt_g;

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub n: usize,
    pub scale: f64,
    /// Grid coordinates along each direction, `linspace(-scale, scale, n)`.
    pub coords: Vec<f64>,
    /// Row-major `[n, n]`; row index walks the first direction.
    pub float: Vec<f64>,
    pub fixed: Vec<f64>,
}

impl LandscapeGrid {
    pub fn at(grid: &[f64], n: usize, i: usize, j: usize) -> f64 {
        grid[i * n + j]
    }

    /// An `n x n` CSV matrix without a header.
    pub fn matrix_csv(&self, grid: &[f64]) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| fmt_g(grid[i * self.n + j])).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Random direction with each tensor scaled to the RMS of its weights, so
/// every layer is perturbed in proportion to its own size.
fn direction(params: &[Vec<f32>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|p| {
            let rms = (p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / p.len().max(1) as f64).sqrt();
            p.iter().map(|_| rms * rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect()
}

/// Evaluates both arms on `(x, labels)` at `w + a d1 + b d2` for `a, b` on an
/// `n x n` grid. Batch norm uses the model's running statistics.
pub fn landscape_probe(model: &IntModel, x: &[f32], labels: &[usize], n: usize, scale: f64, seed: u64) -> Result<LandscapeGrid> {
    let base = model.master_values();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = direction(&base, &mut rng);
    let d2 = direction(&base, &mut rng);
    let coords: Vec<f64> = if n == 1 {
        vec![0.0]
    } else {
        (0..n).map(|i| scale * (2.0 * i as f64 / (n - 1) as f64 - 1.0)).collect()
    };
    let specs = model.cfg.params();
    let frozen = SgdConfig { lr: 0.0, momentum: 0.0, weight_decay: 0.0 };
    let (mut float, mut fixed) = (Vec::with_capacity(n * n), Vec::with_capacity(n * n));
    for &a in &coords {
        for &b in &coords {
            let params: Vec<Vec<f32>> = base
                .iter()
                .zip(d1.iter().zip(&d2))
                .map(|(w, (u, v))| w.iter().zip(u.iter().zip(v)).map(|(&w, (u, v))| (w as f64 + a * u + b * v) as f32).collect())
                .collect();
            let mut fm = FloatModel::new(model.cfg.clone(), params.clone(), frozen)?;
            fm.bn = model.bn.clone();
            float.push(fm.evaluate(x, labels)?.loss);

            let mut ctx = RoundingContext::nearest();
            let masters = specs
                .iter()
                .zip(&params)
                .map(|(s, p)| Ok((MasterTensor::from_f32(p, &s.shape, &mut ctx)?, s.decay)))
                .collect::<Result<Vec<_>>>()?;
            let mut im = IntModel::from_state(model.cfg.clone(), OptState::new(masters, 0.0, 0.0, 0.0));
            im.bn = model.bn.clone();
            fixed.push(im.evaluate(x, labels, 0)?.loss);
        }
    }
    Ok(LandscapeGrid {
        n,
        scale,
        coords,
        float,
        fixed,
    })
}

#[cfg(test)]
mod tests_support {
    use super::*;
    use crate::nn::{LayerSpec, ModelConfig};

    pub fn trained() -> (IntModel, Vec<f32>, Vec<usize>) {
        let layers = vec![
            LayerSpec::Linear { inp: 4, out: 8, bias: false },
            LayerSpec::BatchNorm { channels: 8 },
            LayerSpec::Relu,
            LayerSpec::Linear { inp: 8, out: 3, bias: true },
        ];
        let cfg = ModelConfig::new(layers, vec![4], 8, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<usize> = (0..48).map(|i| i % 3).collect();
        let x: Vec<f32> = labels
            .iter()
            .flat_map(|&c| (0..4).map(move |j| if j == c { 2.0 } else { 0.0 }).collect::<Vec<_>>())
            .map(|v| v + rng.random_range(-1.5f32..1.5))
            .collect();
        let mut m = IntModel::new(cfg, SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 }).unwrap();
        for _ in 0..150 {
            m.train_step(&x, &labels).unwrap();
        }
        (m, x, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::tests_support::trained;

    #[test]
    fn centre_equals_checkpoint_loss() {
        let (m, x, y) = trained();
        let g = landscape_probe(&m, &x, &y, 5, 0.5, 1).unwrap();
        let c = LandscapeGrid::at(&g.fixed, 5, 2, 2);
        assert_eq!(c, m.evaluate(&x, &y, 0).unwrap().loss);
        let mut f = FloatModel::new(m.cfg.clone(), m.master_values(), SgdConfig { lr: 0.0, momentum: 0.0, weight_decay: 0.0 }).unwrap();
        f.bn = m.bn.clone();
        assert_eq!(LandscapeGrid::at(&g.float, 5, 2, 2), f.evaluate(&x, &y).unwrap().loss);
        assert_eq!(g.matrix_csv(&g.float).lines().count(), 5);
    }

    /// `d` and `-d` are equally likely, so the mean of `L(w + d) - L(w - d)`
    /// over direction seeds is zero.
    #[test]
    fn negation_symmetry_in_expectation() {
        let (m, x, y) = trained();
        let diffs: Vec<f64> = (0..40)
            .map(|s| {
                let g = landscape_probe(&m, &x, &y, 3, 0.5, 100 + s).unwrap();
                LandscapeGrid::at(&g.float, 3, 2, 2) - LandscapeGrid::at(&g.float, 3, 0, 0)
            })
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let se = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!(se > 0.0);
        assert!(mean.abs() <= 4.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn fixed_point_grid_tracks_float_grid() {
        let (m, x, y) = trained();
        let g = landscape_probe(&m, &x, &y, 7, 0.3, 2).unwrap();
        // logits near +-10 sit on a 2^-3 grid at k = 8, which moves the loss
        // by up to about a sixth; the surface shape must still match
        for (a, b) in g.float.iter().zip(&g.fixed) {
            assert!((a - b).abs() <= 0.25 * a + 0.01, "float {a} fixed {b}");
        }
        let n = g.float.len() as f64;
        let (mf, mq) = (g.float.iter().sum::<f64>() / n, g.fixed.iter().sum::<f64>() / n);
        let cov: f64 = g.float.iter().zip(&g.fixed).map(|(a, b)| (a - mf) * (b - mq)).sum();
        let vf: f64 = g.float.iter().map(|a| (a - mf).powi(2)).sum();
        let vq: f64 = g.fixed.iter().map(|b| (b - mq).powi(2)).sum();
        assert!(cov / (vf * vq).sqrt() > 0.98);
    }
}
