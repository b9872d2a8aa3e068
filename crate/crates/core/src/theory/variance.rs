//! Variance of the integer linear-layer weight gradient `C^ = X^T G^` over
//! rounding seeds, against the additive bound built from the measured
//! per-tensor rounding variances.

use crate::error::{Error, Result};
use crate::kernels::fxp_gemm;
use crate::numfmt::{map_to_fixed, RoundingContext, RoundingMode};
use crate::report::{Cell, Csv};

/// Noise statistics of `C^ = X^T G^` for fixed `X` (`[K, I]`) and `G` (`[K, J]`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStats {
    pub inner: usize,
    pub rows: usize,
    pub cols: usize,
    pub seeds: u64,
    /// Largest per-element rounding variance of `X^` and `G^`.
    pub sigma2_x: f64,
    pub sigma2_g: f64,
    /// Mean of `C^ - C` per output element.
    pub bias: Vec<f64>,
    /// Empirical variance of `C^` per output element.
    pub variance: Vec<f64>,
    /// Variance of the float gradient; zero for fixed `X`, `G`.
    pub float_variance: Vec<f64>,
    /// `sigma2_g |X_i|^2 + K sigma2_x sigma2_g`.
    pub m_q: Vec<f64>,
    /// `sigma2_x`, the coefficient of `|G_j|^2`.
    pub m_q_v: f64,
    /// `|G_j|^2` per output element.
    pub g_norm2: Vec<f64>,
}

impl NoiseStats {
    pub fn bound(&self, e: usize) -> f64 {
        self.float_variance[e] + self.m_q_v * self.g_norm2[e] + self.m_q[e]
    }

    pub fn holds(&self, e: usize) -> bool {
        self.variance[e] <= self.bound(e)
    }

    pub fn all_hold(&self) -> bool {
        (0..self.variance.len()).all(|e| self.holds(e))
    }

    pub fn to_csv(&self) -> String {
        let mut c = Csv::new(&["i", "j", "bias", "variance", "bound", "m_q", "m_q_v_term", "holds"]);
        for e in 0..self.variance.len() {
            c.row(&[
                Cell::U((e / self.cols) as u64),
                Cell::U((e % self.cols) as u64),
                Cell::F(self.bias[e]),
                Cell::F(self.variance[e]),
                Cell::F(self.bound(e)),
                Cell::F(self.m_q[e]),
                Cell::F(self.m_q_v * self.g_norm2[e]),
                Cell::B(self.holds(e)),
            ]);
        }
        c.into_string()
    }
}

struct Moments {
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            sq: vec![0.0; n],
        }
    }

    fn add(&mut self, v: &[f64]) {
        for ((s, q), &x) in self.sum.iter_mut().zip(&mut self.sq).zip(v) {
            *s += x;
            *q += x * x;
        }
    }

    /// Unbiased sample variances.
    fn variances(&self, n: u64) -> Vec<f64> {
        let n = n as f64;
        self.sum
            .iter()
            .zip(&self.sq)
            .map(|(&s, &q)| ((q - s * s / n) / (n - 1.0)).max(0.0))
            .collect()
    }

    fn means(&self, n: u64) -> Vec<f64> {
        self.sum.iter().map(|s| s / n as f64).collect()
    }
}

/// `x` is `[K, I]`, `g` is `[K, J]`, both mapped to `bits` on every seed.
pub fn gradient_variance_probe(
    x: &[f32],
    g: &[f32],
    dims: (usize, usize, usize),
    bits: u32,
    n_seeds: u64,
    mode: RoundingMode,
) -> Result<NoiseStats> {
    let (k, ni, nj) = dims;
    if x.len() != k * ni || g.len() != k * nj {
        return Err(Error::shape("gradient_variance_probe", &[x.len(), g.len()], &[k * ni, k * nj]));
    }
    if n_seeds < 2 {
        return Err(Error::Format("variance probe needs at least two seeds".into()));
    }
    let exact: Vec<f64> = (0..ni * nj)
        .map(|e| (0..k).map(|r| x[r * ni + e / nj] as f64 * g[r * nj + e % nj] as f64).sum())
        .collect();
    let (mut mx, mut mg, mut mc) = (Moments::new(x.len()), Moments::new(g.len()), Moments::new(ni * nj));
    for s in 0..n_seeds {
        let mut ctx = RoundingContext::new(s, mode);
        let xq = map_to_fixed(x, &[k, ni], bits, &mut ctx)?;
        let gq = map_to_fixed(g, &[k, nj], bits, &mut ctx)?;
        let c = fxp_gemm(&xq.transpose()?, &gq)?.to_f64();
        mx.add(&xq.to_f64());
        mg.add(&gq.to_f64());
        mc.add(&c);
    }
    let sigma2_x = mx.variances(n_seeds).into_iter().fold(0.0, f64::max);
    let sigma2_g = mg.variances(n_seeds).into_iter().fold(0.0, f64::max);
    let x_norm2: Vec<f64> = (0..ni).map(|i| (0..k).map(|r| (x[r * ni + i] as f64).powi(2)).sum()).collect();
    let g_norm2: Vec<f64> = (0..ni * nj)
        .map(|e| (0..k).map(|r| (g[r * nj + e % nj] as f64).powi(2)).sum())
        .collect();
    let m_q = (0..ni * nj)
        .map(|e| sigma2_g * x_norm2[e / nj] + k as f64 * sigma2_x * sigma2_g)
        .collect();
    let bias = mc.means(n_seeds).iter().zip(&exact).map(|(m, c)| m - c).collect();
    Ok(NoiseStats {
        inner: k,
        rows: ni,
        cols: nj,
        seeds: n_seeds,
        sigma2_x,
        sigma2_g,
        bias,
        variance: mc.variances(n_seeds),
        float_variance: vec![0.0; ni * nj],
        m_q,
        m_q_v: sigma2_x,
        g_norm2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nearest_on_grid_adds_no_variance() {
        let x = [0.5f32, -0.25, 1.0, 0.75];
        let g = [0.125f32, -1.0, 0.5, 0.25];
        let s = gradient_variance_probe(&x, &g, (2, 2, 2), 8, 100, RoundingMode::Nearest).unwrap();
        assert!(s.variance.iter().all(|&v| v == 0.0));
        assert!(s.bias.iter().all(|&b| b == 0.0));
        assert_eq!((s.sigma2_x, s.sigma2_g), (0.0, 0.0));
    }

    /// With K = 1 the variance of `x^ g^` has the closed form
    /// `g^2 s_x + x^2 s_g + s_x s_g` for the exact Bernoulli variances.
    #[test]
    fn single_term_matches_closed_form() {
        let (x, g) = (0.3f32, -0.7f32);
        // mapped alone, each value is its own tensor: leading bit at bits - 2
        let bern = |v: f32| {
            let ulp = 2f64.powi(v.abs().log2().floor() as i32 - 6);
            let p = (v.abs() as f64 / ulp).fract();
            p * (1.0 - p) * ulp * ulp
        };
        let (sx, sg) = (bern(x), bern(g));
        let closed = (g as f64).powi(2) * sx + (x as f64).powi(2) * sg + sx * sg;
        let s = gradient_variance_probe(&[x], &[g], (1, 1, 1), 8, 200_000, RoundingMode::Stochastic).unwrap();
        assert!((s.sigma2_x - sx).abs() < 0.02 * sx);
        assert!((s.sigma2_g - sg).abs() < 0.02 * sg);
        assert!((s.variance[0] - closed).abs() < 0.03 * closed, "{} vs {closed}", s.variance[0]);
        assert!(s.bias[0].abs() < 4.0 * (closed / 200_000.0).sqrt());
    }

    #[test]
    fn random_instance_satisfies_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f32> = (0..64).map(|_| rng.random_range(-0.1..0.1)).collect();
        let s = gradient_variance_probe(&x, &g, (8, 8, 8), 8, 1000, RoundingMode::Stochastic).unwrap();
        assert!(s.all_hold(), "{}", s.to_csv());
    }
}
