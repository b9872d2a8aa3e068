//! Fixed-step SGD with fixed-point gradients on least-squares quadratics with
//! an exactly placed spectrum.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numfmt::{map_to_fixed, RoundingContext, RoundingMode};
use crate::report::{Cell, Csv};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexProblemSpec {
    pub dim: usize,
    /// Rows of the least-squares system; minibatches sample them.
    pub rows: usize,
    /// Strong-convexity constant, the smallest Hessian eigenvalue.
    pub c: f64,
    /// Lipschitz constant of the gradient, the largest eigenvalue.
    pub l: f64,
    /// Minibatch size; `batch >= rows` gives the exact full gradient.
    pub batch: usize,
    /// Scale of the residual at the minimizer, which sets the gradient noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ConvexProblemSpec {
    fn default() -> Self {
        Self {
            dim: 50,
            rows: 1000,
            c: 0.1,
            l: 1.0,
            batch: 10,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// `loss(w) = |A w - b|^2 / (2n)` with `A^T A / n = V diag(eigenvalues) V^T`.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    pub spec: ConvexProblemSpec,
    /// Row-major `[rows, dim]`.
    a: Vec<f64>,
    b: Vec<f64>,
    pub w_star: DVector<f64>,
    pub loss_star: f64,
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors as columns.
    pub basis: DMatrix<f64>,
    hessian: DMatrix<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

impl QuadraticProblem {
    pub fn new(spec: ConvexProblemSpec) -> Result<Self> {
        let (d, n) = (spec.dim, spec.rows);
        if !(spec.c > 0.0 && spec.c <= spec.l) || d < 2 || n <= d || spec.batch == 0 {
            return Err(Error::Format(format!("invalid quadratic problem {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0051_7EAD);
        let eigenvalues: Vec<f64> = (0..d).map(|i| spec.c + (spec.l - spec.c) * i as f64 / (d - 1) as f64).collect();
        let u = gaussian(&mut rng, n, d).qr().q();
        let basis = gaussian(&mut rng, d, d).qr().q();
        let scale = DMatrix::from_diagonal(&DVector::from_iterator(d, eigenvalues.iter().map(|l| (l * n as f64).sqrt())));
        let a = &u * scale * basis.transpose();
        let w_star = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let z: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        let r = (&z - &u * (u.transpose() * &z)) * spec.noise;
        let b = &a * &w_star - &r;
        let loss_star = r.norm_squared() / (2.0 * n as f64);
        let hessian = &basis * DMatrix::from_diagonal(&DVector::from_vec(eigenvalues.clone())) * basis.transpose();
        Ok(Self {
            spec,
            a: (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect(),
            b: b.iter().copied().collect(),
            w_star,
            loss_star,
            eigenvalues,
            basis,
            hessian,
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.spec.dim..(i + 1) * self.spec.dim]
    }

    fn residual(&self, i: usize, w: &DVector<f64>) -> f64 {
        self.row(i).iter().zip(w.iter()).map(|(a, w)| a * w).sum::<f64>() - self.b[i]
    }

    /// Direct evaluation from the rows.
    pub fn loss(&self, w: &DVector<f64>) -> f64 {
        (0..self.spec.rows).map(|i| self.residual(i, w).powi(2)).sum::<f64>() / (2.0 * self.spec.rows as f64)
    }

    /// `loss(w) - loss*`, evaluated as `(w - w*)^T H (w - w*) / 2`.
    pub fn gap(&self, w: &DVector<f64>) -> f64 {
        let e = w - &self.w_star;
        0.5 * e.dot(&(&self.hessian * &e))
    }

    pub fn full_gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.hessian * (w - &self.w_star)
    }

    fn batch_indices(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.spec.batch >= self.spec.rows {
            (0..self.spec.rows).collect()
        } else {
            (0..self.spec.batch).map(|_| rng.random_range(0..self.spec.rows)).collect()
        }
    }

    fn batch_gradient(&self, w: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
        let mut g = DVector::zeros(self.spec.dim);
        for &i in idx {
            let r = self.residual(i, w);
            for (gj, aj) in g.iter_mut().zip(self.row(i)) {
                *gj += r * aj;
            }
        }
        g / idx.len() as f64
    }

    pub fn minibatch_gradient(&self, w: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let idx = self.batch_indices(rng);
        self.batch_gradient(w, &idx)
    }

    /// Exact `E|g_B(w) - grad(w)|^2` for rows sampled with replacement.
    pub fn minibatch_variance(&self, w: &DVector<f64>) -> f64 {
        if self.spec.batch >= self.spec.rows {
            return 0.0;
        }
        let n = self.spec.rows as f64;
        let second: f64 = (0..self.spec.rows)
            .map(|i| self.residual(i, w).powi(2) * self.row(i).iter().map(|a| a * a).sum::<f64>())
            .sum::<f64>()
            / n;
        (second - self.full_gradient(w).norm_squared()) / self.spec.batch as f64
    }

    /// Minibatch noise covariance at the minimizer, in the eigenbasis
    /// (diagonal only).
    pub fn noise_spectrum_at_optimum(&self) -> Vec<f64> {
        let d = self.spec.dim;
        if self.spec.batch >= self.spec.rows {
            return vec![0.0; d];
        }
        let mut q = DMatrix::<f64>::zeros(d, d);
        for i in 0..self.spec.rows {
            let r = self.residual(i, &self.w_star);
            let a = DVector::from_column_slice(self.row(i));
            q += &a * a.transpose() * (r * r);
        }
        q /= (self.spec.rows * self.spec.batch) as f64;
        let qt = self.basis.transpose() * q * &self.basis;
        (0..d).map(|i| qt[(i, i)]).collect()
    }

    /// Eigenvector of the smallest eigenvalue.
    pub fn slowest_direction(&self) -> DVector<f64> {
        self.basis.column(0).into_owned()
    }
}

/// Maps a gradient to `bits` (through `f32`) and back.
pub fn quantize_gradient(g: &DVector<f64>, bits: u32, ctx: &mut RoundingContext) -> Result<DVector<f64>> {
    let v: Vec<f32> = g.iter().map(|&x| x as f32).collect();
    let t = map_to_fixed(&v, &[v.len()], bits, ctx)?;
    Ok(DVector::from_vec(t.to_f64()))
}

/// Plug-in noise constants: `E|g - grad|^2 <= M + M_V |grad|^2` and
/// `E|g^ - g|^2 <= M^q + M^q_V |grad|^2`, with `M_G = 1 + M_V` and
/// `M^q_G = M^q_V` bounding the second moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConstants {
    pub m: f64,
    pub m_v: f64,
    pub m_q: f64,
    pub m_q_v: f64,
}

impl NoiseConstants {
    pub fn m_g(&self) -> f64 {
        1.0 + self.m_v
    }

    pub fn m_q_g(&self) -> f64 {
        self.m_q_v
    }

    /// Largest admissible step, `1 / (L (M_G + M^q_G))`.
    pub fn lr_limit(&self, l: f64) -> f64 {
        1.0 / (l * (self.m_g() + self.m_q_g()))
    }

    /// Measures the constants at the minimizer and along the extreme and a
    /// few random directions. Minibatch variances are exact; rounding
    /// variances use `samples` Monte Carlo draws per point.
    pub fn measure(p: &QuadraticProblem, bits: u32, samples: usize, seed: u64) -> Result<Self> {
        let d = p.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = RoundingContext::stochastic(seed);
        let mut qvar = |w: &DVector<f64>, rng: &mut ChaCha8Rng| -> Result<f64> {
            let mut s = 0.0;
            for _ in 0..samples {
                let g = p.minibatch_gradient(w, rng);
                s += (quantize_gradient(&g, bits, &mut ctx)? - g).norm_squared();
            }
            Ok(s / samples as f64)
        };
        let m = p.minibatch_variance(&p.w_star);
        let m_q = qvar(&p.w_star, &mut rng)?;
        let mut dirs = vec![p.basis.column(0).into_owned(), p.basis.column(d - 1).into_owned()];
        for _ in 0..3 {
            let v: DVector<f64> = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
            dirs.push(v.normalize());
        }
        let (mut m_v, mut m_q_v) = (0f64, 0f64);
        for v in &dirs {
            for rho in [0.5, 2.0, 8.0] {
                let w = &p.w_star + v * rho;
                let g2 = p.full_gradient(&w).norm_squared();
                m_v = m_v.max((p.minibatch_variance(&w) - m) / g2);
                m_q_v = m_q_v.max((qvar(&w, &mut rng)? - m_q) / g2);
            }
        }
        Ok(Self { m, m_v, m_q, m_q_v })
    }
}

/// One (bit width, step size) configuration of the experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub bits: u32,
    pub alpha: f64,
    pub steps: usize,
    pub seeds: u64,
    /// Steady-state gap with float gradients.
    pub gap_float: f64,
    /// Steady-state gap with fixed-point gradients, and its standard error
    /// across seeds.
    pub gap_fixed: f64,
    pub gap_fixed_se: f64,
    /// Closed-form steady gap of float SGD on this quadratic.
    pub gap_float_predicted: f64,
    /// `gap_fixed - gap_float` on paired trajectories.
    pub excess_paired: f64,
    /// `(w^q - w^f)^T H (w^q - w^f) / 2`, which has the same mean as
    /// `excess_paired` because the cross term has zero mean.
    pub excess: f64,
    pub excess_se: f64,
    /// `alpha M^q / (2d) sum_i 1 / (2 - alpha lambda_i)`.
    pub excess_predicted: f64,
    /// Measured `E|g - grad|^2` and `E|g^ - g|^2` over the steady window.
    pub m_hat: f64,
    pub m_q_hat: f64,
    /// `alpha L (M + M^q) / (2c)` and `alpha L M^q / (2c)`.
    pub bound: f64,
    pub bound_q: f64,
    /// Per-step ratio of the transient gap, fitted on the log scale.
    pub contraction: f64,
    /// `1 - alpha c`.
    pub contraction_theory: f64,
}

impl GapRow {
    pub fn bound_holds(&self) -> bool {
        self.gap_fixed <= self.bound
    }

    pub fn contraction_error(&self) -> f64 {
        (self.contraction - self.contraction_theory).abs() / self.contraction_theory
    }

    pub fn excess_error(&self) -> f64 {
        (self.excess - self.excess_predicted).abs() / self.excess_predicted
    }
}

pub fn gap_table_csv(rows: &[GapRow]) -> String {
    let mut c = Csv::new(&[
        "bits",
        "alpha",
        "steps",
        "seeds",
        "gap_float",
        "gap_fixed",
        "gap_fixed_se",
        "gap_float_predicted",
        "excess_paired",
        "excess",
        "excess_se",
        "excess_predicted",
        "m_hat",
        "m_q_hat",
        "bound",
        "bound_q",
        "contraction",
        "contraction_theory",
    ]);
    for r in rows {
        c.row(&[
            Cell::U(r.bits as u64),
            Cell::F(r.alpha),
            Cell::U(r.steps as u64),
            Cell::U(r.seeds),
            Cell::F(r.gap_float),
            Cell::F(r.gap_fixed),
            Cell::F(r.gap_fixed_se),
            Cell::F(r.gap_float_predicted),
            Cell::F(r.excess_paired),
            Cell::F(r.excess),
            Cell::F(r.excess_se),
            Cell::F(r.excess_predicted),
            Cell::F(r.m_hat),
            Cell::F(r.m_q_hat),
            Cell::F(r.bound),
            Cell::F(r.bound_q),
            Cell::F(r.contraction),
            Cell::F(r.contraction_theory),
        ]);
    }
    c.into_string()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub seeds: u64,
    /// Steps per run; `None` picks `40 / (alpha c)`.
    pub steps: Option<usize>,
    /// Start at `w* + offset v_min`.
    pub offset: f64,
    pub mode: RoundingMode,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seeds: 32,
            steps: None,
            offset: 10.0,
            mode: RoundingMode::Stochastic,
        }
    }
}

/// Least-squares slope of `ln(y)` against the index, over the points where
/// `lo < y < hi`.
fn log_slope(ys: &[f64], lo: f64, hi: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = ys
        .iter()
        .enumerate()
        .filter(|(_, &y)| y > lo && y < hi)
        .map(|(k, &y)| (k as f64, y.ln()))
        .collect();
    if pts.len() < 8 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Runs paired float / fixed-point SGD for every bit width and step size.
/// Each step size must satisfy the measured limit `1 / (L (M_G + M^q_G))`.
pub fn theorem1_experiment(
    p: &QuadraticProblem,
    alphas: &[f64],
    bits: &[u32],
    consts: &NoiseConstants,
    opts: RunOptions,
) -> Result<Vec<GapRow>> {
    let limit = consts.lr_limit(p.spec.l);
    if let Some(&lr) = alphas.iter().find(|&&a| a <= 0.0 || a > limit) {
        return Err(Error::LearningRateTooLarge { lr, limit });
    }
    let mut rows = Vec::new();
    for &k in bits {
        for &alpha in alphas {
            rows.push(run_config(p, alpha, k, opts)?);
        }
    }
    Ok(rows)
}

fn run_config(p: &QuadraticProblem, alpha: f64, bits: u32, opts: RunOptions) -> Result<GapRow> {
    let (d, c, l) = (p.dim(), p.spec.c, p.spec.l);
    let steps = opts.steps.unwrap_or((40.0 / (alpha * c)).ceil() as usize);
    let window = (steps / 5).max(1);
    let start = steps - window;
    let w0 = &p.w_star + p.slowest_direction() * opts.offset;
    let mut curve = vec![0.0; steps];
    let (mut gf, mut m_hat, mut mq_hat) = (0.0, 0.0, 0.0);
    let mut gq_seed = Vec::new();
    let mut ex_seed = Vec::new();
    let mut paired = 0.0;
    for s in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(p.spec.seed.wrapping_mul(0x9E37).wrapping_add(s));
        let mut ctx = RoundingContext::new(p.spec.seed ^ (s << 20) ^ bits as u64, opts.mode);
        let (mut wf, mut wq) = (w0.clone(), w0.clone());
        let (mut sq, mut se) = (0.0, 0.0);
        for (k, slot) in curve.iter_mut().enumerate() {
            let idx = p.batch_indices(&mut rng);
            let g_f = p.batch_gradient(&wf, &idx);
            let g_q = p.batch_gradient(&wq, &idx);
            let ghat = quantize_gradient(&g_q, bits, &mut ctx)?;
            let gap_q = p.gap(&wq);
            *slot += gap_q;
            if k >= start {
                let gap_f = p.gap(&wf);
                let delta = &wq - &wf;
                let ex = 0.5 * delta.dot(&(&p.hessian * &delta));
                gf += gap_f;
                sq += gap_q;
                se += ex;
                paired += gap_q - gap_f;
                m_hat += (&g_q - p.full_gradient(&wq)).norm_squared();
                mq_hat += (&ghat - &g_q).norm_squared();
            }
            wf.axpy(-alpha, &g_f, 1.0);
            wq.axpy(-alpha, &ghat, 1.0);
        }
        gq_seed.push(sq / window as f64);
        ex_seed.push(se / window as f64);
    }
    let n = opts.seeds as f64;
    let total = n * window as f64;
    let mean_se = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        (m, (var / n).sqrt())
    };
    let (gap_fixed, gap_fixed_se) = mean_se(&gq_seed);
    let (excess, excess_se) = mean_se(&ex_seed);
    let (m_hat, m_q_hat) = (m_hat / total, mq_hat / total);
    let q = p.noise_spectrum_at_optimum();
    let gap_float_predicted = p
        .eigenvalues
        .iter()
        .zip(&q)
        .map(|(lam, qi)| alpha * qi / (2.0 * (2.0 - alpha * lam)))
        .sum();
    let excess_predicted = alpha * m_q_hat / (2.0 * d as f64) * p.eigenvalues.iter().map(|lam| 1.0 / (2.0 - alpha * lam)).sum::<f64>();
    curve.iter_mut().for_each(|g| *g /= n);
    let transient: Vec<f64> = curve.iter().map(|g| g - gap_fixed).collect();
    let contraction = log_slope(&transient, 20.0 * gap_fixed, 0.5 * curve[0]).map_or(f64::NAN, f64::exp);
    Ok(GapRow {
        bits,
        alpha,
        steps,
        seeds: opts.seeds,
        gap_float: gf / total,
        gap_fixed,
        gap_fixed_se,
        gap_float_predicted,
        excess_paired: paired / total,
        excess,
        excess_se,
        excess_predicted,
        m_hat,
        m_q_hat,
        bound: alpha * l * (m_hat + m_q_hat) / (2.0 * c),
        bound_q: alpha * l * m_q_hat / (2.0 * c),
        contraction,
        contraction_theory: 1.0 - alpha * c,
    })
}
