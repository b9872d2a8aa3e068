//! The acceptance criteria, one function each. Every function runs its
//! experiment at the stated size and tolerance and reports pass/fail with a
//! one-line detail and a CSV table.

use std::time::{Duration, Instant};

use dfx_core::kernels::{fxp_batchnorm_forward, fxp_gemm, fxp_gemm_nt, BatchNormParams};
use dfx_core::nn::gradcheck::{gradient_check, micro_models};
use dfx_core::numfmt::{inverse_map, map_to_fixed, max_mantissa, unpack, FxpTensor, RoundingContext, RoundingMode};
use dfx_core::optim::{MasterTensor, OptState};
use dfx_core::report::{fmt_g, Cell, Csv};
use dfx_core::theory::quadratic::{gap_table_csv, RunOptions};
use dfx_core::theory::{
    gradient_variance_probe, rounding_bias_suite, theorem1_experiment, worked_example, ConvexProblemSpec, NoiseConstants,
    QuadraticProblem,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::error::Result;
use crate::train::{self, Status};

#[derive(Debug, Clone)]
pub struct Criterion {
    pub id: u32,
    pub title: &'static str,
    pub pass: bool,
    pub detail: String,
    pub csv: String,
    pub elapsed: Duration,
}

impl Criterion {
    pub fn line(&self) -> String {
        format!(
            "{} AC{} {}: {} ({:.1}s)",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn finish(id: u32, title: &'static str, start: Instant, limit: Option<Duration>, pass: bool, detail: String, csv: String) -> Criterion {
    let elapsed = start.elapsed();
    let (pass, detail) = match limit {
        Some(l) if elapsed > l => (false, format!("{detail}; runtime {:.1}s over {}s", elapsed.as_secs_f64(), l.as_secs())),
        _ => (pass, detail),
    };
    Criterion {
        id,
        title,
        pass,
        detail,
        csv,
        elapsed,
    }
}

const MINUTE: Duration = Duration::from_secs(60);

pub fn ac1_rounding_unbiased() -> Criterion {
    let start = Instant::now();
    let r = rounding_bias_suite(1000, 100_000, 1);
    let max_z = r.rows.iter().map(|row| row.z().abs()).fold(0.0, f64::max);
    finish(
        1,
        "stochastic rounding unbiasedness",
        start,
        Some(MINUTE),
        r.flagged() == 0,
        format!("{} mantissas x {} draws, {} beyond 4 sigma, max |z| = {:.2}", r.rows.len(), r.trials, r.flagged(), max_z),
        r.to_csv(),
    )
}

pub fn ac2_worked_example() -> Criterion {
    let start = Instant::now();
    let w = worked_example(1_000_000, 2);
    let z = (w.observed_up - w.expected_up) / w.sigma;
    let pass = w.lower == 0b010110 && w.upper == 0b010111 && w.strays == 0 && z.abs() <= 3.0;
    let mut c = Csv::new(&["lower", "upper", "expected_up", "observed_up", "sigma", "z", "strays"]);
    c.row(&[
        Cell::S(&format!("{:06b}", w.lower)),
        Cell::S(&format!("{:06b}", w.upper)),
        Cell::F(w.expected_up),
        Cell::F(w.observed_up),
        Cell::F(w.sigma),
        Cell::F(z),
        Cell::U(w.strays),
    ]);
    finish(
        2,
        "worked rounding example",
        start,
        None,
        pass,
        format!(
            "results {{0.{:06b}, 0.{:06b}}}, up-probability {:.6} vs {:.6} (z = {z:.2}), {} other results",
            w.lower,
            w.upper,
            w.observed_up,
            w.expected_up,
            w.strays
        ),
        c.into_string(),
    )
}

pub fn ac3_inverse_mapping_example() -> Criterion {
    let start = Instant::now();
    // 2^127 x (0.0101)_2 at k = 8: mantissa bit 6 carries 2^127.
    let t = FxpTensor::new(vec![1], 8, Some(127), vec![0b0010100]).expect("valid tensor");
    let f = inverse_map(&t).expect("finite")[0];
    let u = unpack(f).expect("finite");
    let pass = u.sign == 0 && u.exponent == 125 && u.mantissa24 == 0b1010 << 20 && f == 1.25 * 2f32.powi(125);
    let mut c = Csv::new(&["exponent", "mantissa24", "bits"]);
    c.row(&[Cell::I(u.exponent as i64), Cell::S(&format!("{:024b}", u.mantissa24)), Cell::S(&format!("{:08x}", f.to_bits()))]);
    finish(
        3,
        "inverse mapping example",
        start,
        None,
        pass,
        format!("2^{} x (1.{:023b})_2", u.exponent, u.mantissa24 & 0x7f_ffff),
        c.into_string(),
    )
}

fn random_fxp(rng: &mut ChaCha8Rng, shape: &[usize], bits: u32, zero: bool) -> FxpTensor {
    let n: usize = shape.iter().product();
    let lim = max_mantissa(bits);
    if zero {
        return FxpTensor::zeros(shape, bits);
    }
    let mut m: Vec<i8> = (0..n).map(|_| rng.random_range(-lim..=lim) as i8).collect();
    // keep the extremes in play
    let i = rng.random_range(0..n);
    m[i] = if rng.random_bool(0.5) { lim as i8 } else { -(lim as i8) };
    FxpTensor::new(shape.to_vec(), bits, Some(rng.random_range(-40..40)), m).expect("valid tensor")
}

fn reference_gemm(a: &FxpTensor, b: &FxpTensor, transpose_b: bool) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = if transpose_b { b.shape()[0] } else { b.shape()[1] };
    let (am, bm) = (a.mantissas(), b.mantissas());
    let scale = match (a.unit_exponent(), b.unit_exponent()) {
        (Some(x), Some(y)) => 2f64.powi(x + y),
        _ => 0.0,
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s: i64 = 0;
            for p in 0..k {
                let bv = if transpose_b { bm[j * k + p] } else { bm[p * n + j] };
                s += am[i * k + p] as i64 * bv as i64;
            }
            // |s| < 2^19, exact in f64
            out[i * n + j] = s as f64 * scale;
        }
    }
    out
}

pub fn ac4_gemm_oracle() -> Criterion {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut c = Csv::new(&["case", "m", "k", "n", "bits", "gemm_exact", "gemm_nt_exact"]);
    let mut failures = 0;
    for case in 0..200u64 {
        let (m, k, n) = (rng.random_range(1..=64), rng.random_range(1..=64), rng.random_range(1..=64));
        let bits = 4 + (case % 5) as u32;
        let a = random_fxp(&mut rng, &[m, k], bits, case % 50 == 7);
        let b = random_fxp(&mut rng, &[k, n], bits, case % 50 == 13);
        let bt = b.transpose().expect("rank 2");
        let want = reference_gemm(&a, &b, false);
        let got = fxp_gemm(&a, &b).map(|r| r.to_f64());
        let got_nt = fxp_gemm_nt(&a, &bt).map(|r| r.to_f64());
        let ok = got.as_ref().is_ok_and(|g| g.iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits()));
        let ok_nt = got_nt.as_ref().is_ok_and(|g| g.iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits()));
        failures += usize::from(!(ok && ok_nt));
        c.row(&[
            Cell::U(case),
            Cell::U(m as u64),
            Cell::U(k as u64),
            Cell::U(n as u64),
            Cell::U(bits as u64),
            Cell::B(ok),
            Cell::B(ok_nt),
        ]);
    }
    finish(
        4,
        "GEMM bit-exact oracle",
        start,
        Some(MINUTE),
        failures == 0,
        format!("200 shapes up to 64x64x64 at k = 4..8, {failures} mismatches"),
        c.into_string(),
    )
}

pub fn ac5_roundtrip() -> Criterion {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut grid_fail, mut bound_fail, mut checked, mut saturated) = (0u64, 0u64, 0u64, 0u64);
    let mut worst = 0f64;
    let tensors = 100_000u64;
    for i in 0..tensors {
        let bits = rng.random_range(4..=8u32);
        let n = rng.random_range(1..=32usize);
        // grid-exact: a normalized tensor survives float and back in both modes
        let t = random_fxp(&mut rng, &[n], bits, i % 1000 == 0);
        let f = inverse_map(&t).expect("finite");
        for mode in [RoundingMode::Nearest, RoundingMode::Stochastic] {
            let back = map_to_fixed(&f, &[n], bits, &mut RoundingContext::new(i, mode)).expect("finite");
            let again = inverse_map(&back).expect("finite");
            if back != t || again.iter().zip(&f).any(|(a, b)| a.to_bits() != b.to_bits()) {
                grid_fail += 1;
            }
        }
        // random floats over a wide dynamic range
        let e0 = rng.random_range(-60..60);
        let v: Vec<f32> = (0..n)
            .map(|_| {
                let mag = 2f64.powf(e0 as f64 - rng.random_range(0.0..30.0));
                let s = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
                if rng.random_bool(0.05) {
                    0.0
                } else {
                    (s * mag * rng.random_range(1.0..2.0)) as f32
                }
            })
            .collect();
        let q = map_to_fixed(&v, &[n], bits, &mut RoundingContext::nearest()).expect("finite");
        let Some(e_max) = q.exponent() else {
            if v.iter().any(|&x| x != 0.0) {
                bound_fail += 1;
            }
            continue;
        };
        let half_ulp = 2f64.powi(e_max - (bits as i32 - 1));
        let top = (max_mantissa(bits) as f64 + 0.5) * q.ulp();
        for (a, b) in v.iter().zip(q.to_f64()) {
            if (*a as f64).abs() >= top {
                saturated += 1;
                continue;
            }
            checked += 1;
            let err = (*a as f64 - b).abs();
            worst = worst.max(err / half_ulp);
            if err > half_ulp {
                bound_fail += 1;
            }
        }
    }
    let mut c = Csv::new(&["tensors", "grid_failures", "elements_checked", "saturated", "bound_failures", "worst_error_over_bound"]);
    c.row(&[
        Cell::U(tensors),
        Cell::U(grid_fail),
        Cell::U(checked),
        Cell::U(saturated),
        Cell::U(bound_fail),
        Cell::F(worst),
    ]);
    finish(
        5,
        "roundtrip and nearest error bound",
        start,
        None,
        grid_fail == 0 && bound_fail == 0,
        format!(
            "{tensors} tensors: {grid_fail} grid roundtrip failures; {checked} elements, {bound_fail} over 2^(e_max-(k-1)), worst {:.3} of the bound",
            worst
        ),
        c.into_string(),
    )
}

pub fn ac6_batchnorm_stats() -> Criterion {
    let start = Instant::now();
    const N: usize = 4096;
    const C: usize = 2;
    const SEEDS: u64 = 500;
    const BITS: u32 = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f32> = (0..N * C)
        .map(|i| (0.7 * rng.sample::<f64, _>(StandardNormal) + if i % C == 0 { 0.4 } else { -1.1 }) as f32)
        .collect();
    let params = BatchNormParams::identity(C, BITS);
    let (mut mu_s, mut mu_ss, mut dv_s, mut dv_ss) = (vec![0.0; C], vec![0.0; C], vec![0.0; C], vec![0.0; C]);
    let mut exact_mu = vec![0.0; C];
    let mut exact_var = vec![0.0; C];
    for c in 0..C {
        let vals: Vec<f64> = (0..N).map(|r| x[r * C + c] as f64).collect();
        exact_mu[c] = vals.iter().sum::<f64>() / N as f64;
        exact_var[c] = vals.iter().map(|v| (v - exact_mu[c]).powi(2)).sum::<f64>() / N as f64;
    }
    let mut ulp = 0.0;
    for s in 0..SEEDS {
        let mut ctx = RoundingContext::stochastic(s);
        let xq = map_to_fixed(&x, &[N, C], BITS, &mut ctx).expect("finite");
        ulp = xq.ulp();
        let (_, _, st) = fxp_batchnorm_forward(&xq, &params, &mut ctx).expect("batch norm");
        for c in 0..C {
            let dv = st.var[c] - exact_var[c];
            mu_s[c] += st.mean[c];
            mu_ss[c] += st.mean[c] * st.mean[c];
            dv_s[c] += dv;
            dv_ss[c] += dv * dv;
        }
    }
    // a stochastically rounded element has variance p(1-p) ulp^2 <= ulp^2/4, and
    // E[var(X^)] - var(X) = (N-1)/N^2 sum_i v_i
    let bound = ulp * ulp / 4.0 * (N as f64 - 1.0) / N as f64;
    let n = SEEDS as f64;
    let mut pass = true;
    let mut c_csv = Csv::new(&["channel", "mu", "mean_mu_hat", "mu_se", "z", "mean_var_excess", "var_excess_se", "bound"]);
    let mut worst_z: f64 = 0.0;
    for c in 0..C {
        let m = mu_s[c] / n;
        let se = ((mu_ss[c] / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt();
        let z = (m - exact_mu[c]) / se;
        let dv = dv_s[c] / n;
        let dv_se = ((dv_ss[c] / n - dv * dv).max(0.0) * n / (n - 1.0) / n).sqrt();
        worst_z = worst_z.max(z.abs());
        pass &= z.abs() <= 4.0 && (0.0..=bound).contains(&dv);
        c_csv.row(&[
            Cell::U(c as u64),
            Cell::F(exact_mu[c]),
            Cell::F(m),
            Cell::F(se),
            Cell::F(z),
            Cell::F(dv),
            Cell::F(dv_se),
            Cell::F(bound),
        ]);
    }
    let excess: Vec<String> = (0..C).map(|c| fmt_g(dv_s[c] / n)).collect();
    finish(
        6,
        "batch-norm statistics",
        start,
        None,
        pass,
        format!(
            "{SEEDS} seeds, batch {N}x{C}: max |z| of mean = {worst_z:.2}; variance excess [{}] in [0, {}]",
            excess.join(", "),
            fmt_g(bound)
        ),
        c_csv.into_string(),
    )
}

/// Exact per-element variance `p (1 - p) ulp^2` of stochastic mapping.
fn bernoulli_variances(v: &[f32], shape: &[usize]) -> Vec<f64> {
    let t = map_to_fixed(v, shape, 8, &mut RoundingContext::new(0, RoundingMode::Stochastic)).expect("map");
    let ulp = t.ulp();
    v.iter()
        .map(|&x| {
            let p = (x.abs() as f64 / ulp).fract();
            p * (1.0 - p) * ulp * ulp
        })
        .collect()
}

/// Bound over exact variance of each element of `X^T G`, with the bound's
/// rounding variances taken from the same exact values.
fn exact_bound_ratios(x: &[f32], g: &[f32]) -> Vec<f64> {
    let (vx, vg) = (bernoulli_variances(x, &[8, 8]), bernoulli_variances(g, &[8, 8]));
    let (mx, mg) = (vx.iter().copied().fold(0.0, f64::max), vg.iter().copied().fold(0.0, f64::max));
    (0..64)
        .map(|e| {
            let (i, j) = (e / 8, e % 8);
            let (mut var, mut xn, mut gn) = (0.0, 0.0, 0.0);
            for k in 0..8 {
                let (a, b) = (x[k * 8 + i] as f64, g[k * 8 + j] as f64);
                let (va, vb) = (vx[k * 8 + i], vg[k * 8 + j]);
                var += va * b * b + a * a * vb + va * vb;
                xn += a * a;
                gn += b * b;
            }
            (mx * gn + mg * xn + 8.0 * mx * mg) / var
        })
        .collect()
}

pub fn ac7_variance_probe() -> Criterion {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut csv = String::new();
    let (mut violations, mut elements) = (0usize, 0usize);
    let mut tightest = f64::INFINITY;
    let (mut exact_violations, mut exact_tightest) = (0usize, f64::INFINITY);
    for inst in 0..20 {
        let sx = 2f64.powf(rng.random_range(-3.0..3.0));
        let sg = 2f64.powf(rng.random_range(-12.0..-2.0));
        let x: Vec<f32> = (0..64).map(|_| (sx * rng.sample::<f64, _>(StandardNormal)) as f32).collect();
        let g: Vec<f32> = (0..64).map(|_| (sg * rng.sample::<f64, _>(StandardNormal)) as f32).collect();
        let stats = gradient_variance_probe(&x, &g, (8, 8, 8), 8, 1000, RoundingMode::Stochastic).expect("probe");
        for r in exact_bound_ratios(&x, &g) {
            exact_violations += usize::from(r < 1.0);
            exact_tightest = exact_tightest.min(r);
        }
        for e in 0..64 {
            elements += 1;
            violations += usize::from(!stats.holds(e));
            tightest = tightest.min(stats.bound(e) / stats.variance[e].max(f64::MIN_POSITIVE));
        }
        let table = stats.to_csv();
        if inst == 0 {
            csv.push_str("instance,");
            csv.push_str(table.lines().next().unwrap_or(""));
            csv.push('\n');
        }
        for line in table.lines().skip(1) {
            csv.push_str(&format!("{inst},{line}\n"));
        }
    }
    finish(
        7,
        "gradient variance bound",
        start,
        Some(5 * MINUTE),
        violations == 0,
        format!(
            "20 instances of 8x8x8, 1000 seeds: {violations} of {elements} elements violate, smallest bound/variance = {tightest:.2}; \
             with exact rounding variances {exact_violations} violate, smallest {exact_tightest:.3}"
        ),
        csv,
    )
}

/// The quadratic testbed, noise constants and gap table used by the
/// convergence criterion.
pub fn theorem1_rows() -> Result<(QuadraticProblem, NoiseConstants, Vec<dfx_core::theory::GapRow>)> {
    let p = QuadraticProblem::new(ConvexProblemSpec::default())?;
    let consts = NoiseConstants::measure(&p, 8, 500, 8)?;
    let a0 = consts.lr_limit(p.spec.l);
    let rows = theorem1_experiment(&p, &[a0, a0 / 2.0, a0 / 4.0], &[8], &consts, RunOptions::default())?;
    Ok((p, consts, rows))
}

pub fn ac8_theorem1() -> Criterion {
    let start = Instant::now();
    let (p, consts, rows) = match theorem1_rows() {
        Ok(r) => r,
        Err(e) => return finish(8, "quadratic convergence testbed", start, None, false, e.to_string(), String::new()),
    };
    let bound_ok = rows.iter().all(|r| r.bound_holds());
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[0].gap_fixed / w[1].gap_fixed).collect();
    let ratio_ok = ratios.iter().all(|r| (1.6..=2.4).contains(r));
    let contraction_ok = rows.iter().all(|r| r.contraction_error() <= 0.15);
    let worst_c = rows.iter().map(|r| r.contraction_error()).fold(0.0, f64::max);
    let worst_b = rows.iter().map(|r| r.gap_fixed / r.bound).fold(0.0, f64::max);
    let ratio_s: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    finish(
        8,
        "quadratic convergence testbed",
        start,
        Some(10 * MINUTE),
        bound_ok && ratio_ok && contraction_ok,
        format!(
            "d={}, c={}, L={}, M_G={:.3}, M^q_G={:.2e}: (a) gap/bound <= {:.3}; (b) ratios [{}]; (c) contraction error <= {:.2}%",
            p.dim(),
            p.spec.c,
            p.spec.l,
            consts.m_g(),
            consts.m_q_g(),
            worst_b,
            ratio_s.join(", "),
            100.0 * worst_c
        ),
        gap_table_csv(&rows),
    )
}

pub fn ac9_sgd_unbiased() -> Criterion {
    let start = Instant::now();
    const N: usize = 64;
    const SEEDS: u64 = 10_000;
    let (lr, momentum, wd) = (0.1, 0.9, 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut normal = |s: f64| -> Vec<f32> { (0..N).map(|_| (s * rng.sample::<f64, _>(StandardNormal)) as f32).collect() };
    let (w0, v0, g) = (normal(0.1), normal(0.02), normal(0.05));
    let mut nearest = RoundingContext::nearest();
    let master = MasterTensor::from_f32(&w0, &[N], &mut nearest).expect("finite");
    let velocity = MasterTensor::from_f32(&v0, &[N], &mut nearest).expect("finite");
    let mut opt = OptState::new(vec![(master, true)], lr, momentum, wd);
    opt.params[0].velocity = velocity;
    // float update from the same starting point
    let (w, v) = (opt.params[0].master.to_f64(), opt.params[0].velocity.to_f64());
    let want: Vec<f64> = (0..N)
        .map(|i| {
            let v1 = momentum * v[i] + g[i] as f64 + wd * w[i];
            w[i] - lr * v1
        })
        .collect();
    let (mut s1, mut s2) = (vec![0.0; N], vec![0.0; N]);
    for s in 0..SEEDS {
        let mut ctx = RoundingContext::stochastic(s);
        let gq = map_to_fixed(&g, &[N], 8, &mut ctx).expect("finite");
        let mut o = opt.clone();
        o.sgd_step(&[gq], &mut ctx).expect("step");
        for (i, w1) in o.params[0].master.to_f64().into_iter().enumerate() {
            s1[i] += w1;
            s2[i] += w1 * w1;
        }
    }
    let n = SEEDS as f64;
    let mut c = Csv::new(&["element", "float_update", "mean_int_update", "se", "z"]);
    let (mut worst, mut fails) = (0f64, 0);
    for i in 0..N {
        let m = s1[i] / n;
        let se = ((s2[i] / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt();
        let z = if se > 0.0 { (m - want[i]) / se } else if m == want[i] { 0.0 } else { f64::INFINITY };
        worst = worst.max(z.abs());
        fails += usize::from(z.abs() > 4.0);
        c.row(&[Cell::U(i as u64), Cell::F(want[i]), Cell::F(m), Cell::F(se), Cell::F(z)]);
    }
    finish(
        9,
        "integer SGD unbiasedness",
        start,
        None,
        fails == 0,
        format!("{SEEDS} seeds, momentum {momentum}, weight decay {wd}: {fails} of {N} elements beyond 4 sigma, max |z| = {worst:.2}"),
        c.into_string(),
    )
}

/// Synthetic MNIST-sized problem shared by the paired-training and ablation
/// criteria.
pub fn training_config() -> RunConfig {
    RunConfig {
        epochs: 5,
        batch_size: 64,
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 1e-4,
        synthetic_train: 6000,
        synthetic_test: 2000,
        synthetic_margin: 3.0,
        synthetic_noise: 1.0,
        seed: 10,
        checkpoint: false,
        ..RunConfig::default()
    }
}

pub fn ac10_paired_training(out: &std::path::Path) -> Criterion {
    let start = Instant::now();
    let mut cfg = training_config();
    cfg.output_dir = out.to_path_buf();
    let report = match train::cmd_train(&cfg, true, |_, _| {}) {
        Ok(r) => r,
        Err(e) => return finish(10, "paired training", start, Some(30 * MINUTE), false, e.to_string(), String::new()),
    };
    let float = report.float.as_ref().expect("paired run");
    let (fi, ff) = (&report.int.epochs, &float.epochs);
    if report.int.status.is_diverged() || float.status.is_diverged() || fi.len() != ff.len() || fi.is_empty() {
        return finish(
            10,
            "paired training",
            start,
            Some(30 * MINUTE),
            false,
            format!("int {} {}, float {} {}", report.int.status.name(), report.int.status.reason(), float.status.name(), float.status.reason()),
            train::epochs_csv(&report),
        );
    }
    let gap = 100.0 * (report.int.final_test_accuracy() - float.final_test_accuracy());
    let diff = fi.iter().zip(ff).map(|(a, b)| (a.train_loss - b.train_loss).abs()).sum::<f64>() / fi.len() as f64;
    let losses: Vec<f64> = ff.iter().map(|e| e.train_loss).collect();
    let range = losses.iter().cloned().fold(f64::MIN, f64::max) - losses.iter().cloned().fold(f64::MAX, f64::min);
    let pass = gap.abs() <= 1.0 && diff <= 0.05 * range;
    finish(
        10,
        "paired training",
        start,
        Some(30 * MINUTE),
        pass,
        format!(
            "test accuracy int8 {:.2}% vs float {:.2}% (gap {gap:+.2} pts); mean epoch loss gap {} = {:.2}% of float range {}",
            100.0 * report.int.final_test_accuracy(),
            100.0 * float.final_test_accuracy(),
            fmt_g(diff),
            100.0 * diff / range,
            fmt_g(range)
        ),
        train::epochs_csv(&report),
    )
}

pub fn ac11_ablation(out: &std::path::Path) -> Criterion {
    let start = Instant::now();
    let mut cfg = training_config();
    cfg.output_dir = out.to_path_buf();
    let rows = match train::cmd_ablate(&cfg, &[8, 7, 6, 5, 4], |_, _| {}) {
        Ok(r) => r,
        Err(e) => return finish(11, "bit-width ablation", start, None, false, e.to_string(), String::new()),
    };
    let acc = |b: u32| rows.iter().find(|r| r.bits == b).map_or(f64::NAN, |r| 100.0 * r.final_test_accuracy);
    let status = |b: u32| rows.iter().find(|r| r.bits == b).map(|r| r.status.clone());
    let top = [8, 7, 6].map(acc);
    let spread = top.iter().cloned().fold(f64::MIN, f64::max) - top.iter().cloned().fold(f64::MAX, f64::min);
    let stable = [8, 7, 6].iter().all(|&b| status(b) == Some(Status::Converged));
    let drop5 = acc(8) - acc(5);
    let diverged4 = status(4).is_some_and(|s| s.is_diverged());
    let pass = stable && spread <= 1.5 && drop5 > 2.0 && diverged4;
    finish(
        11,
        "bit-width ablation",
        start,
        None,
        pass,
        format!(
            "int8/7/6 = {:.2}/{:.2}/{:.2}% (spread {spread:.2} pts); int5 = {:.2}% ({drop5:+.2} pts below int8, status {}); int4 {}",
            top[0],
            top[1],
            top[2],
            acc(5),
            status(5).map_or("missing", |s| s.name()),
            status(4).map_or("missing".to_string(), |s| format!("{} {}", s.name(), s.reason()))
        ),
        train::ablation_csv(&rows),
    )
}

pub fn ac12_gradient_check() -> Criterion {
    let start = Instant::now();
    let mut c = Csv::new(&["model", "param", "index", "analytic", "finite_difference", "bound", "tolerance", "pass"]);
    let (mut total, mut fails) = (0, 0);
    let mut names = Vec::new();
    for m in micro_models(8, 12) {
        names.push(m.name);
        match gradient_check(&m, 0.05) {
            Ok(rows) => {
                for r in rows {
                    total += 1;
                    fails += usize::from(!r.passed());
                    c.row(&[
                        Cell::S(m.name),
                        Cell::U(r.param as u64),
                        Cell::U(r.index as u64),
                        Cell::F(r.analytic),
                        Cell::F(r.finite_difference),
                        Cell::F(r.bound),
                        Cell::F(r.tolerance),
                        Cell::B(r.passed()),
                    ]);
                }
            }
            Err(e) => {
                fails += 1;
                eprintln!("gradient check of {} failed: {e}", m.name);
                c.row(&[Cell::S(m.name), Cell::U(0), Cell::U(0), Cell::F(f64::NAN), Cell::F(f64::NAN), Cell::F(f64::NAN), Cell::F(f64::NAN), Cell::B(false)]);
            }
        }
    }
    finish(
        12,
        "gradient finite-difference check",
        start,
        Some(2 * MINUTE),
        fails == 0 && total > 0,
        format!("{} micro-models ({}), {fails} of {total} checked entries outside tolerance", names.len(), names.join(", ")),
        c.into_string(),
    )
}
