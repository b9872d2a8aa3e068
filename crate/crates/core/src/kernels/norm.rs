//! Batch and layer normalization in integer arithmetic.
//!
//! For a group of `N` mantissas `x` at unit `u`, with `S1 = sum x` and
//! `S2 = sum x^2`, the exact integer `V = N S2 - S1^2` equals `N^2 var / u^2`.
//! Adding `eps N^2 / u^2` and taking the integer inverse square root gives
//! `r = u / (N sqrt(var + eps))`, so `(N x_i - S1) r` is the normalized value
//! without any division.

use super::add::aligned_sum;
use super::align::{common_unit, max_abs, shift_to};
use super::rsqrt::fxp_rsqrt;
use crate::error::{Error, Result};
use crate::numfmt::rounding::sticky_shift_right_signed;
use crate::numfmt::{renormalize_wide, FixedScalar, FxpTensor, RoundingContext};

/// Fractional bits carried by the variance before the inverse square root.
const VAR_FRAC_BITS: i32 = 40;
/// Width cap applied before multiplying by a 31-bit inverse square root.
const PRODUCT_BITS: i32 = 90;

pub fn default_eps() -> FixedScalar {
    FixedScalar::new(1, -10)
}

/// How elements map to statistics groups and affine parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormLayout {
    /// `[batch, channels, spatial...]`; statistics per channel over batch and space.
    Batch { channels: usize, spatial: usize, count: usize },
    /// `[rows, features]`; statistics per row over features.
    Layer { rows: usize, features: usize },
}

impl NormLayout {
    pub fn batch(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::shape("batchnorm", shape, &[0, 0]));
        }
        let spatial: usize = shape[2..].iter().product();
        Ok(NormLayout::Batch {
            channels: shape[1],
            spatial,
            count: shape[0] * spatial,
        })
    }

    pub fn layer(shape: &[usize]) -> Result<Self> {
        match shape {
            [.., f] if shape.len() >= 2 => Ok(NormLayout::Layer {
                rows: shape[..shape.len() - 1].iter().product(),
                features: *f,
            }),
            _ => Err(Error::shape("layernorm", shape, &[0, 0])),
        }
    }

    pub fn groups(&self) -> usize {
        match *self {
            NormLayout::Batch { channels, .. } => channels,
            NormLayout::Layer { rows, .. } => rows,
        }
    }

    pub fn affines(&self) -> usize {
        match *self {
            NormLayout::Batch { channels, .. } => channels,
            NormLayout::Layer { features, .. } => features,
        }
    }

    /// Elements per statistics group.
    pub fn count(&self) -> usize {
        match *self {
            NormLayout::Batch { count, .. } => count,
            NormLayout::Layer { features, .. } => features,
        }
    }

    #[inline]
    pub fn group(&self, i: usize) -> usize {
        match *self {
            NormLayout::Batch { channels, spatial, .. } => (i / spatial) % channels,
            NormLayout::Layer { features, .. } => i / features,
        }
    }

    #[inline]
    pub fn affine(&self, i: usize) -> usize {
        match *self {
            NormLayout::Batch { channels, spatial, .. } => (i / spatial) % channels,
            NormLayout::Layer { features, .. } => i % features,
        }
    }
}

/// Affine parameters and running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: FxpTensor,
    pub beta: FxpTensor,
    pub eps: FixedScalar,
    /// Float mirror used only in eval mode.
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
}

impl BatchNormParams {
    /// `gamma = 1`, `beta = 0`, running statistics at the identity.
    pub fn identity(channels: usize, bits: u32) -> Self {
        let mut ctx = RoundingContext::nearest();
        let gamma = crate::numfmt::map_to_fixed(&vec![1.0; channels], &[channels], bits, &mut ctx)
            .expect("finite constant");
        Self {
            gamma,
            beta: FxpTensor::zeros(&[channels], bits),
            eps: default_eps(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    /// Exponential moving average update from one batch's statistics, using
    /// the unbiased variance.
    pub fn update_running(&mut self, stats: &NormStats) {
        let n = stats.count as f64;
        let m = self.momentum as f64;
        for c in 0..self.running_mean.len() {
            let var = stats.var[c] * n / (n - 1.0);
            self.running_mean[c] = ((1.0 - m) * self.running_mean[c] as f64 + m * stats.mean[c]) as f32;
            self.running_var[c] = ((1.0 - m) * self.running_var[c] as f64 + m * var) as f32;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: FxpTensor,
    pub beta: FxpTensor,
    pub eps: FixedScalar,
}

/// Per-group statistics read off the integer sums.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Saved state for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    pub layout: NormLayout,
    pub shape: Vec<usize>,
    /// Normalized input, `(x - mean) / sqrt(var + eps)`, as used by the forward.
    pub xn: FxpTensor,
    /// Inverse square root per group, `rsqrt.0 * 2^rsqrt.1 = u / (N sqrt(var + eps))`.
    pub rsqrt: Vec<(u32, i32)>,
    /// Unit exponent of the forward input.
    pub x_unit: i32,
}

fn check_affine(gamma: &FxpTensor, beta: &FxpTensor, layout: &NormLayout) -> Result<()> {
    let want = [layout.affines()];
    if gamma.shape() != want {
        return Err(Error::shape("norm gamma", gamma.shape(), &want));
    }
    if beta.shape() != want {
        return Err(Error::shape("norm beta", beta.shape(), &want));
    }
    Ok(())
}

/// Shifts values right (sticky) so none is wider than `bits`; returns the
/// exponent adjustment.
fn fit_width(values: &mut [i128], bits: i32) -> i32 {
    let top = 128 - max_abs(values).leading_zeros() as i32;
    let excess = top - bits;
    if excess > 0 {
        for v in values.iter_mut() {
            *v = sticky_shift_right_signed(*v, excess as u32);
        }
        excess
    } else {
        0
    }
}

/// `gamma[a(i)] * xn[i] + beta[a(i)]`, rounded once.
fn affine(xn: &FxpTensor, gamma: &FxpTensor, beta: &FxpTensor, layout: &NormLayout, ctx: &mut RoundingContext) -> Result<FxpTensor> {
    let n = xn.len();
    let (gm, xm, bm) = (gamma.mantissas(), xn.mantissas(), beta.mantissas());
    let prod: Vec<i128> = (0..n).map(|i| gm[layout.affine(i)] as i128 * xm[i] as i128).collect();
    let shift: Vec<i128> = (0..n).map(|i| bm[layout.affine(i)] as i128).collect();
    let mut terms: Vec<(&[i128], i32)> = Vec::new();
    if let (Some(ug), Some(ux)) = (gamma.unit_exponent(), xn.unit_exponent()) {
        terms.push((&prod, ug + ux));
    }
    if let Some(ub) = beta.unit_exponent() {
        terms.push((&shift, ub));
    }
    let (sum, unit) = aligned_sum(&terms, n);
    let unit = unit.unwrap_or(0);
    renormalize_wide(&sum, |_| unit, xn.shape(), xn.bits(), ctx)
}

fn norm_forward(
    x: &FxpTensor,
    gamma: &FxpTensor,
    beta: &FxpTensor,
    eps: FixedScalar,
    layout: NormLayout,
    ctx: &mut RoundingContext,
) -> Result<(FxpTensor, NormCache, NormStats)> {
    check_affine(gamma, beta, &layout)?;
    let count = layout.count();
    if count < 2 {
        return Err(Error::DegenerateBatch(count));
    }
    if eps.mantissa <= 0 {
        return Err(Error::NonPositiveInput);
    }
    let groups = layout.groups();
    let ux = x.unit_exponent().unwrap_or(0);
    let xm = x.mantissas();
    let mut s1 = vec![0i64; groups];
    let mut s2 = vec![0i64; groups];
    for (i, &m) in xm.iter().enumerate() {
        let g = layout.group(i);
        s1[g] += m as i64;
        s2[g] += m as i64 * m as i64;
    }
    let n = count as i128;
    let inv_n = FixedScalar::reciprocal(count as u64);
    let inv_n2 = inv_n.mul(inv_n);
    let mut rsqrt = Vec::with_capacity(groups);
    let mut stats = NormStats {
        mean: Vec::with_capacity(groups),
        var: Vec::with_capacity(groups),
        count,
    };
    for g in 0..groups {
        let v = n * s2[g] as i128 - (s1[g] as i128).pow(2);
        debug_assert!(v >= 0);
        // V + eps N^2 / u^2, aligned to a common unit
        let eps_term = eps.mantissa as i128 * n * n;
        let eps_unit = eps.exponent - 2 * ux;
        let v_fixed = v << VAR_FRAC_BITS as u32;
        let unit = common_unit(&[(v_fixed as u128, -VAR_FRAC_BITS), (eps_term as u128, eps_unit)]).unwrap_or(0);
        let d = shift_to(v_fixed, -VAR_FRAC_BITS, unit) + shift_to(eps_term, eps_unit, unit);
        rsqrt.push(fxp_rsqrt(d.max(1), unit)?);
        stats.mean.push((s1[g] as i128 * inv_n.mantissa as i128) as f64 * 2f64.powi(inv_n.exponent + ux));
        stats.var.push((v * inv_n2.mantissa as i128) as f64 * 2f64.powi(inv_n2.exponent + 2 * ux));
    }
    let centered: Vec<i128> = xm
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let g = layout.group(i);
            (n * m as i128 - s1[g] as i128) * rsqrt[g].0 as i128
        })
        .collect();
    let xn = renormalize_wide(&centered, |i| rsqrt[layout.group(i)].1, x.shape(), x.bits(), ctx)?;
    let y = affine(&xn, gamma, beta, &layout, ctx)?;
    let cache = NormCache {
        layout,
        shape: x.shape().to_vec(),
        xn,
        rsqrt,
        x_unit: ux,
    };
    Ok((y, cache, stats))
}

/// Gradients of a normalization layer: `(dX, dGamma, dBeta)`.
fn norm_backward(
    gy: &FxpTensor,
    cache: &NormCache,
    gamma: &FxpTensor,
    ctx: &mut RoundingContext,
) -> Result<(FxpTensor, FxpTensor, FxpTensor)> {
    if gy.shape() != cache.shape.as_slice() {
        return Err(Error::CacheMismatch(format!(
            "gradient shape {:?} vs cached {:?}",
            gy.shape(),
            cache.shape
        )));
    }
    let layout = cache.layout;
    let bits = gy.bits();
    let affines = layout.affines();
    if gamma.shape() != [affines] {
        return Err(Error::CacheMismatch("gamma does not match the cached layout".into()));
    }
    let Some(ug) = gy.unit_exponent() else {
        return Ok((
            FxpTensor::zeros(&cache.shape, bits),
            FxpTensor::zeros(&[affines], bits),
            FxpTensor::zeros(&[affines], bits),
        ));
    };
    let (gm, xm) = (gy.mantissas(), cache.xn.mantissas());
    let uxn = cache.xn.unit_exponent();

    let mut dbeta = vec![0i128; affines];
    let mut dgamma = vec![0i128; affines];
    for (i, (&g, &x)) in gm.iter().zip(xm).enumerate() {
        let a = layout.affine(i);
        dbeta[a] += g as i128;
        dgamma[a] += g as i128 * x as i128;
    }
    let dbeta = renormalize_wide(&dbeta, |_| ug, &[affines], bits, ctx)?;
    let dgamma = match uxn {
        Some(u) => renormalize_wide(&dgamma, |_| ug + u, &[affines], bits, ctx)?,
        None => FxpTensor::zeros(&[affines], bits),
    };

    let Some(ugam) = gamma.unit_exponent() else {
        return Ok((FxpTensor::zeros(&cache.shape, bits), dgamma, dbeta));
    };
    let groups = layout.groups();
    let n = layout.count() as i128;
    let gamm = gamma.mantissas();
    // g_hat = gamma * g at unit ugh
    let ugh = ugam + ug;
    let ghat: Vec<i128> = gm.iter().enumerate().map(|(i, &g)| gamm[layout.affine(i)] as i128 * g as i128).collect();
    let mut sg = vec![0i128; groups];
    let mut sgx = vec![0i128; groups];
    for (i, &h) in ghat.iter().enumerate() {
        let g = layout.group(i);
        sg[g] += h;
        sgx[g] += h * xm[i] as i128;
    }
    // T = N g_hat - Sg - xn Sgx
    let first: Vec<i128> = ghat.iter().enumerate().map(|(i, &h)| n * h - sg[layout.group(i)]).collect();
    let (mut t, mut ut) = match uxn {
        Some(u) => {
            let second: Vec<i128> = xm.iter().enumerate().map(|(i, &x)| -(x as i128) * sgx[layout.group(i)]).collect();
            let (t, unit) = aligned_sum(&[(&first, ugh), (&second, ugh + 2 * u)], first.len());
            (t, unit.unwrap_or(ugh))
        }
        None => (first, ugh),
    };
    ut += fit_width(&mut t, PRODUCT_BITS);
    let scaled: Vec<i128> = t
        .iter()
        .enumerate()
        .map(|(i, &v)| v * cache.rsqrt[layout.group(i)].0 as i128)
        .collect();
    let dx = renormalize_wide(
        &scaled,
        |i| ut + cache.rsqrt[layout.group(i)].1 - cache.x_unit,
        &cache.shape,
        bits,
        ctx,
    )?;
    Ok((dx, dgamma, dbeta))
}

/// Training-mode batch normalization with batch statistics.
pub fn fxp_batchnorm_forward(
    x: &FxpTensor,
    p: &BatchNormParams,
    ctx: &mut RoundingContext,
) -> Result<(FxpTensor, NormCache, NormStats)> {
    norm_forward(x, &p.gamma, &p.beta, p.eps, NormLayout::batch(x.shape())?, ctx)
}

pub fn fxp_batchnorm_backward(
    gy: &FxpTensor,
    cache: &NormCache,
    p: &BatchNormParams,
    ctx: &mut RoundingContext,
) -> Result<(FxpTensor, FxpTensor, FxpTensor)> {
    if !matches!(cache.layout, NormLayout::Batch { .. }) {
        return Err(Error::CacheMismatch("layer-norm cache given to batch-norm backward".into()));
    }
    norm_backward(gy, cache, &p.gamma, ctx)
}

/// Eval-mode batch normalization from the running statistics: one fixed-point
/// scale and shift per channel.
pub fn fxp_batchnorm_eval(x: &FxpTensor, p: &BatchNormParams, ctx: &mut RoundingContext) -> Result<FxpTensor> {
    let layout = NormLayout::batch(x.shape())?;
    check_affine(&p.gamma, &p.beta, &layout)?;
    let (gamma, beta) = (p.gamma.to_f64(), p.beta.to_f64());
    let eps = p.eps.to_f64();
    let ux = x.unit_exponent().unwrap_or(0);
    let channels = layout.affines();
    let mut coef = Vec::with_capacity(channels);
    for c in 0..channels {
        let scale = gamma[c] / (p.running_var[c] as f64 + eps).sqrt();
        let shift = beta[c] - scale * p.running_mean[c] as f64;
        let (s, t) = (FixedScalar::from_f64(scale), FixedScalar::from_f64(shift));
        let unit = common_unit(&[(127 * s.mantissa.unsigned_abs() as u128, s.exponent + ux), (t.mantissa.unsigned_abs() as u128, t.exponent)])
            .unwrap_or(0);
        coef.push((s, t, unit));
    }
    let vals: Vec<i128> = x
        .mantissas()
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let (s, t, unit) = coef[layout.affine(i)];
            shift_to(s.mantissa as i128 * m as i128, s.exponent + ux, unit) + shift_to(t.mantissa as i128, t.exponent, unit)
        })
        .collect();
    renormalize_wide(&vals, |i| coef[layout.affine(i)].2, x.shape(), x.bits(), ctx)
}

pub fn fxp_layernorm_forward(
    x: &FxpTensor,
    p: &LayerNormParams,
    ctx: &mut RoundingContext,
) -> Result<(FxpTensor, NormCache, NormStats)> {
    norm_forward(x, &p.gamma, &p.beta, p.eps, NormLayout::layer(x.shape())?, ctx)
}

pub fn fxp_layernorm_backward(
    gy: &FxpTensor,
    cache: &NormCache,
    p: &LayerNormParams,
    ctx: &mut RoundingContext,
) -> Result<(FxpTensor, FxpTensor, FxpTensor)> {
    if !matches!(cache.layout, NormLayout::Layer { .. }) {
        return Err(Error::CacheMismatch("batch-norm cache given to layer-norm backward".into()));
    }
    norm_backward(gy, cache, &p.gamma, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numfmt::map_to_fixed;

    fn fx(v: &[f32], shape: &[usize], ctx: &mut RoundingContext) -> FxpTensor {
        map_to_fixed(v, shape, 8, ctx).unwrap()
    }

    fn lcg(seed: u64, n: usize, scale: f32) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let r = crate::numfmt::rounding::mix64(seed * 7_777 + i as u64);
                ((r >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) as f32 * scale
            })
            .collect()
    }

    fn bn_params(gamma: &[f32], beta: &[f32], eps: FixedScalar) -> BatchNormParams {
        let mut ctx = RoundingContext::nearest();
        let c = gamma.len();
        BatchNormParams {
            gamma: fx(gamma, &[c], &mut ctx),
            beta: fx(beta, &[c], &mut ctx),
            eps,
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum: 0.1,
        }
    }

    /// Float normalization of dequantized values over the given layout.
    fn float_stats(x: &[f64], layout: &NormLayout) -> (Vec<f64>, Vec<f64>) {
        let (g, n) = (layout.groups(), layout.count() as f64);
        let mut mean = vec![0.0; g];
        let mut var = vec![0.0; g];
        for (i, &v) in x.iter().enumerate() {
            mean[layout.group(i)] += v / n;
        }
        for (i, &v) in x.iter().enumerate() {
            var[layout.group(i)] += (v - mean[layout.group(i)]).powi(2) / n;
        }
        (mean, var)
    }

    /// Standard normalization backward using the cached normalized values.
    fn float_backward(g: &[f64], xn: &[f64], gamma: &[f64], var: &[f64], eps: f64, layout: &NormLayout) -> Vec<f64> {
        let n = layout.count() as f64;
        let groups = layout.groups();
        let mut sg = vec![0.0; groups];
        let mut sgx = vec![0.0; groups];
        for i in 0..g.len() {
            let gh = gamma[layout.affine(i)] * g[i];
            sg[layout.group(i)] += gh;
            sgx[layout.group(i)] += gh * xn[i];
        }
        (0..g.len())
            .map(|i| {
                let k = layout.group(i);
                let gh = gamma[layout.affine(i)] * g[i];
                (n * gh - sg[k] - xn[i] * sgx[k]) / (n * (var[k] + eps).sqrt())
            })
            .collect()
    }

    #[test]
    fn constant_channels_give_beta() {
        let mut ctx = RoundingContext::stochastic(3);
        let x = fx(&[0.75; 12], &[3, 2, 2], &mut ctx);
        let p = bn_params(&[1.0, 0.5], &[0.5, -0.25], default_eps());
        let (y, cache, stats) = fxp_batchnorm_forward(&x, &p, &mut ctx).unwrap();
        assert!(cache.xn.is_zero());
        let want: Vec<f64> = (0..12).map(|i| if (i / 2) % 2 == 0 { 0.5 } else { -0.25 }).collect();
        assert_eq!(y.to_f64(), want);
        assert!(stats.mean.iter().all(|m| (m - 0.75).abs() < 1e-6));
        assert_eq!(stats.var, vec![0.0, 0.0]);

        let mut lctx = RoundingContext::stochastic(4);
        let lp = LayerNormParams { gamma: p.gamma.clone(), beta: p.beta.clone(), eps: default_eps() };
        let xl = fx(&[-1.5; 6], &[3, 2], &mut lctx);
        let (yl, _, _) = fxp_layernorm_forward(&xl, &lp, &mut lctx).unwrap();
        assert_eq!(yl.to_f64(), vec![0.5, -0.25, 0.5, -0.25, 0.5, -0.25]);
    }

    #[test]
    fn plus_minus_one_normalizes_to_itself() {
        let mut ctx = RoundingContext::nearest();
        let x = fx(&[-1.0, 1.0, 1.0, -1.0], &[2, 2], &mut ctx);
        let p = bn_params(&[1.0, 1.0], &[0.0, 0.0], FixedScalar::new(1, -20));
        let (y, _, _) = fxp_batchnorm_forward(&x, &p, &mut ctx).unwrap();
        for (a, b) in y.to_f64().iter().zip([-1.0, 1.0, 1.0, -1.0]) {
            assert!((a - b).abs() <= y.ulp(), "{a} vs {b}");
        }
    }

    #[test]
    fn degenerate_and_mismatched_inputs() {
        let mut ctx = RoundingContext::nearest();
        let x = fx(&[1.0, 2.0], &[1, 2], &mut ctx);
        let p = bn_params(&[1.0, 1.0], &[0.0, 0.0], default_eps());
        assert!(matches!(fxp_batchnorm_forward(&x, &p, &mut ctx), Err(Error::DegenerateBatch(1))));
        let x = fx(&[1.0, 2.0, 3.0, 4.0], &[2, 2], &mut ctx);
        let (_, cache, _) = fxp_batchnorm_forward(&x, &p, &mut ctx).unwrap();
        let g = fx(&[1.0; 6], &[3, 2], &mut ctx);
        assert!(matches!(fxp_batchnorm_backward(&g, &cache, &p, &mut ctx), Err(Error::CacheMismatch(_))));
        let zero = FxpTensor::zeros(&[2, 2], 8);
        let (dx, dg, db) = fxp_batchnorm_backward(&zero, &cache, &p, &mut ctx).unwrap();
        assert!(dx.is_zero() && dg.is_zero() && db.is_zero());
    }

    fn check_forward(layout_of: fn(&[usize]) -> Result<NormLayout>, shape: &[usize], seed: u64) {
        let mut ctx = RoundingContext::nearest();
        let n: usize = shape.iter().product();
        let x = fx(&lcg(seed, n, 3.0), shape, &mut ctx);
        let layout = layout_of(shape).unwrap();
        let a = layout.affines();
        let gamma = fx(&lcg(seed + 1, a, 1.5), &[a], &mut ctx);
        let beta = fx(&lcg(seed + 2, a, 0.5), &[a], &mut ctx);
        let eps = default_eps();
        let (y, cache, stats) = norm_forward(&x, &gamma, &beta, eps, layout, &mut ctx).unwrap();
        let xf = x.to_f64();
        let (mean, var) = float_stats(&xf, &layout);
        for g in 0..layout.groups() {
            assert!((stats.mean[g] - mean[g]).abs() <= 1e-6 * mean[g].abs().max(1e-3));
            assert!((stats.var[g] - var[g]).abs() <= 1e-6 * var[g].max(1e-3));
        }
        let (gf, bf) = (gamma.to_f64(), beta.to_f64());
        let xn = cache.xn.to_f64();
        let max_g = gf.iter().fold(0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            let k = layout.group(i);
            let exact = (xf[i] - mean[k]) / (var[k] + eps.to_f64()).sqrt();
            assert!((xn[i] - exact).abs() <= cache.xn.ulp() / 2.0 + exact.abs() * 2f64.powi(-10), "xn {i}");
            let want = gf[layout.affine(i)] * exact + bf[layout.affine(i)];
            let bound = y.ulp() / 2.0 + max_g * (cache.xn.ulp() / 2.0 + exact.abs() * 2f64.powi(-10));
            assert!((y.to_f64()[i] - want).abs() <= bound, "y {i}");
        }
    }

    #[test]
    fn forward_matches_float_oracle() {
        check_forward(NormLayout::batch, &[8, 3, 2, 2], 1);
        check_forward(NormLayout::batch, &[16, 5], 2);
        check_forward(NormLayout::layer, &[4, 10], 3);
    }

    fn check_backward(layout_of: fn(&[usize]) -> Result<NormLayout>, shape: &[usize], seed: u64) {
        let mut ctx = RoundingContext::nearest();
        let n: usize = shape.iter().product();
        let x = fx(&lcg(seed, n, 2.0), shape, &mut ctx);
        let layout = layout_of(shape).unwrap();
        let a = layout.affines();
        let gamma = fx(&lcg(seed + 1, a, 1.5), &[a], &mut ctx);
        let beta = fx(&lcg(seed + 2, a, 0.5), &[a], &mut ctx);
        let eps = default_eps();
        let (_, cache, _) = norm_forward(&x, &gamma, &beta, eps, layout, &mut ctx).unwrap();
        let g = fx(&lcg(seed + 3, n, 0.1), shape, &mut ctx);
        let (dx, dgam, dbet) = norm_backward(&g, &cache, &gamma, &mut ctx).unwrap();
        let (gf, xn, gam) = (g.to_f64(), cache.xn.to_f64(), gamma.to_f64());
        let (_, var) = float_stats(&x.to_f64(), &layout);
        let want = float_backward(&gf, &xn, &gam, &var, eps.to_f64(), &layout);
        let scale = want.iter().fold(0f64, |m, v| m.max(v.abs()));
        for (i, (&d, &w)) in dx.to_f64().iter().zip(&want).enumerate() {
            assert!((d - w).abs() <= dx.ulp() / 2.0 + scale * 2f64.powi(-9), "dx {i}: {d} vs {w}");
        }
        let mut db = vec![0.0; a];
        let mut dg = vec![0.0; a];
        for i in 0..n {
            db[layout.affine(i)] += gf[i];
            dg[layout.affine(i)] += gf[i] * xn[i];
        }
        for j in 0..a {
            assert!((dbet.to_f64()[j] - db[j]).abs() <= dbet.ulp() / 2.0);
            assert!((dgam.to_f64()[j] - dg[j]).abs() <= dgam.ulp() / 2.0);
        }
    }

    #[test]
    fn backward_matches_float_oracle() {
        check_backward(NormLayout::batch, &[6, 1], 10);
        check_backward(NormLayout::batch, &[4, 3, 2, 2], 11);
        check_backward(NormLayout::layer, &[3, 12], 12);
    }

    #[test]
    fn mean_estimate_is_unbiased() {
        let xs = lcg(99, 32, 1.0);
        let layout = NormLayout::batch(&[16, 2]).unwrap();
        let want = float_stats(&xs.iter().map(|&v| v as f64).collect::<Vec<_>>(), &layout).0;
        let p = bn_params(&[1.0, 1.0], &[0.0, 0.0], default_eps());
        let seeds = 4000;
        let (mut s, mut s2) = (vec![0.0; 2], vec![0.0; 2]);
        for seed in 0..seeds {
            let mut ctx = RoundingContext::stochastic(seed);
            let x = fx(&xs, &[16, 2], &mut ctx);
            let (_, _, stats) = fxp_batchnorm_forward(&x, &p, &mut ctx).unwrap();
            for c in 0..2 {
                s[c] += stats.mean[c];
                s2[c] += stats.mean[c].powi(2);
            }
        }
        for c in 0..2 {
            let m = s[c] / seeds as f64;
            let sd = (s2[c] / seeds as f64 - m * m).sqrt() / (seeds as f64).sqrt();
            assert!((m - want[c]).abs() <= 4.0 * sd, "c={c} {m} vs {}", want[c]);
        }
    }

    #[test]
    fn input_gradient_is_unbiased_given_the_forward() {
        let shape = [8, 2];
        let layout = NormLayout::batch(&shape).unwrap();
        let mut ctx = RoundingContext::stochastic(5);
        let x = fx(&lcg(5, 16, 1.0), &shape, &mut ctx);
        let p = bn_params(&[0.8, 1.3], &[0.1, 0.0], default_eps());
        let (_, cache, _) = fxp_batchnorm_forward(&x, &p, &mut ctx).unwrap();
        let gs = lcg(6, 16, 0.05);
        // expected value: the exact integer formula on the float gradient
        let xn = cache.xn.to_f64();
        let gam = p.gamma.to_f64();
        let n = 8.0;
        let mut sg = [0.0; 2];
        let mut sgx = [0.0; 2];
        for i in 0..16 {
            let gh = gam[layout.affine(i)] * gs[i] as f64;
            sg[layout.group(i)] += gh;
            sgx[layout.group(i)] += gh * xn[i];
        }
        let want: Vec<f64> = (0..16)
            .map(|i| {
                let k = layout.group(i);
                let t = n * gam[layout.affine(i)] * gs[i] as f64 - sg[k] - xn[i] * sgx[k];
                let (r, er) = cache.rsqrt[k];
                t * r as f64 * 2f64.powi(er - cache.x_unit)
            })
            .collect();
        let seeds = 4000;
        let mut s = vec![0.0; 16];
        let mut s2 = vec![0.0; 16];
        for seed in 0..seeds {
            let mut c = RoundingContext::stochastic(1000 + seed);
            let g = fx(&gs, &shape, &mut c);
            let (dx, _, _) = fxp_batchnorm_backward(&g, &cache, &p, &mut c).unwrap();
            for (i, v) in dx.to_f64().into_iter().enumerate() {
                s[i] += v;
                s2[i] += v * v;
            }
        }
        for i in 0..16 {
            let m = s[i] / seeds as f64;
            let sd = ((s2[i] / seeds as f64 - m * m).max(0.0) / seeds as f64).sqrt();
            assert!((m - want[i]).abs() <= 4.0 * sd + 1e-9, "i={i} {m} vs {}", want[i]);
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut ctx = RoundingContext::nearest();
        let x = fx(&lcg(8, 12, 2.0), &[6, 2], &mut ctx);
        let mut p = bn_params(&[1.2, 0.7], &[0.3, -0.1], default_eps());
        p.running_mean = vec![0.25, -0.5];
        p.running_var = vec![2.0, 0.5];
        let y = fxp_batchnorm_eval(&x, &p, &mut ctx).unwrap();
        let (xf, g, b) = (x.to_f64(), p.gamma.to_f64(), p.beta.to_f64());
        for i in 0..12 {
            let c = i % 2;
            let want = g[c] * (xf[i] - p.running_mean[c] as f64) / (p.running_var[c] as f64 + p.eps.to_f64()).sqrt() + b[c];
            assert!((y.to_f64()[i] - want).abs() <= y.ulp() / 2.0 + 1e-6, "{i}");
        }
    }

    #[test]
    fn running_update_uses_unbiased_variance() {
        let mut p = BatchNormParams::identity(1, 8);
        p.momentum = 1.0;
        p.update_running(&NormStats { mean: vec![2.0], var: vec![3.0], count: 4 });
        assert_eq!(p.running_mean, vec![2.0]);
        assert_eq!(p.running_var, vec![4.0]);
    }
}
