//! Central finite differences of the nearest-mode integer loss against the
//! integer backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::int::{self, BnRunning, Gradients};
use super::loss::{quantize_grad, softmax_cross_entropy};
use super::spec::{LayerSpec, ModelConfig};
use crate::error::Result;
use crate::numfmt::{inverse_map, map_to_fixed, FxpTensor, RoundingContext, RoundingMode};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub param: usize,
    pub index: usize,
    pub finite_difference: f64,
    pub analytic: f64,
    /// Composed rounding bound on `|finite_difference - analytic|`.
    pub bound: f64,
    pub tolerance: f64,
}

impl GradCheckRow {
    pub fn error(&self) -> f64 {
        (self.finite_difference - self.analytic).abs()
    }

    pub fn passed(&self) -> bool {
        self.error() <= self.tolerance
    }
}

/// A micro-model with its fixed batch.
#[derive(Debug, Clone)]
pub struct MicroModel {
    pub name: &'static str,
    pub cfg: ModelConfig,
    pub params: Vec<Vec<f32>>,
    pub x: Vec<f32>,
    pub labels: Vec<usize>,
}

fn nearest_cfg(layers: Vec<LayerSpec>, input: Vec<usize>, bits: u32, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::new(layers, input, bits, seed).expect("micro-model chains");
    cfg.forward_mode = RoundingMode::Nearest;
    cfg.backward_mode = RoundingMode::Nearest;
    cfg
}

/// One micro-model per layer type, each with about ten parameters.
pub fn micro_models(bits: u32, seed: u64) -> Vec<MicroModel> {
    use LayerSpec::*;
    let lin = |inp, out, bias| Linear { inp, out, bias };
    let models: Vec<(&'static str, Vec<LayerSpec>, Vec<usize>)> = vec![
        ("linear", vec![lin(3, 2, true)], vec![3]),
        (
            "conv",
            vec![Conv { inp: 1, out: 2, kernel: 2, stride: 1, pad: 0, bias: false }, Flatten],
            vec![1, 2, 2],
        ),
        ("batchnorm", vec![lin(2, 2, false), BatchNorm { channels: 2 }], vec![2]),
        ("layernorm", vec![lin(2, 3, false), LayerNorm { features: 3 }], vec![2]),
        ("relu", vec![lin(2, 2, true), Relu, lin(2, 2, false)], vec![2]),
        (
            "maxpool",
            vec![Conv { inp: 1, out: 2, kernel: 1, stride: 1, pad: 0, bias: false }, MaxPool { win: 2 }, Flatten, lin(2, 2, true)],
            vec![1, 2, 2],
        ),
        (
            "avgpool",
            vec![Conv { inp: 1, out: 2, kernel: 1, stride: 1, pad: 0, bias: false }, AvgPool { win: 2 }, Flatten, lin(2, 2, true)],
            vec![1, 2, 2],
        ),
        (
            "flatten",
            vec![Conv { inp: 1, out: 1, kernel: 2, stride: 1, pad: 0, bias: true }, Flatten, lin(4, 2, false)],
            vec![1, 3, 3],
        ),
        ("residual", vec![lin(2, 2, true), Residual(vec![lin(2, 2, false)])], vec![2]),
    ];
    models
        .into_iter()
        .enumerate()
        .map(|(i, (name, layers, input))| {
            let cfg = nearest_cfg(layers, input, bits, seed.wrapping_add(i as u64));
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let batch = 4;
            let per: usize = cfg.input_shape.iter().product();
            let classes: usize = cfg.output_shape().expect("chains").iter().product();
            let x = (0..batch * per).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
            let params = cfg
                .init_params()
                .into_iter()
                .map(|p| p.into_iter().map(|v| v + rng.random_range(-0.25f32..0.25)).collect())
                .collect();
            MicroModel { name, cfg, params, x, labels }
        })
        .collect()
}

struct Eval {
    loss: f64,
    weights: Vec<FxpTensor>,
    x: FxpTensor,
    grads: Gradients,
}

fn evaluate(cfg: &ModelConfig, params: &[Vec<f32>], x: &[f32], labels: &[usize]) -> Result<Eval> {
    let mut ctx = RoundingContext::nearest();
    let weights = cfg
        .params()
        .iter()
        .zip(params)
        .map(|(s, p)| map_to_fixed(p, &s.shape, cfg.bits, &mut ctx))
        .collect::<Result<Vec<_>>>()?;
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(&cfg.input_shape);
    let xq = map_to_fixed(x, &shape, cfg.bits, &mut ctx)?;
    let mut bn = BnRunning::for_config(cfg);
    let (y, tape) = int::forward(cfg, &weights, &mut bn, xq.clone(), true, &mut ctx)?;
    let classes = y.len() / labels.len();
    let out = softmax_cross_entropy(&inverse_map(&y)?, classes, labels)?;
    let g = quantize_grad(&out, classes, cfg.bits, &mut ctx)?;
    let grads = int::backward(cfg, &weights, &tape, g, &mut ctx)?;
    Ok(Eval {
        loss: out.loss,
        weights,
        x: xq,
        grads,
    })
}

fn l1(t: &FxpTensor) -> f64 {
    t.to_f64().iter().map(|v| v.abs()).sum()
}

/// Checks every parameter of `m` with step `h`. The bound for a parameter of
/// tensor `p` is `E/h + (S + 1) 2^-(k-1) max|dW_p|`, where `E` bounds the
/// forward loss error (every rounding site, including the weight and input
/// mappings, weighted by its gradient) and `S` counts backward rounding sites.
pub fn gradient_check(m: &MicroModel, h: f32) -> Result<Vec<GradCheckRow>> {
    let base = evaluate(&m.cfg, &m.params, &m.x, &m.labels)?;
    let mut forward_error = base.grads.forward_error + base.x.ulp() / 2.0 * l1(&base.grads.input);
    for (w, g) in base.weights.iter().zip(&base.grads.params) {
        forward_error += w.ulp() / 2.0 * l1(g);
    }
    let rel = 2f64.powi(-(m.cfg.bits as i32 - 1)) * (base.grads.backward_sites + 1) as f64;
    let mut rows = Vec::new();
    for (p, g) in base.grads.params.iter().enumerate() {
        let analytic = g.to_f64();
        let gmax = analytic.iter().fold(0f64, |a, v| a.max(v.abs()));
        let bound = forward_error / h as f64 + rel * gmax;
        for i in 0..analytic.len() {
            let mut plus = m.params.clone();
            let mut minus = m.params.clone();
            plus[p][i] += h;
            minus[p][i] -= h;
            let lp = evaluate(&m.cfg, &plus, &m.x, &m.labels)?.loss;
            let lm = evaluate(&m.cfg, &minus, &m.x, &m.labels)?.loss;
            rows.push(GradCheckRow {
                param: p,
                index: i,
                finite_difference: (lp - lm) / (2.0 * h as f64),
                analytic: analytic[i],
                bound,
                tolerance: (8.0 * bound).max(1e-2),
            });
        }
    }
    Ok(rows)
}
