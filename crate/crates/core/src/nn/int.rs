//! Integer forward and backward passes with a tape of cached activations.

use super::spec::{LayerSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::kernels::add::aligned_sum;
use crate::kernels::{
    fxp_add, fxp_avgpool, fxp_avgpool_backward, fxp_batchnorm_backward, fxp_batchnorm_eval, fxp_batchnorm_forward,
    fxp_conv2d_backward_input, fxp_conv2d_backward_weight, fxp_conv2d_cols, fxp_gemm, fxp_gemm_nt, fxp_gemm_tiled,
    fxp_layernorm_backward, fxp_layernorm_forward, fxp_maxpool, fxp_maxpool_backward, fxp_relu, fxp_relu_backward, im2col,
    AccTensor, BatchNormParams, ConvGeometry, LayerNormParams, NormCache, NormStats,
};
use crate::kernels::norm::default_eps;
use crate::numfmt::{renormalize_wide, FxpTensor, RoundingContext};

/// Running statistics of one batch-norm layer (float mirror).
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    pub fn for_config(cfg: &ModelConfig) -> Vec<Self> {
        cfg.batchnorm_channels().into_iter().map(Self::new).collect()
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Linear { w: usize, b: Option<usize>, x: FxpTensor },
    Conv { w: usize, b: Option<usize>, geo: ConvGeometry, cols: FxpTensor },
    BatchNorm { gamma: usize, cache: NormCache },
    /// Eval-mode batch norm; no backward.
    BatchNormEval,
    LayerNorm { gamma: usize, cache: NormCache },
    Relu { y: FxpTensor },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    AvgPool { win: usize, in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
    Residual { body: Tape },
}

#[derive(Debug, Clone)]
pub struct TapeNode {
    pub op: Op,
    /// Spacing of the output grid when the node rounds its output, else 0.
    pub out_ulp: f64,
    /// Extra rounding of normalized values, already scaled by `max |gamma|`.
    pub inner_ulp: f64,
}

/// Nodes in execution order; backward walks them in reverse.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    pub nodes: Vec<TapeNode>,
    pub bn_stats: Vec<NormStats>,
}

/// Everything the backward pass produces.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<FxpTensor>,
    pub input: FxpTensor,
    /// First-order bound on how far the forward loss is from exact arithmetic:
    /// `sum over rounding sites of ulp/2 * |dL/d(site)|_1`.
    pub forward_error: f64,
    pub backward_sites: usize,
}

fn rows_of(shape: &[usize]) -> usize {
    shape[0]
}

/// Adds a per-channel bias to an accumulator and rounds once.
fn finish(
    acc: AccTensor,
    bias: Option<&FxpTensor>,
    channel: impl Fn(usize) -> usize,
    bits: u32,
    ctx: &mut RoundingContext,
) -> Result<FxpTensor> {
    let bias = bias.filter(|b| !b.is_zero());
    let Some(b) = bias else {
        return acc.renormalize(bits, ctx);
    };
    let av: Vec<i128> = acc.values.iter().map(|&v| v as i128).collect();
    let bm = b.mantissas();
    let bv: Vec<i128> = (0..av.len()).map(|i| bm[channel(i)] as i128).collect();
    let (sum, unit) = aligned_sum(&[(&av, acc.scale_exponent), (&bv, b.unit_exponent().unwrap_or(0))], av.len());
    let unit = unit.unwrap_or(0);
    renormalize_wide(&sum, |_| unit, &acc.shape, bits, ctx)
}

fn channel_sums(g: &FxpTensor, channels: usize, channel: impl Fn(usize) -> usize, ctx: &mut RoundingContext) -> Result<FxpTensor> {
    let mut sums = vec![0i128; channels];
    for (i, &m) in g.mantissas().iter().enumerate() {
        sums[channel(i)] += m as i128;
    }
    let u = g.unit_exponent().unwrap_or(0);
    renormalize_wide(&sums, |_| u, &[channels], g.bits(), ctx)
}

struct Cursor<'a> {
    weights: &'a [FxpTensor],
    bn: &'a mut [BnRunning],
    param: usize,
    bn_idx: usize,
    train: bool,
    bits: u32,
}

/// Integer forward pass. `x` is the mapped input batch `[batch, ...]`. In
/// training mode batch norm uses batch statistics and updates `bn`.
pub fn forward(
    cfg: &ModelConfig,
    weights: &[FxpTensor],
    bn: &mut [BnRunning],
    x: FxpTensor,
    train: bool,
    ctx: &mut RoundingContext,
) -> Result<(FxpTensor, Tape)> {
    let mut cur = Cursor {
        weights,
        bn,
        param: 0,
        bn_idx: 0,
        train,
        bits: cfg.bits,
    };
    let mut tape = Tape::default();
    let y = run(&cfg.layers, x, &mut cur, &mut tape, ctx)?;
    Ok((y, tape))
}

fn run(layers: &[LayerSpec], mut x: FxpTensor, cur: &mut Cursor, tape: &mut Tape, ctx: &mut RoundingContext) -> Result<FxpTensor> {
    for layer in layers {
        let (y, op, inner_ulp) = match *layer {
            LayerSpec::Linear { out, bias, .. } => {
                let w = cur.param;
                let b = bias.then_some(w + 1);
                cur.param += 1 + bias as usize;
                let acc = fxp_gemm_nt(&x, &cur.weights[w])?;
                let y = finish(acc, b.map(|b| &cur.weights[b]), |i| i % out, cur.bits, ctx)?;
                (y, Op::Linear { w, b, x }, 0.0)
            }
            LayerSpec::Conv { out, stride, pad, bias, .. } => {
                let w = cur.param;
                let b = bias.then_some(w + 1);
                cur.param += 1 + bias as usize;
                let geo = ConvGeometry::new(x.shape(), cur.weights[w].shape(), stride, pad)?;
                let cols = im2col(&x, &geo);
                let acc = fxp_conv2d_cols(&cols, &cur.weights[w], &geo)?;
                let hw = geo.oh * geo.ow;
                let y = finish(acc, b.map(|b| &cur.weights[b]), |i| (i / hw) % out, cur.bits, ctx)?;
                (y, Op::Conv { w, b, geo, cols }, 0.0)
            }
            LayerSpec::BatchNorm { .. } => {
                let g = cur.param;
                cur.param += 2;
                let run = &mut cur.bn[cur.bn_idx];
                cur.bn_idx += 1;
                let mut p = BatchNormParams {
                    gamma: cur.weights[g].clone(),
                    beta: cur.weights[g + 1].clone(),
                    eps: default_eps(),
                    running_mean: run.mean.clone(),
                    running_var: run.var.clone(),
                    momentum: run.momentum,
                };
                if cur.train {
                    let (y, cache, stats) = fxp_batchnorm_forward(&x, &p, ctx)?;
                    p.update_running(&stats);
                    run.mean = p.running_mean;
                    run.var = p.running_var;
                    tape.bn_stats.push(stats);
                    let inner = cache.xn.ulp() * max_abs_f64(&cur.weights[g]);
                    (y, Op::BatchNorm { gamma: g, cache }, inner)
                } else {
                    (fxp_batchnorm_eval(&x, &p, ctx)?, Op::BatchNormEval, 0.0)
                }
            }
            LayerSpec::LayerNorm { .. } => {
                let g = cur.param;
                cur.param += 2;
                let p = LayerNormParams {
                    gamma: cur.weights[g].clone(),
                    beta: cur.weights[g + 1].clone(),
                    eps: default_eps(),
                };
                let (y, cache, _) = fxp_layernorm_forward(&x, &p, ctx)?;
                let inner = cache.xn.ulp() * max_abs_f64(&cur.weights[g]);
                (y, Op::LayerNorm { gamma: g, cache }, inner)
            }
            LayerSpec::Relu => {
                let y = fxp_relu(&x);
                (y.clone(), Op::Relu { y }, 0.0)
            }
            LayerSpec::MaxPool { win } => {
                let (y, argmax) = fxp_maxpool(&x, win)?;
                (y, Op::MaxPool { argmax, in_shape: x.shape().to_vec() }, 0.0)
            }
            LayerSpec::AvgPool { win } => {
                let y = fxp_avgpool(&x, win, ctx)?;
                (y, Op::AvgPool { win, in_shape: x.shape().to_vec() }, 0.0)
            }
            LayerSpec::Flatten => {
                let in_shape = x.shape().to_vec();
                let b = rows_of(&in_shape);
                let y = x.reshape(vec![b, in_shape[1..].iter().product()])?;
                (y, Op::Flatten { in_shape }, 0.0)
            }
            LayerSpec::Residual(ref body) => {
                let mut sub = Tape::default();
                let fx = run(body, x.clone(), cur, &mut sub, ctx)?;
                tape.bn_stats.append(&mut sub.bn_stats);
                (fxp_add(&x, &fx, ctx)?, Op::Residual { body: sub }, 0.0)
            }
        };
        let rounds = !matches!(op, Op::Relu { .. } | Op::MaxPool { .. } | Op::Flatten { .. });
        tape.nodes.push(TapeNode {
            op,
            out_ulp: if rounds { y.ulp() } else { 0.0 },
            inner_ulp,
        });
        x = y;
    }
    Ok(x)
}

fn max_abs_f64(t: &FxpTensor) -> f64 {
    t.to_f64().iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn l1(t: &FxpTensor) -> f64 {
    t.to_f64().iter().map(|v| v.abs()).sum()
}

/// Integer backward pass from the loss gradient `g` of the network output.
pub fn backward(cfg: &ModelConfig, weights: &[FxpTensor], tape: &Tape, g: FxpTensor, ctx: &mut RoundingContext) -> Result<Gradients> {
    let specs = cfg.params();
    let mut grads: Vec<Option<FxpTensor>> = vec![None; specs.len()];
    let mut report = (0.0, 0usize);
    let input = back(tape, weights, g, &mut grads, &mut report, ctx)?;
    let params = grads
        .into_iter()
        .zip(&specs)
        .map(|(g, s)| g.unwrap_or_else(|| FxpTensor::zeros(&s.shape, cfg.bits)))
        .collect();
    Ok(Gradients {
        params,
        input,
        forward_error: report.0,
        backward_sites: report.1,
    })
}

fn back(
    tape: &Tape,
    weights: &[FxpTensor],
    mut g: FxpTensor,
    grads: &mut [Option<FxpTensor>],
    report: &mut (f64, usize),
    ctx: &mut RoundingContext,
) -> Result<FxpTensor> {
    for node in tape.nodes.iter().rev() {
        if node.out_ulp > 0.0 || node.inner_ulp > 0.0 {
            report.0 += (node.out_ulp + node.inner_ulp) / 2.0 * l1(&g);
        }
        let bits = g.bits();
        g = match &node.op {
            Op::Linear { w, b, x } => {
                let out = g.shape()[1];
                grads[*w] = Some(fxp_gemm_tiled(&g.transpose()?, x, bits, ctx)?);
                if let Some(b) = b {
                    grads[*b] = Some(channel_sums(&g, out, |i| i % out, ctx)?);
                }
                report.1 += 1;
                fxp_gemm(&g, &weights[*w])?.renormalize(bits, ctx)?
            }
            Op::Conv { w, b, geo, cols } => {
                grads[*w] = Some(fxp_conv2d_backward_weight(&g, cols, geo, bits, ctx)?);
                if let Some(b) = b {
                    let hw = geo.oh * geo.ow;
                    grads[*b] = Some(channel_sums(&g, geo.o, |i| (i / hw) % geo.o, ctx)?);
                }
                report.1 += 1;
                fxp_conv2d_backward_input(&g, &weights[*w], geo, bits, ctx)?
            }
            Op::BatchNorm { gamma, cache } => {
                let p = BatchNormParams {
                    gamma: weights[*gamma].clone(),
                    beta: weights[*gamma + 1].clone(),
                    eps: default_eps(),
                    running_mean: Vec::new(),
                    running_var: Vec::new(),
                    momentum: 0.0,
                };
                let (dx, dg, db) = fxp_batchnorm_backward(&g, cache, &p, ctx)?;
                grads[*gamma] = Some(dg);
                grads[*gamma + 1] = Some(db);
                report.1 += 1;
                dx
            }
            Op::BatchNormEval => {
                return Err(Error::CacheMismatch("backward through an eval-mode batch norm".into()));
            }
            Op::LayerNorm { gamma, cache } => {
                let p = LayerNormParams {
                    gamma: weights[*gamma].clone(),
                    beta: weights[*gamma + 1].clone(),
                    eps: default_eps(),
                };
                let (dx, dg, db) = fxp_layernorm_backward(&g, cache, &p, ctx)?;
                grads[*gamma] = Some(dg);
                grads[*gamma + 1] = Some(db);
                report.1 += 1;
                dx
            }
            Op::Relu { y } => fxp_relu_backward(&g, y)?,
            Op::MaxPool { argmax, in_shape } => fxp_maxpool_backward(&g, argmax, in_shape)?,
            Op::AvgPool { win, in_shape } => {
                report.1 += 1;
                fxp_avgpool_backward(&g, *win, in_shape, ctx)?
            }
            Op::Flatten { in_shape } => g.reshape(in_shape.clone())?,
            Op::Residual { body } => {
                let inner = back(body, weights, g.clone(), grads, report, ctx)?;
                report.1 += 1;
                fxp_add(&g, &inner, ctx)?
            }
        };
    }
    Ok(g)
}
