//! Float reference network with the same architecture and parameter layout
//! as the integer arm.

use super::int::BnRunning;
use super::spec::{LayerSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;

pub const FLOAT_EPS: f32 = 1.0 / 1024.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl FTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("FTensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

#[derive(Debug, Clone)]
enum FOp {
    Linear { w: usize, b: Option<usize>, x: FTensor },
    Conv { w: usize, b: Option<usize>, geo: ConvGeometry, cols: Vec<f32> },
    Norm { gamma: usize, xn: Vec<f32>, inv_std: Vec<f32>, batch: bool },
    NormEval,
    Relu { y: Vec<f32> },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    AvgPool { win: usize, in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
    Residual { body: FTape },
}

#[derive(Debug, Clone, Default)]
pub struct FTape {
    nodes: Vec<FOp>,
}

struct Cursor<'a> {
    params: &'a [Vec<f32>],
    bn: &'a mut [BnRunning],
    param: usize,
    bn_idx: usize,
    train: bool,
}

/// Group and affine index of element `i` for batch norm (`batch`) or layer norm.
fn norm_index(shape: &[usize], batch: bool, i: usize) -> (usize, usize) {
    if batch {
        let spatial: usize = shape[2..].iter().product();
        let c = (i / spatial) % shape[1];
        (c, c)
    } else {
        let f = shape[shape.len() - 1];
        (i / f, i % f)
    }
}

fn norm_sizes(shape: &[usize], batch: bool) -> (usize, usize, usize) {
    if batch {
        let spatial: usize = shape[2..].iter().product();
        (shape[1], shape[1], shape[0] * spatial)
    } else {
        let f = shape[shape.len() - 1];
        (shape.iter().product::<usize>() / f, f, f)
    }
}

pub fn forward(cfg: &ModelConfig, params: &[Vec<f32>], bn: &mut [BnRunning], x: FTensor, train: bool) -> Result<(FTensor, FTape)> {
    let mut cur = Cursor {
        params,
        bn,
        param: 0,
        bn_idx: 0,
        train,
    };
    let mut tape = FTape::default();
    let y = run(&cfg.layers, x, &mut cur, &mut tape)?;
    Ok((y, tape))
}

fn run(layers: &[LayerSpec], mut x: FTensor, cur: &mut Cursor, tape: &mut FTape) -> Result<FTensor> {
    for layer in layers {
        let (y, op) = match *layer {
            LayerSpec::Linear { inp, out, bias } => {
                let w = cur.param;
                let b = bias.then_some(w + 1);
                cur.param += 1 + bias as usize;
                let rows = x.shape[0];
                let wm = &cur.params[w];
                let mut y = vec![0f32; rows * out];
                for r in 0..rows {
                    let xr = &x.data[r * inp..(r + 1) * inp];
                    for o in 0..out {
                        let wr = &wm[o * inp..(o + 1) * inp];
                        let mut s: f32 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                        if let Some(b) = b {
                            s += cur.params[b][o];
                        }
                        y[r * out + o] = s;
                    }
                }
                (FTensor::new(vec![rows, out], y)?, FOp::Linear { w, b, x })
            }
            LayerSpec::Conv { out, kernel, stride, pad, bias, inp } => {
                let w = cur.param;
                let b = bias.then_some(w + 1);
                cur.param += 1 + bias as usize;
                let geo = ConvGeometry::new(&x.shape, &[out, inp, kernel, kernel], stride, pad)?;
                let (rows, patch) = (geo.rows(), geo.patch());
                let cols: Vec<f32> = (0..rows * patch)
                    .map(|i| geo.source(i / patch, i % patch).map_or(0.0, |s| x.data[s]))
                    .collect();
                let wm = &cur.params[w];
                let hw = geo.oh * geo.ow;
                let mut y = vec![0f32; rows * out];
                for r in 0..rows {
                    let cr = &cols[r * patch..(r + 1) * patch];
                    let (n, p) = (r / hw, r % hw);
                    for o in 0..out {
                        let mut s: f32 = cr.iter().zip(&wm[o * patch..(o + 1) * patch]).map(|(a, b)| a * b).sum();
                        if let Some(b) = b {
                            s += cur.params[b][o];
                        }
                        y[(n * out + o) * hw + p] = s;
                    }
                }
                (FTensor::new(geo.output_shape().to_vec(), y)?, FOp::Conv { w, b, geo, cols })
            }
            LayerSpec::BatchNorm { .. } | LayerSpec::LayerNorm { .. } => {
                let batch = matches!(layer, LayerSpec::BatchNorm { .. });
                let g = cur.param;
                cur.param += 2;
                let (gamma, beta) = (&cur.params[g], &cur.params[g + 1]);
                let (groups, _, count) = norm_sizes(&x.shape, batch);
                if count < 2 {
                    return Err(Error::DegenerateBatch(count));
                }
                if batch && !cur.train {
                    let run = &cur.bn[cur.bn_idx];
                    cur.bn_idx += 1;
                    let y = x
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let (c, _) = norm_index(&x.shape, true, i);
                            gamma[c] * (v - run.mean[c]) / (run.var[c] + FLOAT_EPS).sqrt() + beta[c]
                        })
                        .collect();
                    (FTensor::new(x.shape.clone(), y)?, FOp::NormEval)
                } else {
                    let mut mean = vec![0f32; groups];
                    let mut var = vec![0f32; groups];
                    for (i, &v) in x.data.iter().enumerate() {
                        mean[norm_index(&x.shape, batch, i).0] += v;
                    }
                    mean.iter_mut().for_each(|m| *m /= count as f32);
                    for (i, &v) in x.data.iter().enumerate() {
                        let k = norm_index(&x.shape, batch, i).0;
                        var[k] += (v - mean[k]).powi(2);
                    }
                    var.iter_mut().for_each(|s| *s /= count as f32);
                    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + FLOAT_EPS).sqrt()).collect();
                    let mut xn = vec![0f32; x.data.len()];
                    let mut y = vec![0f32; x.data.len()];
                    for (i, &v) in x.data.iter().enumerate() {
                        let (k, a) = norm_index(&x.shape, batch, i);
                        xn[i] = (v - mean[k]) * inv_std[k];
                        y[i] = gamma[a] * xn[i] + beta[a];
                    }
                    if batch {
                        let run = &mut cur.bn[cur.bn_idx];
                        cur.bn_idx += 1;
                        let m = run.momentum;
                        let n = count as f32;
                        for c in 0..groups {
                            run.mean[c] = (1.0 - m) * run.mean[c] + m * mean[c];
                            run.var[c] = (1.0 - m) * run.var[c] + m * var[c] * n / (n - 1.0);
                        }
                    }
                    (FTensor::new(x.shape.clone(), y)?, FOp::Norm { gamma: g, xn, inv_std, batch })
                }
            }
            LayerSpec::Relu => {
                let y: Vec<f32> = x.data.iter().map(|&v| v.max(0.0)).collect();
                (FTensor::new(x.shape.clone(), y.clone())?, FOp::Relu { y })
            }
            LayerSpec::MaxPool { win } | LayerSpec::AvgPool { win } => {
                let [n, c, h, w] = x.shape[..] else {
                    return Err(Error::shape("pool", &x.shape, &[0, 0, 0, 0]));
                };
                let (oh, ow) = (h / win, w / win);
                let mut y = vec![0f32; n * c * oh * ow];
                let mut argmax = vec![0usize; y.len()];
                for p in 0..n * c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let o = (p * oh + yy) * ow + xx;
                            let idx = (0..win * win).map(|k| p * h * w + (yy * win + k / win) * w + xx * win + k % win);
                            if matches!(layer, LayerSpec::MaxPool { .. }) {
                                let mut best = usize::MAX;
                                for i in idx {
                                    if best == usize::MAX || x.data[i] > x.data[best] {
                                        best = i;
                                    }
                                }
                                argmax[o] = best;
                                y[o] = x.data[best];
                            } else {
                                y[o] = idx.map(|i| x.data[i]).sum::<f32>() / (win * win) as f32;
                            }
                        }
                    }
                }
                let in_shape = x.shape.clone();
                let op = if matches!(layer, LayerSpec::MaxPool { .. }) {
                    FOp::MaxPool { argmax, in_shape }
                } else {
                    FOp::AvgPool { win, in_shape }
                };
                (FTensor::new(vec![n, c, oh, ow], y)?, op)
            }
            LayerSpec::Flatten => {
                let in_shape = x.shape.clone();
                let y = FTensor::new(vec![in_shape[0], in_shape[1..].iter().product()], x.data)?;
                (y, FOp::Flatten { in_shape })
            }
            LayerSpec::Residual(ref body) => {
                let mut sub = FTape::default();
                let fx = run(body, x.clone(), cur, &mut sub)?;
                let y = x.data.iter().zip(&fx.data).map(|(a, b)| a + b).collect();
                (FTensor::new(x.shape.clone(), y)?, FOp::Residual { body: sub })
            }
        };
        tape.nodes.push(op);
        x = y;
    }
    Ok(x)
}

/// Float backward pass; returns parameter gradients and the input gradient.
pub fn backward(cfg: &ModelConfig, params: &[Vec<f32>], tape: &FTape, g: FTensor) -> Result<(Vec<Vec<f32>>, FTensor)> {
    let mut grads: Vec<Vec<f32>> = cfg.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let dx = back(tape, params, g, &mut grads)?;
    Ok((grads, dx))
}

fn back(tape: &FTape, params: &[Vec<f32>], mut g: FTensor, grads: &mut [Vec<f32>]) -> Result<FTensor> {
    for op in tape.nodes.iter().rev() {
        g = match op {
            FOp::Linear { w, b, x } => {
                let (rows, inp, out) = (x.shape[0], x.shape[1], g.shape[1]);
                let wm = &params[*w];
                let mut dx = vec![0f32; rows * inp];
                for r in 0..rows {
                    for o in 0..out {
                        let go = g.data[r * out + o];
                        if go == 0.0 {
                            continue;
                        }
                        let xr = &x.data[r * inp..(r + 1) * inp];
                        let dw = &mut grads[*w][o * inp..(o + 1) * inp];
                        for (d, &xv) in dw.iter_mut().zip(xr) {
                            *d += go * xv;
                        }
                        for (d, &wv) in dx[r * inp..(r + 1) * inp].iter_mut().zip(&wm[o * inp..(o + 1) * inp]) {
                            *d += go * wv;
                        }
                        if let Some(b) = b {
                            grads[*b][o] += go;
                        }
                    }
                }
                FTensor::new(x.shape.clone(), dx)?
            }
            FOp::Conv { w, b, geo, cols } => {
                let (rows, patch, out) = (geo.rows(), geo.patch(), geo.o);
                let hw = geo.oh * geo.ow;
                let wm = &params[*w];
                let mut dx = vec![0f32; geo.n * geo.c * geo.h * geo.w];
                for r in 0..rows {
                    let (n, p) = (r / hw, r % hw);
                    for o in 0..out {
                        let go = g.data[(n * out + o) * hw + p];
                        if go == 0.0 {
                            continue;
                        }
                        if let Some(b) = b {
                            grads[*b][o] += go;
                        }
                        for k in 0..patch {
                            grads[*w][o * patch + k] += go * cols[r * patch + k];
                            if let Some(s) = geo.source(r, k) {
                                dx[s] += go * wm[o * patch + k];
                            }
                        }
                    }
                }
                FTensor::new(vec![geo.n, geo.c, geo.h, geo.w], dx)?
            }
            FOp::Norm { gamma, xn, inv_std, batch } => {
                let (groups, affines, count) = norm_sizes(&g.shape, *batch);
                let gam = &params[*gamma];
                let mut sg = vec![0f32; groups];
                let mut sgx = vec![0f32; groups];
                let mut dgam = vec![0f32; affines];
                let mut dbet = vec![0f32; affines];
                for (i, &gv) in g.data.iter().enumerate() {
                    let (k, a) = norm_index(&g.shape, *batch, i);
                    dbet[a] += gv;
                    dgam[a] += gv * xn[i];
                    let gh = gam[a] * gv;
                    sg[k] += gh;
                    sgx[k] += gh * xn[i];
                }
                let n = count as f32;
                let dx = g
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let (k, a) = norm_index(&g.shape, *batch, i);
                        (n * gam[a] * gv - sg[k] - xn[i] * sgx[k]) * inv_std[k] / n
                    })
                    .collect();
                grads[*gamma] = dgam;
                grads[*gamma + 1] = dbet;
                FTensor::new(g.shape.clone(), dx)?
            }
            FOp::NormEval => return Err(Error::CacheMismatch("backward through an eval-mode batch norm".into())),
            FOp::Relu { y } => {
                let d = g.data.iter().zip(y).map(|(&gv, &yv)| if yv > 0.0 { gv } else { 0.0 }).collect();
                FTensor::new(g.shape.clone(), d)?
            }
            FOp::MaxPool { argmax, in_shape } => {
                let mut d = FTensor::zeros(in_shape);
                for (&gv, &i) in g.data.iter().zip(argmax) {
                    d.data[i] = gv;
                }
                d
            }
            FOp::AvgPool { win, in_shape } => {
                let [n, c, h, w] = in_shape[..] else { unreachable!() };
                let (oh, ow) = (h / win, w / win);
                let mut d = FTensor::zeros(in_shape);
                let scale = 1.0 / (win * win) as f32;
                for p in 0..n * c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let gv = g.data[(p * oh + yy) * ow + xx] * scale;
                            for k in 0..win * win {
                                d.data[p * h * w + (yy * win + k / win) * w + xx * win + k % win] = gv;
                            }
                        }
                    }
                }
                d
            }
            FOp::Flatten { in_shape } => FTensor::new(in_shape.clone(), g.data)?,
            FOp::Residual { body } => {
                let inner = back(body, params, g.clone(), grads)?;
                let d = g.data.iter().zip(&inner.data).map(|(a, b)| a + b).collect();
                FTensor::new(g.shape.clone(), d)?
            }
        };
    }
    Ok(g)
}
