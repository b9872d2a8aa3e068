//! Integer SGD with momentum and weight decay on 16-bit master weights.

use super::master::{MasterTensor, MASTER_BITS, MASTER_MAX};
use crate::error::{Error, Result};
use crate::kernels::add::{aligned_sum, wide};
use crate::numfmt::{renormalize_wide, FixedScalar, FxpTensor, OpStream, RoundingContext};

/// Hysteresis band for the largest master mantissa; the unit is re-derived
/// only when the maximum leaves `[2^13, 2^15 - 1]`.
pub const BAND_LOW: i128 = 1 << (MASTER_BITS - 3);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamState {
    pub master: MasterTensor,
    pub velocity: MasterTensor,
    pub decay: bool,
}

/// Optimizer state: masters, momentum buffers and fixed-point hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptState {
    pub params: Vec<ParamState>,
    pub lr: FixedScalar,
    pub momentum: FixedScalar,
    pub weight_decay: FixedScalar,
}

impl OptState {
    pub fn new(masters: Vec<(MasterTensor, bool)>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let params = masters
            .into_iter()
            .map(|(master, decay)| ParamState {
                velocity: MasterTensor::zeros(&master.shape),
                master,
                decay,
            })
            .collect();
        Self {
            params,
            lr: FixedScalar::from_f64(lr),
            momentum: FixedScalar::from_f64(momentum),
            weight_decay: FixedScalar::from_f64(weight_decay),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = FixedScalar::from_f64(lr);
    }

    /// One step: `v <- m v + g + wd w`, then `w <- w - lr v`, each rounded
    /// once into its 16-bit grid.
    pub fn sgd_step(&mut self, grads: &[FxpTensor], ctx: &mut RoundingContext) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::shape("sgd_step", &[self.params.len()], &[grads.len()]));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if g.shape() != p.master.shape.as_slice() {
                return Err(Error::shape("sgd_step", &p.master.shape, g.shape()));
            }
            let n = g.len();
            let (vw, ww, gw) = (p.velocity.wide(), p.master.wide(), wide(g));
            let mv: Vec<i128> = vw.iter().map(|&v| v * self.momentum.mantissa as i128).collect();
            let dw: Vec<i128> = ww.iter().map(|&w| w * self.weight_decay.mantissa as i128).collect();
            let mut terms: Vec<(&[i128], i32)> = Vec::new();
            if let Some(u) = p.velocity.unit {
                terms.push((&mv, u + self.momentum.exponent));
            }
            if let Some(u) = g.unit_exponent() {
                terms.push((&gw, u));
            }
            if let (true, Some(u)) = (p.decay, p.master.unit) {
                terms.push((&dw, u + self.weight_decay.exponent));
            }
            let (sum, unit) = aligned_sum(&terms, n);
            p.velocity = round_into(&sum, unit, p.velocity.unit, &p.velocity.shape, ctx.next_op())?;

            let step: Vec<i128> = p.velocity.wide().iter().map(|&v| -v * self.lr.mantissa as i128).collect();
            let mut terms: Vec<(&[i128], i32)> = Vec::new();
            if let Some(u) = p.master.unit {
                terms.push((&ww, u));
            }
            if let Some(u) = p.velocity.unit {
                terms.push((&step, u + self.lr.exponent));
            }
            let (sum, unit) = aligned_sum(&terms, n);
            p.master = round_into(&sum, unit, p.master.unit, &p.master.shape, ctx.next_op())?;
        }
        Ok(())
    }

    /// The k-bit compute weights: each master mapped to `bits` with the
    /// context's rounding mode.
    pub fn quantize_weights(&self, bits: u32, ctx: &mut RoundingContext) -> Result<Vec<FxpTensor>> {
        self.params.iter().map(|p| quantize_master(&p.master, bits, ctx)).collect()
    }
}

pub fn quantize_master(m: &MasterTensor, bits: u32, ctx: &mut RoundingContext) -> Result<FxpTensor> {
    let unit = m.unit.unwrap_or(0);
    renormalize_wide(&m.wide(), |_| unit, &m.shape, bits, ctx)
}

/// Rounds wide values at `2^unit` into a 16-bit grid, keeping `current`
/// when the result stays inside the hysteresis band.
fn round_into(values: &[i128], unit: Option<i32>, current: Option<i32>, shape: &[usize], stream: OpStream) -> Result<MasterTensor> {
    let Some(unit) = unit else {
        return Ok(MasterTensor::zeros(shape));
    };
    let top = values.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    if top == 0 {
        return Ok(MasterTensor::zeros(shape));
    }
    let width = 128 - top.leading_zeros() as i32;
    let fresh = unit + width - (MASTER_BITS as i32 - 1);
    let target = match current {
        Some(c) => {
            let scaled = if c >= unit { top >> (c - unit).min(127) } else { top << (unit - c) };
            if c >= unit - 60 && (BAND_LOW as u128..MASTER_MAX as u128).contains(&scaled) {
                c
            } else {
                fresh
            }
        }
        None => fresh,
    };
    let mantissas = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mag = if target >= unit {
                stream.round_shift(v.unsigned_abs(), (target - unit) as u32, i)
            } else {
                v.unsigned_abs() << (unit - target)
            };
            let mag = mag.min(MASTER_MAX as u128) as i32;
            if v < 0 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    let exponent = target + MASTER_BITS as i32 - 2;
    if exponent > crate::numfmt::float::MAX_EXPONENT {
        return Err(Error::ExponentOverflow(exponent));
    }
    Ok(MasterTensor::from_parts(shape.to_vec(), Some(target), mantissas))
}

/// Step learning-rate schedule: `base` times `factor` per milestone passed.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            milestones: Vec::new(),
            factor: 0.1,
        }
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.factor.powi(drops as i32)
    }
}

/// Float SGD with the same update rule, for the reference arm.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatSgd {
    pub velocity: Vec<Vec<f32>>,
    pub decay: Vec<bool>,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl FloatSgd {
    pub fn new(sizes: &[(usize, bool)], lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: sizes.iter().map(|&(n, _)| vec![0.0; n]).collect(),
            decay: sizes.iter().map(|&(_, d)| d).collect(),
            lr: lr as f32,
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
        }
    }

    pub fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>]) {
        for (((w, g), v), &decay) in params.iter_mut().zip(grads).zip(&mut self.velocity).zip(&self.decay) {
            let wd = if decay { self.weight_decay } else { 0.0 };
            for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + wd * *w;
                *w -= self.lr * *v;
            }
        }
    }
}
