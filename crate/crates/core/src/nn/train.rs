//! Integer and float training arms sharing one model description.

use super::float::{self, FTensor};
use super::int::{self, BnRunning, Gradients};
use super::loss::{quantize_grad, softmax_cross_entropy, LossOutput};
use super::spec::ModelConfig;
use crate::error::{Error, Result};
use crate::numfmt::{inverse_map, map_to_fixed, FxpTensor, RoundingContext, RoundingMode};
use crate::optim::{FloatSgd, MasterTensor, OptState};

/// Per-step context streams.
const FORWARD: u64 = 0;
const BACKWARD: u64 = 1;
const OPTIMIZER: u64 = 2;
/// Stream family reserved for evaluation passes.
const EVAL: u64 = 1 << 62;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

impl StepStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}

/// Hyperparameters shared by both arms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

fn batch_shape(cfg: &ModelConfig, x: &[f32]) -> Result<Vec<usize>> {
    let per: usize = cfg.input_shape.iter().product();
    if per == 0 || x.len() % per != 0 {
        return Err(Error::shape("batch", &cfg.input_shape, &[x.len()]));
    }
    let mut shape = vec![x.len() / per];
    shape.extend_from_slice(&cfg.input_shape);
    Ok(shape)
}

fn classes(cfg: &ModelConfig) -> Result<usize> {
    Ok(cfg.output_shape()?.iter().product())
}

/// Integer arm: 16-bit masters, k-bit compute.
#[derive(Debug, Clone)]
pub struct IntModel {
    pub cfg: ModelConfig,
    pub opt: OptState,
    pub bn: Vec<BnRunning>,
    steps: u64,
}

impl IntModel {
    /// Fan-in init in float, mapped once onto the masters with nearest rounding.
    pub fn new(cfg: ModelConfig, sgd: SgdConfig) -> Result<Self> {
        let init = cfg.init_params();
        let mut ctx = RoundingContext::nearest();
        let masters = cfg
            .params()
            .iter()
            .zip(&init)
            .map(|(p, v)| Ok((MasterTensor::from_f32(v, &p.shape, &mut ctx)?, p.decay)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_state(cfg, OptState::new(masters, sgd.lr, sgd.momentum, sgd.weight_decay)))
    }

    pub fn from_state(cfg: ModelConfig, opt: OptState) -> Self {
        let bn = BnRunning::for_config(&cfg);
        Self { cfg, opt, bn, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    /// Master weights as floats (exact).
    pub fn master_values(&self) -> Vec<Vec<f32>> {
        self.opt
            .params
            .iter()
            .map(|p| p.master.to_f64().into_iter().map(|v| v as f32).collect())
            .collect()
    }

    fn step_ctx(&self, stream: u64, mode: RoundingMode) -> RoundingContext {
        let mut ctx = RoundingContext::stochastic(self.cfg.seed).fork(self.steps).fork(stream);
        ctx.set_mode(mode);
        ctx
    }

    /// Forward and backward without touching the weights.
    pub fn gradients(&mut self, x: &[f32], labels: &[usize]) -> Result<(LossOutput, Gradients)> {
        let shape = batch_shape(&self.cfg, x)?;
        let c = classes(&self.cfg)?;
        let mut fwd = self.step_ctx(FORWARD, self.cfg.forward_mode);
        let mut bwd = self.step_ctx(BACKWARD, self.cfg.backward_mode);
        let weights = self.opt.quantize_weights(self.cfg.bits, &mut fwd)?;
        let xq = map_to_fixed(x, &shape, self.cfg.bits, &mut fwd)?;
        let (y, tape) = int::forward(&self.cfg, &weights, &mut self.bn, xq, true, &mut fwd)?;
        let out = softmax_cross_entropy(&inverse_map(&y)?, c, labels)?;
        let g = quantize_grad(&out, c, self.cfg.bits, &mut bwd)?;
        let grads = int::backward(&self.cfg, &weights, &tape, g, &mut bwd)?;
        Ok((out, grads))
    }

    pub fn train_step(&mut self, x: &[f32], labels: &[usize]) -> Result<StepStats> {
        let (out, grads) = self.gradients(x, labels)?;
        let mut opt = self.step_ctx(OPTIMIZER, RoundingMode::Stochastic);
        self.opt.sgd_step(&grads.params, &mut opt)?;
        self.steps += 1;
        Ok(StepStats {
            loss: out.loss,
            correct: out.correct,
            count: labels.len(),
        })
    }

    /// Eval-mode logits: running batch-norm statistics, rounding in the
    /// forward mode on a stream derived from `tag`.
    pub fn logits(&self, x: &[f32], tag: u64) -> Result<Vec<f32>> {
        let shape = batch_shape(&self.cfg, x)?;
        let mut ctx = RoundingContext::stochastic(self.cfg.seed).fork(EVAL | tag);
        ctx.set_mode(self.cfg.forward_mode);
        let weights = self.opt.quantize_weights(self.cfg.bits, &mut ctx)?;
        let xq = map_to_fixed(x, &shape, self.cfg.bits, &mut ctx)?;
        let mut bn = self.bn.clone();
        let (y, _) = int::forward(&self.cfg, &weights, &mut bn, xq, false, &mut ctx)?;
        inverse_map(&y)
    }

    pub fn evaluate(&self, x: &[f32], labels: &[usize], tag: u64) -> Result<StepStats> {
        let out = softmax_cross_entropy(&self.logits(x, tag)?, classes(&self.cfg)?, labels)?;
        Ok(StepStats {
            loss: out.loss,
            correct: out.correct,
            count: labels.len(),
        })
    }

    /// Nearest-rounded k-bit weights.
    pub fn quantized_weights(&self) -> Result<Vec<FxpTensor>> {
        self.opt.quantize_weights(self.cfg.bits, &mut RoundingContext::nearest())
    }
}

/// Float reference arm with the same architecture and update rule.
#[derive(Debug, Clone)]
pub struct FloatModel {
    pub cfg: ModelConfig,
    pub params: Vec<Vec<f32>>,
    pub bn: Vec<BnRunning>,
    pub opt: FloatSgd,
}

impl FloatModel {
    pub fn new(cfg: ModelConfig, params: Vec<Vec<f32>>, sgd: SgdConfig) -> Result<Self> {
        let specs = cfg.params();
        if specs.len() != params.len() || specs.iter().zip(&params).any(|(s, p)| s.len() != p.len()) {
            return Err(Error::Format("float parameters do not match the model".into()));
        }
        let sizes: Vec<(usize, bool)> = specs.iter().map(|s| (s.len(), s.decay)).collect();
        Ok(Self {
            bn: BnRunning::for_config(&cfg),
            opt: FloatSgd::new(&sizes, sgd.lr, sgd.momentum, sgd.weight_decay),
            cfg,
            params,
        })
    }

    /// Starts from the integer arm's masters so both arms share the init.
    pub fn paired_with(int: &IntModel, sgd: SgdConfig) -> Result<Self> {
        Self::new(int.cfg.clone(), int.master_values(), sgd)
    }

    pub fn gradients(&mut self, x: &[f32], labels: &[usize]) -> Result<(LossOutput, Vec<Vec<f32>>)> {
        let shape = batch_shape(&self.cfg, x)?;
        let c = classes(&self.cfg)?;
        let (y, tape) = float::forward(&self.cfg, &self.params, &mut self.bn, FTensor::new(shape, x.to_vec())?, true)?;
        let out = softmax_cross_entropy(&y.data, c, labels)?;
        let g = FTensor::new(y.shape.clone(), out.grad.clone())?;
        let (grads, _) = float::backward(&self.cfg, &self.params, &tape, g)?;
        Ok((out, grads))
    }

    pub fn train_step(&mut self, x: &[f32], labels: &[usize]) -> Result<StepStats> {
        let (out, grads) = self.gradients(x, labels)?;
        self.opt.step(&mut self.params, &grads);
        Ok(StepStats {
            loss: out.loss,
            correct: out.correct,
            count: labels.len(),
        })
    }

    pub fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        let shape = batch_shape(&self.cfg, x)?;
        let mut bn = self.bn.clone();
        let (y, _) = float::forward(&self.cfg, &self.params, &mut bn, FTensor::new(shape, x.to_vec())?, false)?;
        Ok(y.data)
    }

    pub fn evaluate(&self, x: &[f32], labels: &[usize]) -> Result<StepStats> {
        let out = softmax_cross_entropy(&self.logits(x)?, classes(&self.cfg)?, labels)?;
        Ok(StepStats {
            loss: out.loss,
            correct: out.correct,
            count: labels.len(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.lr = lr as f32;
    }
}
