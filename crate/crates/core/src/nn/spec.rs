//! Model description shared by the integer and float arms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numfmt::{check_bits, RoundingMode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Linear { inp: usize, out: usize, bias: bool },
    Conv { inp: usize, out: usize, kernel: usize, stride: usize, pad: usize, bias: bool },
    BatchNorm { channels: usize },
    LayerNorm { features: usize },
    Relu,
    MaxPool { win: usize },
    AvgPool { win: usize },
    Flatten,
    /// `y = x + body(x)`.
    Residual(Vec<LayerSpec>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform(f64),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
    pub decay: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub bits: u32,
    pub forward_mode: RoundingMode,
    pub backward_mode: RoundingMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>, bits: u32, seed: u64) -> Result<Self> {
        let cfg = Self {
            layers,
            input_shape,
            bits,
            forward_mode: RoundingMode::Stochastic,
            backward_mode: RoundingMode::Stochastic,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        self.output_shape().map(|_| ())
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        infer(&self.layers, &self.input_shape)
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        collect_params(&self.layers, &mut out);
        out
    }

    /// Channel counts of the batch-norm layers, in execution order.
    pub fn batchnorm_channels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        collect_bn(&self.layers, &mut out);
        out
    }

    /// Fan-in scaled uniform init in float, deterministic in the seed.
    pub fn init_params(&self) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1A17_0000);
        self.params()
            .iter()
            .map(|p| match p.init {
                Init::Uniform(b) => (0..p.len()).map(|_| rng.random_range(-b..b) as f32).collect(),
                Init::Ones => vec![1.0; p.len()],
                Init::Zeros => vec![0.0; p.len()],
            })
            .collect()
    }
}

fn collect_params(layers: &[LayerSpec], out: &mut Vec<ParamSpec>) {
    for l in layers {
        match *l {
            LayerSpec::Linear { inp, out: o, bias } => {
                let b = 1.0 / (inp as f64).sqrt();
                out.push(ParamSpec { shape: vec![o, inp], init: Init::Uniform(b), decay: true });
                if bias {
                    out.push(ParamSpec { shape: vec![o], init: Init::Zeros, decay: false });
                }
            }
            LayerSpec::Conv { inp, out: o, kernel, bias, .. } => {
                let b = 1.0 / ((inp * kernel * kernel) as f64).sqrt();
                out.push(ParamSpec { shape: vec![o, inp, kernel, kernel], init: Init::Uniform(b), decay: true });
                if bias {
                    out.push(ParamSpec { shape: vec![o], init: Init::Zeros, decay: false });
                }
            }
            LayerSpec::BatchNorm { channels: n } | LayerSpec::LayerNorm { features: n } => {
                out.push(ParamSpec { shape: vec![n], init: Init::Ones, decay: false });
                out.push(ParamSpec { shape: vec![n], init: Init::Zeros, decay: false });
            }
            LayerSpec::Residual(ref body) => collect_params(body, out),
            LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::AvgPool { .. } | LayerSpec::Flatten => {}
        }
    }
}

fn collect_bn(layers: &[LayerSpec], out: &mut Vec<usize>) {
    for l in layers {
        match l {
            LayerSpec::BatchNorm { channels } => out.push(*channels),
            LayerSpec::Residual(body) => collect_bn(body, out),
            _ => {}
        }
    }
}

fn bad(layer: &LayerSpec, shape: &[usize]) -> Error {
    Error::Format(format!("layer {layer:?} cannot take per-sample input {shape:?}"))
}

fn infer(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    let mut s = input.to_vec();
    for l in layers {
        s = match (l, s.as_slice()) {
            (LayerSpec::Linear { inp, out, .. }, [n]) if n == inp => vec![*out],
            (LayerSpec::Conv { inp, out, kernel, stride, pad, .. }, [c, h, w])
                if c == inp && *stride > 0 && h + 2 * pad >= *kernel && w + 2 * pad >= *kernel =>
            {
                vec![*out, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1]
            }
            (LayerSpec::BatchNorm { channels }, [c, ..]) if c == channels => s.clone(),
            (LayerSpec::LayerNorm { features }, [f]) if f == features => s.clone(),
            (LayerSpec::Relu, _) => s.clone(),
            (LayerSpec::MaxPool { win } | LayerSpec::AvgPool { win }, [c, h, w]) if *win > 0 && h % win == 0 && w % win == 0 => {
                vec![*c, h / win, w / win]
            }
            (LayerSpec::Flatten, _) => vec![s.iter().product()],
            (LayerSpec::Residual(body), _) => {
                let o = infer(body, &s)?;
                if o != s {
                    return Err(bad(l, &s));
                }
                o
            }
            _ => return Err(bad(l, &s)),
        };
    }
    Ok(s)
}

/// MLP 784-256-10 with batch norm and ReLU.
pub fn mlp_preset() -> (Vec<LayerSpec>, Vec<usize>) {
    (
        vec![
            LayerSpec::Linear { inp: 784, out: 256, bias: false },
            LayerSpec::BatchNorm { channels: 256 },
            LayerSpec::Relu,
            LayerSpec::Linear { inp: 256, out: 10, bias: true },
        ],
        vec![784],
    )
}

/// conv3x3(8)-bn-relu-pool-conv3x3(16)-bn-relu-pool-fc on 1x28x28 inputs.
pub fn cnn_preset() -> (Vec<LayerSpec>, Vec<usize>) {
    (
        vec![
            LayerSpec::Conv { inp: 1, out: 8, kernel: 3, stride: 1, pad: 1, bias: false },
            LayerSpec::BatchNorm { channels: 8 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { win: 2 },
            LayerSpec::Conv { inp: 8, out: 16, kernel: 3, stride: 1, pad: 1, bias: false },
            LayerSpec::BatchNorm { channels: 16 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { win: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { inp: 16 * 7 * 7, out: 10, bias: true },
        ],
        vec![1, 28, 28],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_chain() {
        let (l, s) = mlp_preset();
        let cfg = ModelConfig::new(l, s, 8, 1).unwrap();
        assert_eq!(cfg.output_shape().unwrap(), vec![10]);
        assert_eq!(cfg.params().len(), 5);
        let (l, s) = cnn_preset();
        let cfg = ModelConfig::new(l, s, 8, 1).unwrap();
        assert_eq!(cfg.output_shape().unwrap(), vec![10]);
        assert_eq!(cfg.batchnorm_channels(), vec![8, 16]);
    }

    #[test]
    fn rejects_bad_chains_and_widths() {
        let l = vec![LayerSpec::Linear { inp: 3, out: 2, bias: true }];
        assert!(ModelConfig::new(l.clone(), vec![4], 8, 0).is_err());
        assert!(ModelConfig::new(l.clone(), vec![3], 9, 0).is_err());
        let res = vec![LayerSpec::Residual(vec![LayerSpec::Linear { inp: 3, out: 2, bias: false }])];
        assert!(ModelConfig::new(res, vec![3], 8, 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let (l, s) = mlp_preset();
        let a = ModelConfig::new(l.clone(), s.clone(), 8, 5).unwrap().init_params();
        let b = ModelConfig::new(l, s, 8, 5).unwrap().init_params();
        assert_eq!(a, b);
        assert!(a[0].iter().all(|v| v.abs() <= 1.0 / 28.0));
        assert!(a[1].iter().all(|&v| v == 1.0));
    }
}
