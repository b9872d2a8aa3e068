//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use dfx_core::nn::{cnn_preset, mlp_preset, ModelConfig};
use dfx_core::numfmt::RoundingMode;
use dfx_core::optim::LrSchedule;
use dfx_core::report::fmt_g;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Gaussian blobs generated from the run seed.
    Synthetic,
    /// Directory holding `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte` and `t10k-labels-idx1-ubyte`, optionally `.gz`.
    Idx(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Preset,
    pub dataset: DatasetSource,
    pub bits: u32,
    pub forward_rounding: RoundingMode,
    pub backward_rounding: RoundingMode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub output_dir: PathBuf,
    /// Cap on training samples; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_classes: usize,
    /// Distance of each class centre from the origin.
    pub synthetic_margin: f64,
    /// Per-pixel noise standard deviation.
    pub synthetic_noise: f64,
    /// A step loss above this for `divergence_patience` consecutive steps, or
    /// any non-finite loss, marks the run diverged.
    pub divergence_threshold: f64,
    pub divergence_patience: usize,
    pub checkpoint: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: Preset::Mlp,
            dataset: DatasetSource::Synthetic,
            bits: 8,
            forward_rounding: RoundingMode::Stochastic,
            backward_rounding: RoundingMode::Stochastic,
            seed: 0,
            epochs: 5,
            batch_size: 64,
            lr: 0.05,
            lr_milestones: Vec::new(),
            lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            output_dir: PathBuf::from("runs/default"),
            train_limit: 0,
            test_limit: 0,
            synthetic_train: 6000,
            synthetic_test: 1000,
            synthetic_classes: 10,
            synthetic_margin: 4.0,
            synthetic_noise: 1.0,
            divergence_threshold: 10.0,
            divergence_patience: 50,
            checkpoint: true,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::ConfigInvalid(msg.into())
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_mode(key: &str, v: &str) -> Result<RoundingMode> {
    match v {
        "stochastic" => Ok(RoundingMode::Stochastic),
        "nearest" => Ok(RoundingMode::Nearest),
        _ => Err(invalid(format!("`{key}` must be stochastic or nearest, got `{v}`"))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(format!("`{key}` must be true or false, got `{v}`"))),
    }
}

fn mode_name(m: RoundingMode) -> &'static str {
    match m {
        RoundingMode::Stochastic => "stochastic",
        RoundingMode::Nearest => "nearest",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "model" => {
                self.model = match v {
                    "mlp" => Preset::Mlp,
                    "cnn" => Preset::Cnn,
                    _ => return Err(invalid(format!("`model` must be mlp or cnn, got `{v}`"))),
                }
            }
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetSource::Synthetic,
                    _ => DatasetSource::Idx(PathBuf::from(v)),
                }
            }
            "bits" => self.bits = parse_num(key, v)?,
            "forward_rounding" => self.forward_rounding = parse_mode(key, v)?,
            "backward_rounding" => self.backward_rounding = parse_mode(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_milestones" => {
                self.lr_milestones = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "lr_factor" => self.lr_factor = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "train_limit" => self.train_limit = parse_num(key, v)?,
            "test_limit" => self.test_limit = parse_num(key, v)?,
            "synthetic_train" => self.synthetic_train = parse_num(key, v)?,
            "synthetic_test" => self.synthetic_test = parse_num(key, v)?,
            "synthetic_classes" => self.synthetic_classes = parse_num(key, v)?,
            "synthetic_margin" => self.synthetic_margin = parse_num(key, v)?,
            "synthetic_noise" => self.synthetic_noise = parse_num(key, v)?,
            "divergence_threshold" => self.divergence_threshold = parse_num(key, v)?,
            "divergence_patience" => self.divergence_patience = parse_num(key, v)?,
            "checkpoint" => self.checkpoint = parse_bool(key, v)?,
            _ => return Err(invalid(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// `DFX_SEED` and `DFX_OUT` override the file.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("DFX_SEED") {
            self.seed = parse_num("DFX_SEED", s.trim())?;
        }
        if let Ok(o) = std::env::var("DFX_OUT") {
            self.output_dir = PathBuf::from(o);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        dfx_core::numfmt::check_bits(self.bits).map_err(|_| invalid(format!("bits must be in 4..=8, got {}", self.bits)))?;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(format!("`{name}` must be positive and finite")))
            }
        };
        positive("lr", self.lr)?;
        positive("lr_factor", self.lr_factor)?;
        positive("synthetic_noise", self.synthetic_noise)?;
        positive("divergence_threshold", self.divergence_threshold)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("`momentum` must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("`weight_decay` must be non-negative"));
        }
        if !(self.synthetic_margin >= 0.0 && self.synthetic_margin.is_finite()) {
            return Err(invalid("`synthetic_margin` must be non-negative"));
        }
        if self.epochs == 0 || self.divergence_patience == 0 {
            return Err(invalid("`epochs` and `divergence_patience` must be at least 1"));
        }
        // batch norm needs two samples per batch
        if self.batch_size < 2 {
            return Err(invalid("`batch_size` must be at least 2"));
        }
        if self.dataset == DatasetSource::Synthetic {
            if self.synthetic_classes < 2 || self.synthetic_classes > 10 {
                return Err(invalid("`synthetic_classes` must be in 2..=10"));
            }
            if self.synthetic_train < self.batch_size || self.synthetic_test == 0 {
                return Err(invalid("synthetic split sizes are too small"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            milestones: self.lr_milestones.clone(),
            factor: self.lr_factor,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let (layers, input) = match self.model {
            Preset::Mlp => mlp_preset(),
            Preset::Cnn => cnn_preset(),
        };
        let mut cfg = ModelConfig::new(layers, input, self.bits, self.seed)?;
        cfg.forward_mode = self.forward_rounding;
        cfg.backward_mode = self.backward_rounding;
        Ok(cfg)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let milestones: Vec<String> = self.lr_milestones.iter().map(|m| m.to_string()).collect();
        vec![
            ("model", if self.model == Preset::Mlp { "mlp" } else { "cnn" }.into()),
            (
                "dataset",
                match &self.dataset {
                    DatasetSource::Synthetic => "synthetic".into(),
                    DatasetSource::Idx(p) => p.display().to_string(),
                },
            ),
            ("bits", self.bits.to_string()),
            ("forward_rounding", mode_name(self.forward_rounding).into()),
            ("backward_rounding", mode_name(self.backward_rounding).into()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", fmt_g(self.lr)),
            ("lr_milestones", milestones.join(",")),
            ("lr_factor", fmt_g(self.lr_factor)),
            ("momentum", fmt_g(self.momentum)),
            ("weight_decay", fmt_g(self.weight_decay)),
            ("output_dir", self.output_dir.display().to_string()),
            ("train_limit", self.train_limit.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("synthetic_train", self.synthetic_train.to_string()),
            ("synthetic_test", self.synthetic_test.to_string()),
            ("synthetic_classes", self.synthetic_classes.to_string()),
            ("synthetic_margin", fmt_g(self.synthetic_margin)),
            ("synthetic_noise", fmt_g(self.synthetic_noise)),
            ("divergence_threshold", fmt_g(self.divergence_threshold)),
            ("divergence_patience", self.divergence_patience.to_string()),
            ("checkpoint", self.checkpoint.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let text = "model = cnn\nbits = 6 # comment\nlr = 0.1\nlr_milestones = 3, 4\nforward_rounding = nearest\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model, Preset::Cnn);
        assert_eq!(cfg.lr_milestones, vec![3, 4]);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        for bad in ["bits = 9", "colour = red", "lr = -1", "momentum = 1.5", "no equals sign", "batch_size = 1", "checkpoint = yes"] {
            assert!(matches!(RunConfig::parse(bad), Err(CliError::ConfigInvalid(_))), "{bad}");
        }
    }
}
