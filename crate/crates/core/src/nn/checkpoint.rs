//! Checkpoint directory: DFXT tensors plus a `key = value` manifest.
//!
//! ```text
//! manifest.txt        config and optimizer state version
//! param_<i>.dfxt      k-bit weights (nearest from the master)
//! master_<i>.dfxt     16-bit master weights
//! velocity_<i>.dfxt   16-bit momentum buffers
//! bn_<j>.csv          running mean and variance per channel
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::int::BnRunning;
use super::spec::ModelConfig;
use super::train::IntModel;
use crate::error::{Error, Result};
use crate::numfmt::serialize::{read_raw, write_fxp, write_raw};
use crate::optim::{MasterTensor, OptState, ParamState};

pub const FORMAT: &str = "dfx-checkpoint";
pub const VERSION: u32 = 1;
pub const OPTIMIZER_STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub masters: Vec<MasterTensor>,
    pub velocity: Vec<MasterTensor>,
    pub bn: Vec<BnRunning>,
}

pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Writes `model` to `dir`; `extra` entries are added to the manifest.
pub fn save(dir: &Path, model: &IntModel, extra: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = BTreeMap::new();
    let mut put = |k: &str, v: String| manifest.insert(k.to_string(), v);
    put("format", FORMAT.into());
    put("version", VERSION.to_string());
    put("optimizer_state_version", OPTIMIZER_STATE_VERSION.to_string());
    put("bits", model.cfg.bits.to_string());
    put("seed", model.cfg.seed.to_string());
    put("steps", model.steps().to_string());
    put("params", model.opt.params.len().to_string());
    put("batchnorm_layers", model.bn.len().to_string());
    put("lr", format!("{:.9e}", model.opt.lr.to_f64()));
    put("momentum", format!("{:.9e}", model.opt.momentum.to_f64()));
    put("weight_decay", format!("{:.9e}", model.opt.weight_decay.to_f64()));
    for (k, v) in extra {
        manifest.insert(k.clone(), v.clone());
    }

    for (i, (p, q)) in model.opt.params.iter().zip(model.quantized_weights()?).enumerate() {
        write_fxp(&q, &mut BufWriter::new(File::create(dir.join(format!("param_{i}.dfxt")))?))?;
        write_raw(&p.master.to_raw(), &mut BufWriter::new(File::create(dir.join(format!("master_{i}.dfxt")))?))?;
        write_raw(&p.velocity.to_raw(), &mut BufWriter::new(File::create(dir.join(format!("velocity_{i}.dfxt")))?))?;
    }
    for (j, bn) in model.bn.iter().enumerate() {
        let mut w = BufWriter::new(File::create(dir.join(format!("bn_{j}.csv")))?);
        writeln!(w, "channel,mean,var,momentum")?;
        for (c, (m, v)) in bn.mean.iter().zip(&bn.var).enumerate() {
            writeln!(w, "{c},{m:.9e},{v:.9e},{:.9e}", bn.momentum)?;
        }
        w.flush()?;
    }
    let mut w = BufWriter::new(File::create(dir.join("manifest.txt"))?);
    for (k, v) in &manifest {
        writeln!(w, "{k} = {v}")?;
    }
    w.flush()?;
    Ok(())
}

fn count(manifest: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    manifest
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))
}

fn read_master(path: &Path) -> Result<MasterTensor> {
    MasterTensor::from_raw(read_raw(&mut BufReader::new(File::open(path)?))?)
}

fn read_bn(path: &Path) -> Result<BnRunning> {
    let text = fs::read_to_string(path)?;
    let mut bn = BnRunning::new(0);
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f32> {
            f.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("bad running-stats row `{line}`")))
        };
        bn.mean.push(num(1)?);
        bn.var.push(num(2)?);
        bn.momentum = num(3)?;
    }
    Ok(bn)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = parse_manifest(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    if manifest.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::Format("not a checkpoint manifest".into()));
    }
    if count(&manifest, "version")? != VERSION as usize {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    let n = count(&manifest, "params")?;
    let masters = (0..n)
        .map(|i| read_master(&dir.join(format!("master_{i}.dfxt"))))
        .collect::<Result<Vec<_>>>()?;
    let velocity = (0..n)
        .map(|i| read_master(&dir.join(format!("velocity_{i}.dfxt"))))
        .collect::<Result<Vec<_>>>()?;
    let bn = (0..count(&manifest, "batchnorm_layers")?)
        .map(|j| read_bn(&dir.join(format!("bn_{j}.csv"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        manifest,
        masters,
        velocity,
        bn,
    })
}

impl Checkpoint {
    /// Rebuilds the integer arm; the tensor shapes must match `cfg`.
    pub fn restore(self, cfg: ModelConfig) -> Result<IntModel> {
        let specs = cfg.params();
        if specs.len() != self.masters.len() {
            return Err(Error::Format("checkpoint does not match the model".into()));
        }
        for (s, m) in specs.iter().zip(self.masters.iter().chain(&self.velocity)) {
            if s.shape != m.shape {
                return Err(Error::shape("restore", &s.shape, &m.shape));
            }
        }
        let bn_shapes: Vec<usize> = self.bn.iter().map(|b| b.mean.len()).collect();
        if bn_shapes != cfg.batchnorm_channels() {
            return Err(Error::Format("checkpoint batch-norm layers do not match the model".into()));
        }
        let num = |k: &str| -> Result<f64> {
            self.manifest
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("manifest is missing `{k}`")))
        };
        let mut opt = OptState::new(Vec::new(), num("lr")?, num("momentum")?, num("weight_decay")?);
        opt.params = self
            .masters
            .into_iter()
            .zip(self.velocity)
            .zip(&specs)
            .map(|((master, velocity), s)| ParamState {
                master,
                velocity,
                decay: s.decay,
            })
            .collect();
        let mut model = IntModel::from_state(cfg, opt);
        model.bn = self.bn;
        model.set_steps(count(&self.manifest, "steps")? as u64);
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::LayerSpec;
    use crate::nn::train::SgdConfig;

    #[test]
    fn round_trip_resumes_bit_exactly() {
        let layers = vec![
            LayerSpec::Linear { inp: 6, out: 5, bias: false },
            LayerSpec::BatchNorm { channels: 5 },
            LayerSpec::Relu,
            LayerSpec::Linear { inp: 5, out: 3, bias: true },
        ];
        let cfg = ModelConfig::new(layers, vec![6], 8, 9).unwrap();
        let sgd = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 1e-4 };
        let mut a = IntModel::new(cfg.clone(), sgd).unwrap();
        let x: Vec<f32> = (0..24).map(|i| ((i * 7 % 11) as f32 - 5.0) / 4.0).collect();
        let y = [0usize, 1, 2, 1];
        a.train_step(&x, &y).unwrap();
        let dir = std::env::temp_dir().join(format!("dfx-ckpt-{}", std::process::id()));
        save(&dir, &a, &[("preset".into(), "toy".into())]).unwrap();
        let ck = load(&dir).unwrap();
        assert_eq!(ck.manifest["preset"], "toy");
        let mut b = ck.restore(cfg).unwrap();
        assert_eq!(b.opt, a.opt);
        assert_eq!(b.bn, a.bn);
        let sa = a.train_step(&x, &y).unwrap();
        let sb = b.train_step(&x, &y).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.opt, b.opt);
        fs::remove_dir_all(&dir).unwrap();
    }
}
