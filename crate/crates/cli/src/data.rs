//! Datasets: IDX files (optionally gzip-compressed) and synthetic Gaussian blobs.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{DatasetSource, RunConfig};
use crate::error::{CliError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Samples stored row-major, one flattened image per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<f32>,
    pub y: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn gather(&self, idx: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.dim..(i + 1) * self.dim]);
        }
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }

    /// Keeps the first `n` samples; 0 keeps all.
    pub fn truncate(&mut self, n: usize) {
        if n > 0 && n < self.len() {
            self.x.truncate(n * self.dim);
            self.y.truncate(n);
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::DatasetNotFound(path.to_path_buf()),
        _ => CliError::Io(e),
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| CliError::MalformedIdx(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX buffer into its dimensions and payload.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| CliError::MalformedIdx("truncated header".into()))
    };
    let m = word(0)?;
    if m != magic {
        return Err(CliError::MalformedIdx(format!("magic {m:#010x}, expected {magic:#010x}")));
    }
    let rank = (m & 0xff) as usize;
    let dims: Vec<usize> = (1..=rank).map(|i| word(i).map(|d| d as usize)).collect::<Result<_>>()?;
    let n: usize = dims.iter().product();
    let payload = &bytes[4 * (rank + 1)..];
    if payload.len() != n {
        return Err(CliError::MalformedIdx(format!("payload has {} bytes, header implies {n}", payload.len())));
    }
    Ok((dims, payload))
}

/// Loads an image/label file pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = read_all(images)?;
    let lab_bytes = read_all(labels)?;
    let (idims, pixels) = parse_idx(&img_bytes, IMAGE_MAGIC)?;
    let (ldims, labs) = parse_idx(&lab_bytes, LABEL_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(CliError::DimMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let y: Vec<usize> = labs.iter().map(|&l| l as usize).collect();
    Ok(Dataset {
        x: pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        classes: y.iter().max().map_or(0, |&m| m + 1),
        dim: idims[1] * idims[2],
        y,
    })
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    let gz = dir.join(format!("{stem}.gz"));
    if plain.exists() {
        Ok(plain)
    } else if gz.exists() {
        Ok(gz)
    } else {
        Err(CliError::DatasetNotFound(plain))
    }
}

/// Train and test splits from a directory in the usual MNIST layout.
pub fn load_idx_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    if !dir.is_dir() {
        return Err(CliError::DatasetNotFound(dir.to_path_buf()));
    }
    let train = load_idx(&find(dir, "train-images-idx3-ubyte")?, &find(dir, "train-labels-idx1-ubyte")?)?;
    let test = load_idx(&find(dir, "t10k-images-idx3-ubyte")?, &find(dir, "t10k-labels-idx1-ubyte")?)?;
    Ok((train, test))
}

/// Gaussian blobs in 784 dimensions. Class centres are random directions
/// scaled to `margin`; samples add isotropic noise with standard deviation
/// `noise`. Train and test share the centres.
pub fn synthetic(cfg: &RunConfig) -> (Dataset, Dataset) {
    const DIM: usize = 784;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_DA7A);
    let centres: Vec<Vec<f64>> = (0..cfg.synthetic_classes)
        .map(|_| {
            let v: Vec<f64> = (0..DIM).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / norm * cfg.synthetic_margin).collect()
        })
        .collect();
    let mut split = |n: usize| {
        let mut x = Vec::with_capacity(n * DIM);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % cfg.synthetic_classes;
            x.extend(centres[c].iter().map(|&m| (m + cfg.synthetic_noise * rng.sample::<f64, _>(StandardNormal)) as f32));
            y.push(c);
        }
        Dataset {
            x,
            y,
            dim: DIM,
            classes: cfg.synthetic_classes,
        }
    };
    let train = split(cfg.synthetic_train);
    let test = split(cfg.synthetic_test);
    (train, test)
}

pub fn load(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match &cfg.dataset {
        DatasetSource::Synthetic => synthetic(cfg),
        DatasetSource::Idx(dir) => load_idx_dir(dir)?,
    };
    train.truncate(cfg.train_limit);
    test.truncate(cfg.test_limit);
    if train.dim != 784 || test.dim != 784 {
        return Err(CliError::ConfigInvalid(format!("presets expect 28x28 images, dataset has {} pixels", train.dim)));
    }
    if train.classes > 10 || test.classes > 10 {
        return Err(CliError::ConfigInvalid("presets have 10 output classes".into()));
    }
    if train.len() < cfg.batch_size {
        return Err(CliError::ConfigInvalid("training split is smaller than one batch".into()));
    }
    Ok((train, test))
}

/// Sample order of one epoch, a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// FNV-1a over the consumed sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderDigest(u64);

impl Default for OrderDigest {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl OrderDigest {
    pub fn update(&mut self, idx: &[usize]) {
        for &i in idx {
            for b in (i as u64).to_le_bytes() {
                self.0 ^= b as u64;
                self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }

    pub fn hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}
