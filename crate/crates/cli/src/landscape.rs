//! `dfxtrain landscape`: loss surfaces of a checkpoint in float and fixed point.

use std::fs;
use std::path::{Path, PathBuf};

use dfx_core::nn::checkpoint;
use dfx_core::report::fmt_g;
use dfx_core::theory::{landscape_probe, LandscapeGrid};

use crate::config::RunConfig;
use crate::data;
use crate::error::{CliError, Result};

/// Training samples the surface is evaluated on.
pub const LANDSCAPE_SAMPLES: usize = 1000;

/// Rebuilds the run configuration stored in a checkpoint manifest.
pub fn config_from_manifest(m: &std::collections::BTreeMap<String, String>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut found = false;
    for (k, v) in m {
        if let Some(key) = k.strip_prefix("config.") {
            cfg.set(key, v)?;
            found = true;
        }
    }
    if !found {
        return Err(CliError::ConfigInvalid("checkpoint manifest has no run configuration".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `landscape_float.csv`, `landscape_fixed.csv` (n x n matrices),
/// `landscape_coords.csv` and `landscape_summary.txt` into `out`.
pub fn cmd_landscape(ckpt: &Path, n: usize, scale: f64, seed: u64, out: Option<PathBuf>) -> Result<LandscapeGrid> {
    if n < 2 || !(scale.is_finite() && scale > 0.0) {
        return Err(CliError::ConfigInvalid("grid must be at least 2 and scale positive".into()));
    }
    let ck = checkpoint::load(ckpt)?;
    let cfg = config_from_manifest(&ck.manifest)?;
    let model = ck.restore(cfg.model_config()?)?;
    let (mut train, _) = data::load(&cfg)?;
    train.truncate(LANDSCAPE_SAMPLES);
    let grid = landscape_probe(&model, &train.x, &train.y, n, scale, seed)?;
    let out = out
        .or_else(|| std::env::var_os("DFX_OUT").map(PathBuf::from))
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("landscape"));
    fs::create_dir_all(&out)?;
    fs::write(out.join("landscape_float.csv"), grid.matrix_csv(&grid.float))?;
    fs::write(out.join("landscape_fixed.csv"), grid.matrix_csv(&grid.fixed))?;
    let coords: String = std::iter::once("index,coordinate\n".to_string())
        .chain(grid.coords.iter().enumerate().map(|(i, c)| format!("{i},{}\n", fmt_g(*c))))
        .collect();
    fs::write(out.join("landscape_coords.csv"), coords)?;
    let max_gap = grid.float.iter().zip(&grid.fixed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let centre = n / 2;
    let summary = format!(
        "grid = {n}\nscale = {}\nseed = {seed}\nsamples = {}\nmax_abs_difference = {}\ncentre_float = {}\ncentre_fixed = {}\n",
        fmt_g(scale),
        train.len(),
        fmt_g(max_gap),
        fmt_g(LandscapeGrid::at(&grid.float, n, centre, centre)),
        fmt_g(LandscapeGrid::at(&grid.fixed, n, centre, centre)),
    );
    fs::write(out.join("landscape_summary.txt"), summary)?;
    Ok(grid)
}
