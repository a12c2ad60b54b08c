use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use flat_core::checkpoint::load_batches;
use flat_core::model::synthetic_batches;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::CalibSource;

/// Bad flag combination or value that clap cannot catch.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// `seed=S,batches=M,tokens=N`; `seed` may be omitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub seed: Option<u64>,
    pub batches: usize,
    pub tokens: usize,
}

impl FromStr for SyntheticSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut seed = None;
        let mut batches = None;
        let mut tokens = None;
        for part in s.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{part}`"))?;
            let bad = |e: std::num::ParseIntError| format!("{key}: {e}");
            match key.trim() {
                "seed" => seed = Some(value.trim().parse().map_err(bad)?),
                "batches" => batches = Some(value.trim().parse().map_err(bad)?),
                "tokens" => tokens = Some(value.trim().parse().map_err(bad)?),
                other => return Err(format!("unknown key `{other}`")),
            }
        }
        let batches = batches.ok_or("missing batches=M")?;
        let tokens = tokens.ok_or("missing tokens=N")?;
        if batches == 0 || tokens == 0 {
            return Err("batches and tokens must be positive".into());
        }
        Ok(SyntheticSpec {
            seed,
            batches,
            tokens,
        })
    }
}

pub fn calibration_batches(src: &CalibSource, d_hid: usize, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    match (&src.calib, &src.calib_synthetic) {
        (Some(dir), _) => {
            load_batches(dir).with_context(|| format!("loading calibration data {}", dir.display()))
        }
        (None, Some(spec)) => Ok(synthetic_batches(
            d_hid,
            spec.seed.unwrap_or(seed),
            spec.batches,
            spec.tokens,
        )),
        (None, None) => Err(usage("one of --calib or --calib-synthetic is required")),
    }
}

/// Refuses to write into an input directory.
pub fn check_distinct(input: &Path, output: &Path) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    if canon(input) == canon(output) {
        return Err(usage(format!(
            "output {} must differ from input {}",
            output.display(),
            input.display()
        )));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
