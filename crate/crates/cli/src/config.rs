//! `key = value` run configuration files.
//!
//! One pair per line; `#` starts a comment. Keys not listed in [`KEYS`] are
//! rejected. Missing keys take the library defaults and are logged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sesame_core::train::{Reduction, PAPER_SIGMA_GRID};
use sesame_core::{BlurMode, PoolingStrategy, TrainConfig};

use crate::CliError;

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "train_path",
    "dev_path",
    "diagnostic_path",
    "out_dir",
    "seed",
    "batch_size",
    "learning_rate",
    "epochs",
    "vocab_size",
    "max_len",
    "d_model",
    "heads",
    "layers",
    "d_ff",
    "blur_mode",
    "window",
    "sigma",
    "normalize_kernel",
    "se",
    "se_ratio",
    "se_bias",
    "pooling",
    "reduction",
    "classes",
    "sigma_grid",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    /// Tagged split scored per heuristic cell.
    pub diagnostic_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub sigma_grid: Vec<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut pairs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(CliError::usage(format!("unknown config key `{key}` on line {}", i + 1)));
            }
            if pairs.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::usage(format!("config key `{key}` given twice")));
            }
        }
        let defaulted: Vec<&str> = KEYS.iter().copied().filter(|k| !pairs.contains_key(*k)).collect();
        if !defaulted.is_empty() {
            log::info!("using defaults for {}", defaulted.join(", "));
        }

        let mut r = Reader { pairs: &pairs };
        let path = |r: &mut Reader, key| r.opt::<PathBuf>(key).map(|p| p.map(|p| base.join(p)));
        let train_path = path(&mut r, "train_path")?;
        let dev_path = path(&mut r, "dev_path")?;
        let diagnostic_path = path(&mut r, "diagnostic_path")?;
        let out_dir = path(&mut r, "out_dir")?.unwrap_or_else(|| base.join("out"));

        let mut t = TrainConfig::default();
        r.set(&mut t.seed, "seed")?;
        r.set(&mut t.batch_size, "batch_size")?;
        r.set(&mut t.learning_rate, "learning_rate")?;
        r.set(&mut t.epochs, "epochs")?;
        let m = &mut t.model;
        r.set(&mut m.encoder.vocab_size, "vocab_size")?;
        r.set(&mut m.encoder.layers, "layers")?;
        let a = &mut m.encoder.attention;
        r.set(&mut a.max_len, "max_len")?;
        r.set(&mut a.d_model, "d_model")?;
        r.set(&mut a.heads, "heads")?;
        r.set::<BlurMode>(&mut a.blur_mode, "blur_mode")?;
        r.set(&mut a.window, "window")?;
        r.set(&mut a.sigma, "sigma")?;
        r.set(&mut a.normalize_kernel, "normalize_kernel")?;
        m.encoder.d_ff = 4 * m.encoder.attention.d_model;
        r.set(&mut m.encoder.d_ff, "d_ff")?;
        r.set(&mut m.se, "se")?;
        r.set(&mut m.se_ratio, "se_ratio")?;
        r.set(&mut m.se_bias, "se_bias")?;
        r.set::<PoolingStrategy>(&mut m.pooling, "pooling")?;
        r.set::<Reduction>(&mut m.reduction, "reduction")?;
        r.set(&mut m.classes, "classes")?;
        t.validate().map_err(|e| CliError::usage(e.to_string()))?;

        let sigma_grid = match pairs.get("sigma_grid") {
            None => PAPER_SIGMA_GRID.to_vec(),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::usage(format!("config key `sigma_grid`: {e}")))?,
        };

        Ok(Self {
            train: t,
            train_path,
            dev_path,
            diagnostic_path,
            out_dir,
            sigma_grid,
        })
    }

    pub fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        path.as_deref()
            .ok_or_else(|| CliError::usage(format!("config key `{key}` is required for this command")))
    }
}

struct Reader<'a> {
    pairs: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.pairs
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::usage(format!("config key `{key}`: cannot parse {v:?}: {e}")))
            })
            .transpose()
    }

    fn set<T: FromStr>(&mut self, slot: &mut T, key: &str) -> Result<(), CliError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.opt(key)? {
            *slot = v;
        }
        Ok(())
    }
}
