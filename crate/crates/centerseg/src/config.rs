//! Run configuration: every knob of a training/eval run, with a
//! lossless line-oriented key=value file form (floats print in
//! shortest-roundtrip form, so parse(print(x)) == x).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub num_classes: usize,
    /// Sub-prototypes per class.
    pub per_class: usize,
    /// Feature channels of the backbone output.
    pub feature_dim: usize,
    /// Logical patch grid over the feature map.
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub momentum: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub lambda_pp: f64,
    pub lambda_fp: f64,
    pub lambda_dice: f64,
    pub margin: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Softmax-style baseline: one prototype per class, regularizers off.
    pub baseline: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: String::new(),
            num_classes: 2,
            per_class: 8,
            feature_dim: 32,
            grid_rows: 2,
            grid_cols: 2,
            momentum: 0.999,
            alpha: 1.0,
            temperature: 1.0,
            lambda_pp: 0.01,
            lambda_fp: 0.01,
            lambda_dice: 1.0,
            margin: 1.0,
            lr: 0.01,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            baseline: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.per_class < 1 {
            return Err(Error::Config("per_class must be >= 1".into()));
        }
        if self.feature_dim < self.per_class {
            return Err(Error::Config(format!(
                "feature_dim {} must be >= per_class {}",
                self.feature_dim, self.per_class
            )));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::Config("patch grid must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.alpha <= 0.0 || self.temperature <= 0.0 {
            return Err(Error::Config("alpha and temperature must be positive".into()));
        }
        for (name, v) in [
            ("lambda_pp", self.lambda_pp),
            ("lambda_fp", self.lambda_fp),
            ("lambda_dice", self.lambda_dice),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{} must be finite and >= 0", name)));
            }
        }
        if self.margin <= 0.0 {
            return Err(Error::Config("margin must be positive".into()));
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be > 0 and weight_decay >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.baseline && self.per_class != 1 {
            return Err(Error::Config("baseline implies per_class = 1".into()));
        }
        Ok(())
    }

    /// Effective prototype count per class (1 under the baseline flag).
    pub fn effective_per_class(&self) -> usize {
        if self.baseline {
            1
        } else {
            self.per_class
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset={}", self.dataset);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "per_class={}", self.per_class);
        let _ = writeln!(s, "feature_dim={}", self.feature_dim);
        let _ = writeln!(s, "grid_rows={}", self.grid_rows);
        let _ = writeln!(s, "grid_cols={}", self.grid_cols);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "temperature={}", self.temperature);
        let _ = writeln!(s, "lambda_pp={}", self.lambda_pp);
        let _ = writeln!(s, "lambda_fp={}", self.lambda_fp);
        let _ = writeln!(s, "lambda_dice={}", self.lambda_dice);
        let _ = writeln!(s, "margin={}", self.margin);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "baseline={}", self.baseline);
        s
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config line '{}'", line)))?;
            kv.insert(k.trim(), v.trim());
        }
        let mut cfg = RunConfig::default();
        for (k, v) in kv {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Applies one key=value override (file keys and CLI flags share names).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value '{}' for '{}'", v, key)))
        }
        match key {
            "dataset" => self.dataset = value.to_string(),
            "num_classes" => self.num_classes = p(key, value)?,
            "per_class" => self.per_class = p(key, value)?,
            "feature_dim" => self.feature_dim = p(key, value)?,
            "grid_rows" => self.grid_rows = p(key, value)?,
            "grid_cols" => self.grid_cols = p(key, value)?,
            "momentum" => self.momentum = p(key, value)?,
            "alpha" => self.alpha = p(key, value)?,
            "temperature" => self.temperature = p(key, value)?,
            "lambda_pp" => self.lambda_pp = p(key, value)?,
            "lambda_fp" => self.lambda_fp = p(key, value)?,
            "lambda_dice" => self.lambda_dice = p(key, value)?,
            "margin" => self.margin = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "baseline" => self.baseline = p(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{}'", other))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
