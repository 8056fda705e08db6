//! Run configuration files.
//!
//! Grammar: one `key = value` pair per line; blank lines and lines starting
//! with `#` are ignored; surrounding whitespace is trimmed. A key may appear
//! once. Unknown keys are rejected. Booleans are `true` or `false`.
//!
//! | key                          | meaning                                   |
//! |------------------------------|-------------------------------------------|
//! | `command`                    | subcommand that wrote the file (informational) |
//! | `data`                       | dataset directory                         |
//! | `synthetic`                  | generate data instead of reading `data`   |
//! | `synth.subjects_per_class`   | synthetic subjects per class              |
//! | `synth.walk_seconds`         | synthetic walk length                     |
//! | `synth.walks_per_subject`    | synthetic walks per subject               |
//! | `synth.separation`           | class separation (0 = indistinguishable)  |
//! | `synth.permute_labels`       | shuffle labels across subjects            |
//! | `variant`                    | `full`, `B` or `C`                        |
//! | `learning_rate`, `batch_size`, `max_epochs`, `min_delta`, `patience` | training |
//! | `dropout`, `early_stopping`  | training switches                         |
//! | `k`                          | folds (≥ 2)                               |
//! | `seed`                       | run seed                                  |
//! | `validation_fraction`        | subjects held out for early stopping      |
//! | `out`                        | output directory                          |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gaitformer_core::data::{permute_subject_labels, WalkRecord, SAMPLE_RATE_HZ};
use gaitformer_core::eval::CrossValConfig;
use gaitformer_core::synth::{synth_dataset, SynthConfig};
use gaitformer_core::train::TrainConfig;
use gaitformer_core::Variant;

use crate::error::{Error, Result};
use crate::walkfile::load_dataset;

/// Environment variable consulted when no data directory is configured.
pub const DATA_ENV: &str = "GAITFORMER_DATA";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub subjects_per_class: usize,
    pub walk_seconds: f64,
    pub walks_per_subject: u32,
    pub separation: f64,
    pub permute_labels: bool,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            subjects_per_class: 8,
            walk_seconds: 30.0,
            walks_per_subject: 1,
            separation: 1.0,
            permute_labels: false,
        }
    }
}

impl SynthSettings {
    pub fn generate(&self, seed: u64) -> Result<Vec<WalkRecord>> {
        let samples = (self.walk_seconds * SAMPLE_RATE_HZ).round();
        if samples.is_nan() || samples < 1.0 {
            return Err(Error::Config(format!(
                "walk length {} s is too short",
                self.walk_seconds
            )));
        }
        let config = SynthConfig {
            walks_per_subject: self.walks_per_subject,
            ..SynthConfig::new(self.subjects_per_class, samples as usize, seed, self.separation)
        };
        let walks = synth_dataset(&config)?;
        if self.permute_labels {
            Ok(permute_subject_labels(&walks, seed)?)
        } else {
            Ok(walks)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub data: Option<PathBuf>,
    pub synthetic: bool,
    pub synth: SynthSettings,
    pub variant: Variant,
    pub train: TrainConfig,
    pub k: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            data: None,
            synthetic: false,
            synth: SynthSettings::default(),
            variant: Variant::Full,
            train: TrainConfig::default(),
            k: 10,
            seed: 0,
            validation_fraction: 0.1,
            out: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

/// Splits config text into key/value pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if seen.insert(key.to_string(), i + 1).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "command" => self.command = value.to_string(),
            "data" => self.data = Some(PathBuf::from(value)),
            "synthetic" => self.synthetic = parse_value(key, value)?,
            "synth.subjects_per_class" => self.synth.subjects_per_class = parse_value(key, value)?,
            "synth.walk_seconds" => self.synth.walk_seconds = parse_value(key, value)?,
            "synth.walks_per_subject" => self.synth.walks_per_subject = parse_value(key, value)?,
            "synth.separation" => self.synth.separation = parse_value(key, value)?,
            "synth.permute_labels" => self.synth.permute_labels = parse_value(key, value)?,
            "variant" => {
                self.variant = value
                    .parse()
                    .map_err(|e: gaitformer_core::Error| Error::Config(e.to_string()))?
            }
            "learning_rate" => self.train.learning_rate = parse_value(key, value)?,
            "batch_size" => self.train.batch_size = parse_value(key, value)?,
            "max_epochs" => self.train.max_epochs = parse_value(key, value)?,
            "min_delta" => self.train.min_delta = parse_value(key, value)?,
            "patience" => self.train.patience = parse_value(key, value)?,
            "dropout" => self.train.dropout_enabled = parse_value(key, value)?,
            "early_stopping" => self.train.early_stopping = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "validation_fraction" => self.validation_fraction = parse_value(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut c = RunConfig::default();
        c.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k = {}, need at least 2", self.k)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Training settings with the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn crossval_config(&self) -> CrossValConfig {
        CrossValConfig {
            validation_fraction: self.validation_fraction,
            ..CrossValConfig::new(self.variant, self.train_config(), self.k, self.seed)
        }
    }

    /// Fills `data` from the environment when neither a directory nor
    /// synthetic data is configured.
    pub fn resolve_data_from_env(&mut self) {
        if !self.synthetic && self.data.is_none() {
            if let Some(dir) = std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()) {
                self.data = Some(PathBuf::from(dir));
            }
        }
    }

    /// Loads or generates the walks this run uses.
    pub fn load_walks(&self) -> Result<Vec<WalkRecord>> {
        if self.synthetic {
            return self.synth.generate(self.seed);
        }
        let dir = self.data.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "no data source: pass --data, set {DATA_ENV}, or use --synthetic"
            ))
        })?;
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "data directory {} does not exist",
                dir.display()
            )));
        }
        load_dataset(dir)
    }

    /// The fully resolved configuration in the file grammar, keys in a fixed
    /// order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("command", self.command.clone());
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        kv("synthetic", self.synthetic.to_string());
        kv("synth.subjects_per_class", self.synth.subjects_per_class.to_string());
        kv("synth.walk_seconds", self.synth.walk_seconds.to_string());
        kv("synth.walks_per_subject", self.synth.walks_per_subject.to_string());
        kv("synth.separation", self.synth.separation.to_string());
        kv("synth.permute_labels", self.synth.permute_labels.to_string());
        kv("variant", self.variant.to_string());
        kv("learning_rate", self.train.learning_rate.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("max_epochs", self.train.max_epochs.to_string());
        kv("min_delta", self.train.min_delta.to_string());
        kv("patience", self.train.patience.to_string());
        kv("dropout", self.train.dropout_enabled.to_string());
        kv("early_stopping", self.train.early_stopping.to_string());
        kv("k", self.k.to_string());
        kv("seed", self.seed.to_string());
        kv("validation_fraction", self.validation_fraction.to_string());
        if let Some(o) = &self.out {
            kv("out", o.display().to_string());
        }
        s
    }
}
