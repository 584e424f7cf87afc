//! Experiment configuration: a flat `key = value` file format with typed
//! defaults, a single schema table that drives parsing, validation,
//! serialization, and command-line help, and a stable content hash.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::data::fnv1a;
use crate::survival::GridScheme;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line} has no '=' separator")]
    MissingSeparator { line: usize },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("config key `{key}` got `{value}`, expected {expected}")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("config key `{key}` is invalid: {reason}")]
    Constraint { key: &'static str, reason: &'static str },
}

/// Pretraining variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// No pretraining; finetune starts from random initialization.
    None,
    /// Self-supervised: positives are the two views of the same subject.
    Ssl,
    /// Event-supervised: positives share the event/censoring label.
    Essl,
    /// Time- and event-supervised: label positives, time-weighted.
    Tessl,
}

impl FromStr for Mode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "none" => Ok(Mode::None),
            "ssl" => Ok(Mode::Ssl),
            "essl" => Ok(Mode::Essl),
            "tessl" => Ok(Mode::Tessl),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::None => "none",
            Mode::Ssl => "ssl",
            Mode::Essl => "essl",
            Mode::Tessl => "tessl",
        };
        f.write_str(s)
    }
}

/// One entry of the config schema; the table below is the single source of
/// truth for key names, defaults, and help text.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const CONFIG_KEYS: &[KeySpec] = &[
    KeySpec {
        name: "mode",
        default: "tessl",
        help: "pretraining variant: none, ssl, essl, or tessl",
    },
    KeySpec {
        name: "data",
        default: "",
        help: "path to the dataset CSV (a --data flag takes precedence)",
    },
    KeySpec { name: "input_dim", default: "32", help: "feature dimension of the dataset" },
    KeySpec { name: "hidden_dim", default: "128", help: "width of the encoder hidden layers" },
    KeySpec { name: "encoder_dim", default: "256", help: "dimension of the learned representation" },
    KeySpec {
        name: "projection_dim",
        default: "128",
        help: "dimension of the contrastive projection",
    },
    KeySpec { name: "tau", default: "0.07", help: "softmax temperature of the contrastive losses" },
    KeySpec { name: "alpha", default: "1", help: "time weight at the smallest pairwise gap" },
    KeySpec { name: "beta", default: "0.9", help: "time weight at the largest pairwise gap" },
    KeySpec { name: "bins", default: "10", help: "number of discrete time bins" },
    KeySpec {
        name: "grid",
        default: "quantile",
        help: "time grid scheme: quantile or equidistant",
    },
    KeySpec { name: "gamma", default: "0.1", help: "weight of the ranking term in the survival loss" },
    KeySpec { name: "sigma", default: "0.1", help: "bandwidth of the ranking term" },
    KeySpec { name: "batch_size", default: "16", help: "subjects per micro-batch" },
    KeySpec {
        name: "accum_steps",
        default: "8",
        help: "micro-batches accumulated per optimizer step during pretraining",
    },
    KeySpec { name: "pretrain_epochs", default: "50", help: "pretraining epochs" },
    KeySpec { name: "finetune_epochs", default: "50", help: "finetuning epochs" },
    KeySpec { name: "seeds", default: "0,1,2", help: "comma-separated seeds for the protocol" },
    KeySpec { name: "finetune_lr", default: "0.0001", help: "Adam learning rate for finetuning" },
    KeySpec {
        name: "lars_lambda",
        default: "0",
        help: "weight decay in the LARS trust-ratio denominator (0 disables)",
    },
    KeySpec {
        name: "noise_sigma",
        default: "0.1",
        help: "stddev of the additive view-augmentation noise",
    },
    KeySpec {
        name: "mask_prob",
        default: "0.2",
        help: "per-coordinate masking probability of the augmentation",
    },
    KeySpec {
        name: "freeze_encoder",
        default: "false",
        help: "train only the task head during finetuning",
    },
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub data: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub encoder_dim: usize,
    pub projection_dim: usize,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub bins: usize,
    pub grid: GridScheme,
    pub gamma: f64,
    pub sigma: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub seeds: Vec<u64>,
    pub finetune_lr: f64,
    pub lars_lambda: f64,
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub freeze_encoder: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut config = ExperimentConfig {
            mode: Mode::Tessl,
            data: String::new(),
            input_dim: 0,
            hidden_dim: 0,
            encoder_dim: 0,
            projection_dim: 0,
            tau: 0.0,
            alpha: 0.0,
            beta: 0.0,
            bins: 0,
            grid: GridScheme::Quantile,
            gamma: 0.0,
            sigma: 0.0,
            batch_size: 0,
            accum_steps: 0,
            pretrain_epochs: 0,
            finetune_epochs: 0,
            seeds: Vec::new(),
            finetune_lr: 0.0,
            lars_lambda: 0.0,
            noise_sigma: 0.0,
            mask_prob: 0.0,
            freeze_encoder: false,
        };
        for spec in CONFIG_KEYS {
            config.apply(spec.name, spec.default).expect("schema defaults are valid");
        }
        config
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

impl ExperimentConfig {
    /// Sets one key from its textual value. Unknown keys and unparsable
    /// values are errors naming the key; range checks live in `validate`.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |expected: &'static str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected,
        };
        match key {
            "mode" => self.mode = value.parse().map_err(|_| bad("one of none/ssl/essl/tessl"))?,
            "data" => self.data = value.to_string(),
            "input_dim" => self.input_dim = parse_num(key, value, "a positive integer")?,
            "hidden_dim" => self.hidden_dim = parse_num(key, value, "a positive integer")?,
            "encoder_dim" => self.encoder_dim = parse_num(key, value, "a positive integer")?,
            "projection_dim" => self.projection_dim = parse_num(key, value, "a positive integer")?,
            "tau" => self.tau = parse_num(key, value, "a number")?,
            "alpha" => self.alpha = parse_num(key, value, "a number")?,
            "beta" => self.beta = parse_num(key, value, "a number")?,
            "bins" => self.bins = parse_num(key, value, "a positive integer")?,
            "grid" => {
                self.grid = match value {
                    "quantile" => GridScheme::Quantile,
                    "equidistant" => GridScheme::Equidistant,
                    _ => return Err(bad("quantile or equidistant")),
                }
            }
            "gamma" => self.gamma = parse_num(key, value, "a number")?,
            "sigma" => self.sigma = parse_num(key, value, "a number")?,
            "batch_size" => self.batch_size = parse_num(key, value, "a positive integer")?,
            "accum_steps" => self.accum_steps = parse_num(key, value, "a positive integer")?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(key, value, "a positive integer")?,
            "finetune_epochs" => self.finetune_epochs = parse_num(key, value, "a positive integer")?,
            "seeds" => {
                let parsed: Result<Vec<u64>, _> =
                    value.split(',').map(|s| s.trim().parse::<u64>()).collect();
                self.seeds = parsed.map_err(|_| bad("comma-separated unsigned integers"))?;
            }
            "finetune_lr" => self.finetune_lr = parse_num(key, value, "a number")?,
            "lars_lambda" => self.lars_lambda = parse_num(key, value, "a number")?,
            "noise_sigma" => self.noise_sigma = parse_num(key, value, "a number")?,
            "mask_prob" => self.mask_prob = parse_num(key, value, "a number")?,
            "freeze_encoder" => {
                self.freeze_encoder = value.parse().map_err(|_| bad("true or false"))?
            }
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    /// Parses flat `key = value` text over the defaults. Blank lines and
    /// lines starting with `#` are skipped. No range validation here so
    /// overrides can still fix out-of-range file values.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut config = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or(ConfigError::MissingSeparator { line: i + 1 })?;
            config.apply(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Applies one `key=value` override string.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, value) =
            spec.split_once('=').ok_or(ConfigError::MissingSeparator { line: 0 })?;
        self.apply(key.trim(), value.trim())
    }

    /// Reads a config file, layers overrides on top, and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::parse_str(&text)?;
        for spec in overrides {
            config.apply_override(spec)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let checks: &[(&'static str, bool, &'static str)] = &[
            ("input_dim", self.input_dim >= 2, "must be at least 2"),
            ("hidden_dim", self.hidden_dim >= 1, "must be at least 1"),
            ("encoder_dim", self.encoder_dim >= 1, "must be at least 1"),
            ("projection_dim", self.projection_dim >= 1, "must be at least 1"),
            ("tau", self.tau.is_finite() && self.tau > 0.0, "must be a positive number"),
            ("beta", self.beta.is_finite() && self.beta > 0.0, "must be a positive number"),
            (
                "alpha",
                self.alpha.is_finite() && self.alpha >= self.beta,
                "must be finite and at least beta",
            ),
            ("bins", self.bins >= 2, "must be at least 2"),
            ("gamma", self.gamma.is_finite() && self.gamma >= 0.0, "must be nonnegative"),
            ("sigma", self.sigma.is_finite() && self.sigma > 0.0, "must be a positive number"),
            ("batch_size", self.batch_size >= 2, "must be at least 2"),
            ("accum_steps", self.accum_steps >= 1, "must be at least 1"),
            ("pretrain_epochs", self.pretrain_epochs >= 1, "must be at least 1"),
            ("finetune_epochs", self.finetune_epochs >= 1, "must be at least 1"),
            ("seeds", !self.seeds.is_empty(), "must list at least one seed"),
            (
                "finetune_lr",
                self.finetune_lr.is_finite() && self.finetune_lr > 0.0,
                "must be a positive number",
            ),
            (
                "lars_lambda",
                self.lars_lambda.is_finite() && self.lars_lambda >= 0.0,
                "must be nonnegative",
            ),
            (
                "noise_sigma",
                self.noise_sigma.is_finite() && self.noise_sigma >= 0.0,
                "must be nonnegative",
            ),
            ("mask_prob", (0.0..1.0).contains(&self.mask_prob), "must be in [0, 1)"),
        ];
        for &(key, ok, reason) in checks {
            if !ok {
                return Err(ConfigError::Constraint { key, reason });
            }
        }
        Ok(())
    }

    /// Canonical textual form: every schema key once, in schema order.
    /// Parsing the output reproduces the config exactly.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for spec in CONFIG_KEYS {
            out.push_str(spec.name);
            out.push_str(" = ");
            out.push_str(&self.value_of(spec.name));
            out.push('\n');
        }
        out
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "mode" => self.mode.to_string(),
            "data" => self.data.clone(),
            "input_dim" => self.input_dim.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "encoder_dim" => self.encoder_dim.to_string(),
            "projection_dim" => self.projection_dim.to_string(),
            "tau" => self.tau.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "bins" => self.bins.to_string(),
            "grid" => match self.grid {
                GridScheme::Quantile => "quantile".to_string(),
                GridScheme::Equidistant => "equidistant".to_string(),
            },
            "gamma" => self.gamma.to_string(),
            "sigma" => self.sigma.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "accum_steps" => self.accum_steps.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "finetune_epochs" => self.finetune_epochs.to_string(),
            "seeds" => {
                self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
            }
            "finetune_lr" => self.finetune_lr.to_string(),
            "lars_lambda" => self.lars_lambda.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "mask_prob" => self.mask_prob.to_string(),
            "freeze_encoder" => self.freeze_encoder.to_string(),
            _ => unreachable!("value_of called with non-schema key"),
        }
    }

    /// Stable hash of the canonical form, hex-encoded.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a(self.to_config_string().as_bytes()))
    }

    /// Layer widths of the encoder: input, two hidden layers, representation.
    pub fn encoder_dims(&self) -> Vec<usize> {
        vec![self.input_dim, self.hidden_dim, self.hidden_dim, self.encoder_dim]
    }

    /// Subjects contributing to one pretraining optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accum_steps
    }
}
