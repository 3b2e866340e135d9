//! Hyperparameters, training strategies, and the flat key=value config
//! file format with flag overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected key=value, found `{text}`")]
    BadLine {
        path: String,
        line: usize,
        text: String,
    },
    #[error("bad value for `{key}`: `{value}`")]
    BadValue { key: String, value: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("invalid hyperparameter: {0}")]
    Invalid(String),
}

/// Adaptation strategy modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Damp,
    Seq2Seq,
    Coarse2FineMix,
    PretrainFinetune,
    ParamShare,
    GradReversal,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Damp => "damp",
            Strategy::Seq2Seq => "seq2seq",
            Strategy::Coarse2FineMix => "coarse2fine_mix",
            Strategy::PretrainFinetune => "pretrain_finetune",
            Strategy::ParamShare => "param_share",
            Strategy::GradReversal => "grad_reversal",
        }
    }
}

impl FromStr for Strategy {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "damp" => Ok(Strategy::Damp),
            "seq2seq" => Ok(Strategy::Seq2Seq),
            "coarse2fine_mix" => Ok(Strategy::Coarse2FineMix),
            "pretrain_finetune" => Ok(Strategy::PretrainFinetune),
            "param_share" => Ok(Strategy::ParamShare),
            "grad_reversal" => Ok(Strategy::GradReversal),
            other => Err(ConfigError::UnknownStrategy(other.to_string())),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// All scalar knobs of the model and optimizer.
#[derive(Debug, Clone)]
pub struct Hyperparams {
    pub embedding_dim: usize,
    /// Total encoder output width; split across the two directions unless
    /// `hidden_per_direction` is set.
    pub hidden: usize,
    pub hidden_per_direction: bool,
    pub r_coarse: f64,
    pub r_fine: f64,
    pub lambda_coarse: f64,
    pub lambda_fine: f64,
    pub dropout: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub rmsprop_decay: f64,
    pub beam: usize,
    pub k_relevant: usize,
    pub max_utterance_len: usize,
    pub max_lf_len: usize,
    /// Train the coarse discriminator head with gradient reversal instead
    /// of the literal confusion objective.
    pub reverse_grad_discriminator: bool,
    /// Let the fine decoder drift from the predicted sketch skeleton.
    pub unconstrained_fine: bool,
    pub clip_norm: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            embedding_dim: 300,
            hidden: 300,
            hidden_per_direction: false,
            r_coarse: 60.0,
            r_fine: 2.0,
            lambda_coarse: 0.4,
            lambda_fine: 0.2,
            dropout: 0.6,
            l2: 1e-5,
            batch_size: 64,
            lr: 1e-3,
            rmsprop_decay: 0.9,
            beam: 3,
            k_relevant: 2,
            max_utterance_len: 128,
            max_lf_len: 256,
            reverse_grad_discriminator: false,
            unconstrained_fine: false,
            clip_norm: None,
        }
    }
}

impl Hyperparams {
    /// Per-direction encoder hidden size.
    pub fn dir_hidden(&self) -> usize {
        if self.hidden_per_direction {
            self.hidden
        } else {
            self.hidden / 2
        }
    }

    /// Encoder output width (and decoder hidden size).
    pub fn enc_width(&self) -> usize {
        2 * self.dir_hidden()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.embedding_dim == 0 || self.hidden == 0 || self.batch_size == 0 || self.beam == 0 {
            return Err(ConfigError::Invalid("sizes must be positive".into()));
        }
        if !self.hidden_per_direction && self.hidden % 2 != 0 {
            return Err(ConfigError::Invalid(
                "total hidden size must be even to split across directions".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.lambda_coarse < 0.0 || self.lambda_fine < 0.0 {
            return Err(ConfigError::Invalid("lambdas must be >= 0".into()));
        }
        if self.r_coarse <= 1.0 {
            return Err(ConfigError::Invalid(format!(
                "r_coarse {} must be > 1",
                self.r_coarse
            )));
        }
        if self.r_fine < 1.0 {
            return Err(ConfigError::Invalid(format!(
                "r_fine {} must be >= 1",
                self.r_fine
            )));
        }
        Ok(())
    }
}

/// Full training run configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub hp: Hyperparams,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub target_fraction: f64,
    pub dev_fraction: f64,
    /// Per-domain relevance query words; domains not listed default to
    /// their own name.
    pub domain_queries: BTreeMap<String, Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Damp,
            hp: Hyperparams::default(),
            epochs: 100,
            patience: 10,
            seed: 1,
            target_fraction: 0.10,
            dev_fraction: 0.20,
            domain_queries: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        match key {
            "strategy" => self.strategy = value.parse()?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad())?,
            "patience" => self.patience = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "target_fraction" => self.target_fraction = value.parse().map_err(|_| bad())?,
            "dev_fraction" => self.dev_fraction = value.parse().map_err(|_| bad())?,
            "embedding_dim" => self.hp.embedding_dim = value.parse().map_err(|_| bad())?,
            "hidden" => self.hp.hidden = value.parse().map_err(|_| bad())?,
            "hidden_per_direction" => {
                self.hp.hidden_per_direction = value.parse().map_err(|_| bad())?
            }
            "r_coarse" => self.hp.r_coarse = value.parse().map_err(|_| bad())?,
            "r_fine" => self.hp.r_fine = value.parse().map_err(|_| bad())?,
            "lambda_coarse" => self.hp.lambda_coarse = value.parse().map_err(|_| bad())?,
            "lambda_fine" => self.hp.lambda_fine = value.parse().map_err(|_| bad())?,
            "dropout" => self.hp.dropout = value.parse().map_err(|_| bad())?,
            "l2" => self.hp.l2 = value.parse().map_err(|_| bad())?,
            "batch_size" => self.hp.batch_size = value.parse().map_err(|_| bad())?,
            "lr" => self.hp.lr = value.parse().map_err(|_| bad())?,
            "rmsprop_decay" => self.hp.rmsprop_decay = value.parse().map_err(|_| bad())?,
            "beam" => self.hp.beam = value.parse().map_err(|_| bad())?,
            "k_relevant" => self.hp.k_relevant = value.parse().map_err(|_| bad())?,
            "max_utterance_len" => self.hp.max_utterance_len = value.parse().map_err(|_| bad())?,
            "max_lf_len" => self.hp.max_lf_len = value.parse().map_err(|_| bad())?,
            "reverse_grad_discriminator" => {
                self.hp.reverse_grad_discriminator = value.parse().map_err(|_| bad())?
            }
            "unconstrained_fine" => {
                self.hp.unconstrained_fine = value.parse().map_err(|_| bad())?
            }
            "clip_norm" => {
                self.hp.clip_norm = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad())?)
                }
            }
            k if k.starts_with("query.") => {
                let domain = &k["query.".len()..];
                self.domain_queries.insert(
                    domain.to_string(),
                    value.split(',').map(str::to_string).collect(),
                );
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = TrainConfig::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                path: path.display().to_string(),
                line: idx + 1,
                text: line.to_string(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn query_words(&self, domain: &str) -> Vec<String> {
        self.domain_queries
            .get(domain)
            .cloned()
            .unwrap_or_else(|| vec![domain.to_string()])
    }
}
