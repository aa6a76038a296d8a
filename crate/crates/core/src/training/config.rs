use serde::{Deserialize, Serialize};

use crate::dataio::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::{AblationVariant, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Gumbel-Softmax temperature, held constant.
    pub tau: f64,
    /// Gumbel noise during training.
    pub noise: bool,
    /// Weight of the expert-tree loss during pretraining.
    pub tree_loss_weight: f64,
    pub variant: AblationVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            beta1: 0.8,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            pretrain_epochs: 5,
            finetune_epochs: 20,
            tau: 1.0,
            noise: true,
            tree_loss_weight: 1.0,
            variant: AblationVariant::Full,
        }
    }
}

fn config_error(key: &str, msg: &str) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("train.lr", self.lr), ("train.eps", self.eps), ("train.tau", self.tau)];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_error(key, "must be a positive number"));
            }
        }
        for (key, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(config_error(key, "must lie in [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return Err(config_error("train.batch_size", "must be at least 1"));
        }
        if !(self.tree_loss_weight >= 0.0 && self.tree_loss_weight.is_finite()) {
            return Err(config_error("train.tree_loss_weight", "must be a non-negative number"));
        }
        Ok(())
    }
}

/// Everything a run reads from its configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Parses and validates TOML; errors name the offending key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Locates the dotted key an error points at: the enclosing `[section]`
/// plus the key on the offending line (or the backticked unknown field).
fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let msg = e.message().trim().to_string();
    let Some(span) = e.span() else {
        return config_error("<root>", &msg);
    };
    let before = &text[..span.start.min(text.len())];
    let section = before
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field"))
        .map(str::to_string)
        .or_else(|| line.split_once('=').map(|(k, _)| k.trim().to_string()))
        .filter(|k| !k.is_empty() && !k.starts_with('['));
    let key = match (section, key) {
        (Some(s), Some(k)) => format!("{s}.{k}"),
        (None, Some(k)) => k,
        (Some(s), None) => s,
        (None, None) => "<root>".into(),
    };
    config_error(&key, &msg)
}
