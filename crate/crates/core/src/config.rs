//! Run configuration: one TOML document, environment overrides, and a stable hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{BiasProfile, SynthSpec};
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::matching::LossWeights;
use crate::model::Toggles;
use crate::visual_debias::Reduction;

/// Prefix of environment variables overriding config keys, e.g. `BIMA_TRAIN__EPOCHS=5`.
pub const ENV_PREFIX: &str = "BIMA_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Existing JSONL corpus; when absent a synthetic corpus is generated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    /// Word → POS class map used for phrase extraction on non-synthetic corpora.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    pub n_pairs: usize,
    pub eval_size: usize,
    pub profile: BiasProfile,
    /// Shifted profile used for transfer evaluation.
    pub ood_profile: BiasProfile,
    pub synth: SynthSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            vocab: None,
            lexicon: None,
            n_pairs: 2200,
            eval_size: 200,
            profile: BiasProfile {
                visual_dominance: 0.6,
                textual_bias_rate: 0.4,
                seed: 1,
            },
            ood_profile: BiasProfile {
                visual_dominance: 0.75,
                textual_bias_rate: 0.6,
                seed: 2,
            },
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs of the plain contrastive stage that yields the frozen matcher
    /// and the initialization of every trained model.
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub kappa: usize,
    pub k_samples: usize,
    pub cap_loss_reduction: Reduction,
    pub weights: LossWeights,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            pretrain_epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            min_lr: 0.0,
            warmup_epochs: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            kappa: 20,
            k_samples: 1,
            cap_loss_reduction: Reduction::Mean,
            weights: LossWeights::default(),
            tau_init: 50.0,
            tau_min: 1.0,
            tau_max: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub toggles: Toggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            toggles: Toggles::all_on(),
        }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses an override value as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `path` (already split into keys) inside a TOML table.
pub fn set_key(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {p:?} is not a table")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let table: toml::Table = s.parse().map_err(cfg_err)?;
        Self::from_table(table, std::iter::empty())
    }

    /// Builds the config from a document plus `(KEY, value)` overrides using
    /// `BIMA_SECTION__KEY` naming.
    pub fn from_table<I>(mut table: toml::Table, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != "BIMA_LOG")
            .collect();
        overrides.sort();
        for (k, v) in overrides {
            let path: Vec<String> = k[ENV_PREFIX.len()..]
                .split("__")
                .map(|s| s.to_ascii_lowercase())
                .collect();
            set_key(&mut table, &path, parse_value(&v))?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (or defaults when `path` is `None`) and applies the
    /// process environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let table = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        Self::from_table(table, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.profile.validate()?;
        self.corpus.ood_profile.validate()?;
        self.train.weights.validate()?;
        let t = &self.train;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if t.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if t.kappa == 0 {
            return bad("kappa must be at least 1");
        }
        if t.k_samples == 0 {
            return bad("k_samples must be at least 1");
        }
        if !(t.lr >= 0.0 && t.min_lr >= 0.0 && t.warmup_epochs >= 0.0 && t.weight_decay >= 0.0) {
            return bad("learning-rate settings must be non-negative");
        }
        if !(0.0 < t.tau_min && t.tau_min <= t.tau_init && t.tau_init <= t.tau_max) {
            return bad("need 0 < tau_min <= tau_init <= tau_max");
        }
        if self.corpus.path.is_none() && self.corpus.n_pairs == 0 {
            return bad("n_pairs must be at least 1");
        }
        if self.corpus.eval_size == 0 {
            return bad("eval_size must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(cfg_err)
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml_str("[train]\nepoch = 3\n").unwrap_err();
        assert!(e.is_config_error());
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn env_overrides_apply() {
        let env = vec![
            ("BIMA_TRAIN__EPOCHS".to_string(), "3".to_string()),
            ("BIMA_TOGGLES__ENTITIES".to_string(), "false".to_string()),
            ("BIMA_TRAIN__CAP_LOSS_REDUCTION".to_string(), "sum".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ];
        let c = RunConfig::from_table(toml::Table::new(), env).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert!(!c.toggles.entities);
        assert_eq!(c.train.cap_loss_reduction, Reduction::Sum);
        assert_ne!(c.hash().unwrap(), RunConfig::default().hash().unwrap());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::from_toml_str("[train]\nbatch_size = 1\n").unwrap_err().is_config_error());
        let e = RunConfig::from_toml_str(
            "[corpus.profile]\nvisual_dominance = 1.5\ntextual_bias_rate = 0.1\nseed = 0\n",
        )
        .unwrap_err();
        assert!(e.is_config_error());
    }
}
