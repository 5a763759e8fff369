//! Run configuration: one TOML tree drives every CLI command. Unknown keys
//! are rejected so typos fail loudly instead of silently using defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::DEFAULT_TAU_KL;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub lm_train: TrainConfig,
    pub ranker_train: TrainConfig,
    pub decode: DecodeSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_stories: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub mode: String,
    pub workers: usize,
    pub prefix_mode: bool,
    pub tau_kl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub lm_checkpoint: PathBuf,
    pub ranker_checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusSection::default(),
            lm_train: TrainConfig::default(),
            ranker_train: TrainConfig {
                epochs: 50,
                lr: 2e-3,
                ..TrainConfig::default()
            },
            decode: DecodeSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_stories: 500,
            seed: 0,
        }
    }
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            mode: "delorean".into(),
            workers: 1,
            prefix_mode: false,
            tau_kl: DEFAULT_TAU_KL,
        }
    }
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset: "dataset.jsonl".into(),
            lm_checkpoint: "lm.ckpt.json".into(),
            ranker_checkpoint: "ranker.ckpt.json".into(),
            out_dir: "run".into(),
        }
    }
}

/// Parses and sanity-checks a TOML run configuration.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigError(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm_train.validate()?;
        self.ranker_train.validate()?;
        if self.corpus.n_stories == 0 {
            return Err(Error::ConfigError("corpus.n_stories must be > 0".into()));
        }
        if self.decode.workers == 0 {
            return Err(Error::ConfigError("decode.workers must be > 0".into()));
        }
        if !(self.decode.tau_kl > 0.0) {
            return Err(Error::ConfigError("decode.tau_kl must be > 0".into()));
        }
        self.decode.mode.parse::<crate::pipeline::RunMode>()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigError(e.to_string()))
    }
}
