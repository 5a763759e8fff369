//! Versioned JSON checkpoints for the language model and the coherence
//! ranker. A checkpoint is self-contained: it carries the vocabulary it was
//! trained over, so loading never depends on regenerating the corpus.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LMParams;
use crate::ranker::CoherenceModel;
use crate::vocab::Vocab;

/// Bumped whenever the serialized layout changes incompatibly.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmCheckpoint {
    pub version: u32,
    pub vocab: Vocab,
    pub params: LMParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankerCheckpoint {
    pub version: u32,
    pub vocab: Vocab,
    pub model: CoherenceModel,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let s = serde_json::to_string(value)
        .map_err(|e| Error::Invalid(format!("serialize checkpoint: {e}")))?;
    fs::write(path, s)?;
    Ok(())
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    // Check the version first so mismatches fail loudly as such rather than
    // as an opaque field error.
    let probe: VersionProbe = serde_json::from_str(&s).map_err(|e| Error::ParseError {
        line: e.line(),
        msg: e.to_string(),
    })?;
    if probe.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            got: probe.version,
        });
    }
    serde_json::from_str(&s).map_err(|e| Error::ParseError {
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn save_lm(params: &LMParams, vocab: &Vocab, path: &Path) -> Result<()> {
    save_json(
        &LmCheckpoint {
            version: CHECKPOINT_VERSION,
            vocab: vocab.clone(),
            params: params.clone(),
        },
        path,
    )
}

pub fn load_lm(path: &Path) -> Result<LmCheckpoint> {
    let mut ckpt: LmCheckpoint = load_json(path)?;
    ckpt.vocab.rebuild_index();
    if ckpt.params.shape.vocab != ckpt.vocab.size() {
        return Err(Error::SchemaError {
            field: "params.shape.vocab".into(),
        });
    }
    ckpt.params.check_len(1)?;
    Ok(ckpt)
}

pub fn save_ranker(model: &CoherenceModel, vocab: &Vocab, path: &Path) -> Result<()> {
    save_json(
        &RankerCheckpoint {
            version: CHECKPOINT_VERSION,
            vocab: vocab.clone(),
            model: model.clone(),
        },
        path,
    )
}

pub fn load_ranker(path: &Path) -> Result<RankerCheckpoint> {
    let mut ckpt: RankerCheckpoint = load_json(path)?;
    ckpt.vocab.rebuild_index();
    if ckpt.model.encoder.shape.vocab != ckpt.vocab.size() {
        return Err(Error::SchemaError {
            field: "model.encoder.shape.vocab".into(),
        });
    }
    Ok(ckpt)
}

/// Parses an LM checkpoint from raw bytes (shared with the fuzz target).
pub fn parse_lm_bytes(bytes: &[u8]) -> Result<LmCheckpoint> {
    let s = std::str::from_utf8(bytes).map_err(|_| Error::Invalid("not utf-8".into()))?;
    let probe: VersionProbe = serde_json::from_str(s).map_err(|e| Error::ParseError {
        line: e.line(),
        msg: e.to_string(),
    })?;
    if probe.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            got: probe.version,
        });
    }
    let mut ckpt: LmCheckpoint = serde_json::from_str(s).map_err(|e| Error::ParseError {
        line: e.line(),
        msg: e.to_string(),
    })?;
    ckpt.vocab.rebuild_index();
    Ok(ckpt)
}
