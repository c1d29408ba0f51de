//! Run configuration and its canonical hashes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::Mode;
use crate::models::QuartetConfig;
use crate::synthdata::CorpusSpec;
use crate::trainer::StageSchedule;

/// Settings for decoding during evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Decoding stops after this many tokens even without an end marker.
    pub max_decode_steps: usize,
    /// Number of worst samples listed in a report.
    pub worst: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { max_decode_steps: 20, worst: 5 }
    }
}

/// Everything a command needs. One master seed is fanned into named streams
/// (corpus, init, shuffle, noise-z, ...).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub model: QuartetConfig,
    pub schedule: StageSchedule,
    pub eval: EvalSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub mode: Mode,
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    seed: u64,
    corpus: &'a CorpusSpec,
    model: &'a QuartetConfig,
    schedule: &'a StageSchedule,
    eval: &'a EvalSettings,
}

#[derive(Serialize)]
struct HashedData<'a> {
    seed: u64,
    corpus: &'a CorpusSpec,
    model: &'a QuartetConfig,
}

fn sha256_json<T: Serialize>(value: &T) -> [u8; 32] {
    let bytes = serde_json::to_vec(value).expect("configuration serialises");
    Sha256::digest(&bytes).into()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate(&self.model)?;
        self.schedule.validate()?;
        if self.eval.max_decode_steps == 0 {
            return Err(Error::invalid("eval.max_decode_steps must be positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("configuration serialises");
        s.push('\n');
        s
    }

    /// Hash of every setting that affects numbers: the output directory and
    /// the evaluation mode are excluded, so both arms of an experiment can
    /// share checkpoints.
    pub fn config_hash(&self) -> [u8; 32] {
        sha256_json(&HashedConfig {
            seed: self.seed,
            corpus: &self.corpus,
            model: &self.model,
            schedule: &self.schedule,
            eval: &self.eval,
        })
    }

    pub fn config_hash_hex(&self) -> String {
        hex::encode(self.config_hash())
    }

    /// Hash of the settings the generated corpus depends on.
    pub fn data_hash_hex(&self) -> String {
        hex::encode(sha256_json(&HashedData { seed: self.seed, corpus: &self.corpus, model: &self.model }))
    }
}
