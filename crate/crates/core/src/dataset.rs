//! On-disk corpus: a JSON manifest next to one viseme file and one teacher
//! feature file per sample.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::featfile::{encode_features, read_features, write_atomic};
use crate::synthdata::{generate_corpus, Corpus, PairedSample, Split};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub tokens: Vec<usize>,
    /// Viseme observations, relative to the manifest directory.
    pub visemes: PathBuf,
    /// Teacher features, relative to the manifest directory.
    pub teacher: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    /// Hash of the settings the corpus was generated from.
    pub data_hash: String,
    pub seed: u64,
    pub teacher_digest: String,
    pub splits: BTreeMap<Split, Vec<ManifestEntry>>,
}

impl Manifest {
    pub fn sample_count(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

fn entry_paths(split: Split, id: &str) -> (PathBuf, PathBuf) {
    let dir = PathBuf::from(split.name());
    (dir.join(format!("{id}.video.jpkd")), dir.join(format!("{id}.teacher.jpkd")))
}

/// What [`write_corpus`] did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteOutcome {
    Written,
    /// An identical corpus was already present; the files were rewritten with the same bytes.
    Unchanged,
    /// A corpus from different settings was replaced.
    Replaced,
}

/// Generates the corpus for `config` into `dir`. An existing manifest from
/// different settings is only replaced when `force` is set.
pub fn write_corpus(dir: &Path, config: &RunConfig, force: bool) -> Result<(Manifest, WriteOutcome)> {
    config.validate()?;
    let data_hash = config.data_hash_hex();
    let manifest_path = dir.join(MANIFEST_FILE);
    let outcome = if manifest_path.exists() {
        match Manifest::load(dir) {
            Ok(existing) if existing.data_hash == data_hash => WriteOutcome::Unchanged,
            Ok(existing) if !force => {
                return Err(Error::invalid(format!(
                    "{} was generated from different settings (hash {}, expected {}); pass --force to overwrite",
                    manifest_path.display(),
                    existing.data_hash,
                    data_hash
                )))
            }
            Err(e) if !force => {
                return Err(Error::invalid(format!("unreadable manifest {} ({e}); pass --force to overwrite", manifest_path.display())))
            }
            _ => WriteOutcome::Replaced,
        }
    } else {
        WriteOutcome::Written
    };
    let (world, corpus) = generate_corpus(config.seed, &config.corpus, &config.model)?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut entries = Vec::new();
        for s in corpus.split(split) {
            let (video, teacher) = entry_paths(split, &s.id);
            write_atomic(&dir.join(&video), &encode_features(&s.visemes))?;
            write_atomic(&dir.join(&teacher), &encode_features(&s.teacher))?;
            entries.push(ManifestEntry { id: s.id.clone(), tokens: s.tokens.clone(), visemes: video, teacher });
        }
        splits.insert(split, entries);
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        data_hash,
        seed: config.seed,
        teacher_digest: hex::encode(world.teacher.digest()),
        splits,
    };
    write_atomic(&manifest_path, manifest.to_json()?.as_bytes())?;
    Ok((manifest, outcome))
}

/// Loads the corpus in `dir`, which must have been generated for `config`.
pub fn read_corpus(dir: &Path, config: &RunConfig) -> Result<Corpus> {
    let manifest = Manifest::load(dir)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Schema(format!("manifest format {} is not supported", manifest.format)));
    }
    let expected = config.data_hash_hex();
    if manifest.data_hash != expected {
        return Err(Error::ConfigHash { expected, found: manifest.data_hash });
    }
    let mut corpus = Corpus { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for split in Split::ALL {
        let entries = manifest
            .splits
            .get(&split)
            .ok_or_else(|| Error::Schema(format!("manifest has no {split} split")))?;
        for e in entries {
            let visemes = read_features(&dir.join(&e.visemes))?;
            let teacher = read_features(&dir.join(&e.teacher))?;
            if visemes.rows() != e.tokens.len() || teacher.rows() != e.tokens.len() {
                return Err(Error::Schema(format!("sample {} has mismatched lengths", e.id)));
            }
            corpus.split_mut(split).push(PairedSample { id: e.id.clone(), tokens: e.tokens.clone(), visemes, teacher });
        }
    }
    Ok(corpus)
}
