//! Binary checkpoint: magic `JPKC` | version u32 | config hash (32 bytes) |
//! parameter count u32 | name-sorted parameter blocks (name length u32, UTF-8
//! name, 64-bit tensor encoding) | moment count u32 | moment blocks (name,
//! step u64, first moment, second moment) | cursor (stage u32, epoch u32,
//! global step u64, stage start step u64) | teacher seed u64.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, FormatErrorKind, Result};
use crate::featfile::{encode_tensor, write_atomic, ByteReader, VERSION_F64};
use crate::models::Quartet;
use crate::tensor::Tensor;

use super::adam::{Moments, OptimState};
use super::{Cursor, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JPKC";
pub const CHECKPOINT_VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

/// Everything needed to continue a run bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub params: Vec<(String, Tensor)>,
    pub moments: Vec<(String, Moments)>,
    pub cursor: Cursor,
    pub teacher_seed: u64,
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn take_name(r: &mut ByteReader<'_>) -> Result<String> {
    let len = r.u32()? as usize;
    let bytes = r.bytes(len)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| r.fail(FormatErrorKind::BadHeader))
}

impl Checkpoint {
    pub fn capture(state: &TrainState, config_hash: [u8; 32], teacher_seed: u64) -> Self {
        let store = &state.quartet.store;
        let ids = store.sorted_ids();
        let params = ids.iter().map(|&id| (store.param(id).name.clone(), store.value(id).clone())).collect();
        let moments = ids
            .iter()
            .filter_map(|&id| state.optim.slots[id.index()].as_ref().map(|m| (store.param(id).name.clone(), m.clone())))
            .collect();
        Self { config_hash, params, moments, cursor: state.cursor, teacher_seed }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_name(&mut out, name);
            encode_tensor(&mut out, t, VERSION_F64);
        }
        out.extend_from_slice(&(self.moments.len() as u32).to_le_bytes());
        for (name, m) in &self.moments {
            put_name(&mut out, name);
            out.extend_from_slice(&m.step.to_le_bytes());
            encode_tensor(&mut out, &m.m, VERSION_F64);
            encode_tensor(&mut out, &m.v, VERSION_F64);
        }
        let c = &self.cursor;
        out.extend_from_slice(&c.stage.to_le_bytes());
        out.extend_from_slice(&c.epoch.to_le_bytes());
        out.extend_from_slice(&c.global_step.to_le_bytes());
        out.extend_from_slice(&c.stage_start_step.to_le_bytes());
        out.extend_from_slice(&self.teacher_seed.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, WHAT);
        if r.bytes(4)? != CHECKPOINT_MAGIC {
            return Err(r.fail(FormatErrorKind::BadMagic));
        }
        if r.u32()? != CHECKPOINT_VERSION {
            return Err(r.fail(FormatErrorKind::BadVersion));
        }
        let config_hash: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
        let count = r.u32()?;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = take_name(&mut r)?;
            params.push((name, r.tensor(VERSION_F64)?));
        }
        let count = r.u32()?;
        let mut moments = Vec::new();
        for _ in 0..count {
            let name = take_name(&mut r)?;
            let step = r.u64()?;
            let m = r.tensor(VERSION_F64)?;
            let v = r.tensor(VERSION_F64)?;
            if m.shape() != v.shape() {
                return Err(r.fail(FormatErrorKind::BadHeader));
            }
            moments.push((name, Moments { step, m, v }));
        }
        let cursor = Cursor { stage: r.u32()?, epoch: r.u32()?, global_step: r.u64()?, stage_start_step: r.u64()? };
        let teacher_seed = r.u64()?;
        r.finish()?;
        let sorted = |names: Vec<&String>| names.windows(2).all(|w| w[0] < w[1]);
        if !sorted(params.iter().map(|(n, _)| n).collect()) || !sorted(moments.iter().map(|(n, _)| n).collect()) {
            return Err(r.fail(FormatErrorKind::BadHeader));
        }
        Ok(Self { config_hash, params, moments, cursor, teacher_seed })
    }

    pub fn config_hash_hex(&self) -> String {
        hex::encode(self.config_hash)
    }

    /// Rebuilds the training state for `config`, rejecting a checkpoint made
    /// under a different configuration.
    pub fn restore(&self, config: &RunConfig) -> Result<TrainState> {
        let expected = config.config_hash();
        if expected != self.config_hash {
            return Err(Error::ConfigHash { expected: hex::encode(expected), found: self.config_hash_hex() });
        }
        let mut quartet = Quartet::new(&config.model, config.seed)?;
        if quartet.store.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {} parameters, the model has {}",
                self.params.len(),
                quartet.store.len()
            )));
        }
        for (name, t) in &self.params {
            quartet.store.set(name, t.clone())?;
        }
        let mut optim = OptimState::new(config.schedule.adam, quartet.store.len());
        for (name, m) in &self.moments {
            let id = quartet.store.require(name)?;
            if quartet.store.value(id).shape() != m.m.shape() {
                return Err(Error::shape("checkpoint moments", name.clone()));
            }
            optim.slots[id.index()] = Some(m.clone());
        }
        Ok(TrainState { quartet, optim, cursor: self.cursor })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::QuartetConfig;

    fn tiny() -> RunConfig {
        let model = QuartetConfig {
            feature_dim: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            generator_blocks: 1,
            attention_heads: 1,
            ff_dim: 4,
            vocab_size: 4,
            max_len: 6,
            noise_dim: 2,
            input_dim: 2,
            dropout: 0.0,
        };
        RunConfig { model, ..RunConfig::default() }
    }

    #[test]
    fn encode_decode_encode_is_identical() {
        let cfg = tiny();
        let state = TrainState::fresh(&cfg).unwrap();
        let ck = Checkpoint::capture(&state, cfg.config_hash(), cfg.seed);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        let restored = back.restore(&cfg).unwrap();
        assert_eq!(restored.quartet.store.total_count(), state.quartet.store.total_count());
    }

    #[test]
    fn truncation_and_hash_mismatch() {
        let cfg = tiny();
        let state = TrainState::fresh(&cfg).unwrap();
        let bytes = Checkpoint::capture(&state, cfg.config_hash(), cfg.seed).encode();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(err.to_string(), "truncated checkpoint");
        let other = RunConfig { seed: 5, ..cfg.clone() };
        let err = Checkpoint::decode(&bytes).unwrap().restore(&other).unwrap_err().to_string();
        assert!(err.contains(&other.config_hash_hex()) && err.contains(&cfg.config_hash_hex()), "{err}");
    }
}
