//! The encoder / generator / discriminator / decoder quartet and the frozen
//! teacher encoder.

mod decoder;
mod discriminator;
mod encoder;
mod generator;
pub mod layers;

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use decoder::{Decoder, DecoderLayer, DecoderOutput};
pub use discriminator::Discriminator;
pub use encoder::{EncoderLayer, VideoEncoder};
pub use generator::{Generator, ResidualBlock};
pub use layers::Dropout;

use crate::error::{Error, Result};
use crate::params::{Group, GroupSet, ParameterStore};
use crate::rng::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Sizes of the four models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuartetConfig {
    pub feature_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub generator_blocks: usize,
    pub attention_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub noise_dim: usize,
    /// Width of one video frame observation.
    pub input_dim: usize,
    pub dropout: f64,
}

impl Default for QuartetConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            generator_blocks: 2,
            attention_heads: 4,
            ff_dim: 64,
            vocab_size: 24,
            max_len: 12,
            noise_dim: 8,
            input_dim: 12,
            dropout: 0.0,
        }
    }
}

impl QuartetConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("feature_dim", self.feature_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("generator_blocks", self.generator_blocks),
            ("attention_heads", self.attention_heads),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("noise_dim", self.noise_dim),
            ("input_dim", self.input_dim),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model.{name} must be positive")));
        }
        if !self.feature_dim.is_multiple_of(self.attention_heads) {
            return Err(Error::invalid(format!(
                "model.feature_dim {} is not divisible by model.attention_heads {}",
                self.feature_dim, self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form parameter count of one group.
    pub fn expected_count(&self, group: Group) -> usize {
        match group {
            Group::Encoder => VideoEncoder::count(self.input_dim, self),
            Group::Generator => Generator::count(self),
            Group::Discriminator => Discriminator::count(self),
            Group::Decoder => Decoder::count(self),
        }
    }
}

/// Registered parameter count per group next to its closed-form value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub rows: Vec<(Group, usize, usize)>,
}

impl ParamReport {
    pub fn matches(&self) -> bool {
        self.rows.iter().all(|(_, actual, expected)| actual == expected)
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>10} {:>10}", "group", "registered", "expected")?;
        for (g, actual, expected) in &self.rows {
            writeln!(f, "{:<14} {:>10} {:>10}", g.name(), actual, expected)?;
        }
        Ok(())
    }
}

/// All four trainable models sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Quartet {
    pub config: QuartetConfig,
    pub store: ParameterStore,
    pub encoder: VideoEncoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub decoder: Decoder,
}

impl Quartet {
    /// Fresh models; each group draws from its own stream of `seed`.
    pub fn new(config: &QuartetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let rng = |g: Group| stream(seed, "init", &[g as u64]);
        let encoder =
            VideoEncoder::register(&mut store, &mut rng(Group::Encoder), "encoder", Group::Encoder, config.input_dim, config)?;
        let generator = Generator::register(&mut store, &mut rng(Group::Generator), config)?;
        let discriminator = Discriminator::register(&mut store, &mut rng(Group::Discriminator), config)?;
        let decoder = Decoder::register(&mut store, &mut rng(Group::Decoder), config)?;
        Ok(Self { config: config.clone(), store, encoder, generator, discriminator, decoder })
    }

    pub fn parameter_report(&self) -> ParamReport {
        let rows = Group::ALL
            .iter()
            .map(|&g| (g, self.store.count(g), self.config.expected_count(g)))
            .collect();
        ParamReport { rows }
    }

    /// Encoder features `v` for one observation sequence, without gradients.
    pub fn encode(&self, x_v: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(x_v.clone())?;
        let v = self.encoder.forward(&mut tape, &self.store, x, &mut Dropout::off())?;
        Ok(tape.value(v).clone())
    }

    /// Generator output `G(z, v)`, without gradients.
    pub fn generate(&self, v: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::with_param_grads(GroupSet::EMPTY);
        let vv = tape.constant(v.clone())?;
        let g = self.generator.forward(&mut tape, &self.store, vv, z)?;
        Ok(tape.value(g).clone())
    }

    /// Discriminator score, without gradients.
    pub fn discriminate(&self, f: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone())?;
        let s = self.discriminator.forward(&mut tape, &self.store, fv)?;
        Ok(tape.value(s).item())
    }
}

/// A standard-normal noise vector for the generator.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Tensor {
    let data = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_parts(vec![dim], data)
}

/// Frozen, seed-determined encoder of clean token sequences producing the
/// "audio" features the student is distilled toward.
#[derive(Clone, Debug)]
pub struct TeacherEncoder {
    pub seed: u64,
    pub vocab_size: usize,
    store: ParameterStore,
    encoder: VideoEncoder,
}

impl TeacherEncoder {
    /// Same architecture family as the video encoder over one-hot tokens
    /// (blank column included). The centre tap of the front-end convolution
    /// is scaled by `gain`, so a frame is dominated by its own token, and the
    /// output projections of every attention and feed-forward branch are
    /// scaled by `mixing`, which sets how much context leaks across frames.
    pub fn new(config: &QuartetConfig, seed: u64, gain: f64, mixing: f64) -> Result<Self> {
        config.validate()?;
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::invalid(format!("teacher gain must be positive, got {gain}")));
        }
        if !(mixing.is_finite() && mixing >= 0.0) {
            return Err(Error::invalid(format!("teacher mixing must be non-negative, got {mixing}")));
        }
        let mut store = ParameterStore::new();
        let mut rng = stream(seed, "teacher", &[]);
        let cin = config.vocab_size + 1;
        let encoder = VideoEncoder::register(&mut store, &mut rng, "teacher", Group::Encoder, cin, config)?;
        let w = store.value(encoder.conv_w);
        let (rows, cout) = (w.shape()[0], w.shape()[1]);
        let centre = rows / cin / 2;
        let mut data = w.data().to_vec();
        for v in &mut data[centre * cin * cout..(centre + 1) * cin * cout] {
            *v *= gain;
        }
        *store.value_mut(encoder.conv_w) = Tensor::from_parts(vec![rows, cout], data);
        let branches: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.ends_with(".wo.w") || p.name.ends_with(".fc2.w"))
            .map(|(id, _)| id)
            .collect();
        for id in branches {
            let scaled = store.value(id).map(|v| v * mixing);
            *store.value_mut(id) = scaled;
        }
        store.set_trainable_groups(GroupSet::EMPTY);
        Ok(Self { seed, vocab_size: config.vocab_size, store, encoder })
    }

    /// Teacher features for `tokens`, rounded to 32-bit precision so that
    /// in-memory and on-disk corpora agree exactly.
    pub fn features(&self, tokens: &[usize]) -> Result<Tensor> {
        let x = Tensor::one_hot(tokens, self.vocab_size + 1)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let a = self.encoder.forward(&mut tape, &self.store, xv, &mut Dropout::off())?;
        Ok(tape.value(a).narrowed_to_f32())
    }

    pub fn digest(&self) -> [u8; 32] {
        self.store.group_digest(Group::Encoder)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_counts_match_closed_form() {
        let q = Quartet::new(&QuartetConfig::default(), 3).unwrap();
        let report = q.parameter_report();
        assert!(report.matches(), "{report}");
    }

    #[test]
    fn fresh_generator_is_identity() {
        let cfg = QuartetConfig::default();
        let q = Quartet::new(&cfg, 1).unwrap();
        let v = Tensor::new(vec![3, 32], (0..96).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let z = sample_noise(&mut stream(0, "z", &[]), cfg.noise_dim);
        assert_eq!(q.generate(&v, &z).unwrap(), v);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = QuartetConfig { feature_dim: 30, ..QuartetConfig::default() };
        assert!(Quartet::new(&cfg, 1).is_err());
    }

    #[test]
    fn teacher_is_deterministic() {
        let cfg = QuartetConfig::default();
        let a = TeacherEncoder::new(&cfg, 9, 1.5, 0.1).unwrap().features(&[1, 5, 7]).unwrap();
        let b = TeacherEncoder::new(&cfg, 9, 1.5, 0.1).unwrap().features(&[1, 5, 7]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 32]);
    }
}
