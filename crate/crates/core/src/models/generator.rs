use rand_chacha::ChaCha8Rng;

use super::layers::{Init, Linear};
use super::QuartetConfig;
use crate::error::{Error, Result};
use crate::params::{Group, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Residual block `h + fc2(relu(fc1(relu(h))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Maps student features `v` and a per-sequence noise vector `z` toward the
/// teacher embedding space.
///
/// The output is `v + out(relu(h))`; with the zero-initialised out-projection
/// a fresh generator is the identity on `v`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub noise_dim: usize,
    pub input: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub out: Linear,
}

impl Generator {
    pub fn register(store: &mut ParameterStore, rng: &mut ChaCha8Rng, cfg: &QuartetConfig) -> Result<Self> {
        let (d, z) = (cfg.feature_dim, cfg.noise_dim);
        let g = Group::Generator;
        let input = Linear::register(store, rng, "generator.input", g, d + z, d, Init::Xavier)?;
        let blocks = (0..cfg.generator_blocks)
            .map(|i| {
                Ok(ResidualBlock {
                    fc1: Linear::register(store, rng, &format!("generator.block{i}.fc1"), g, d, d, Init::Xavier)?,
                    fc2: Linear::register(store, rng, &format!("generator.block{i}.fc2"), g, d, d, Init::Xavier)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::register(store, rng, "generator.out", g, d, d, Init::Zeros)?;
        Ok(Self { noise_dim: z, input, blocks, out })
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParameterStore, v: Var, z: &Tensor) -> Result<Var> {
        if z.numel() != self.noise_dim {
            return Err(Error::shape("generator", format!("noise has {} values, expected {}", z.numel(), self.noise_dim)));
        }
        let t = tape.value(v).rows();
        let ones = tape.constant(Tensor::filled(&[t, 1], 1.0))?;
        let zrow = tape.constant(z.clone().reshaped(vec![1, self.noise_dim])?)?;
        let zb = tape.matmul(ones, zrow)?;
        let x = tape.concat(&[v, zb])?;
        let mut h = self.input.forward(tape, store, x)?;
        for block in &self.blocks {
            let r = tape.relu(h)?;
            let r = block.fc1.forward(tape, store, r)?;
            let r = tape.relu(r)?;
            let r = block.fc2.forward(tape, store, r)?;
            h = tape.add(h, r)?;
        }
        let r = tape.relu(h)?;
        let delta = self.out.forward(tape, store, r)?;
        tape.add(v, delta)
    }

    pub(crate) fn count(cfg: &QuartetConfig) -> usize {
        let d = cfg.feature_dim;
        Linear::count(d + cfg.noise_dim, d) + cfg.generator_blocks * 2 * Linear::count(d, d) + Linear::count(d, d)
    }
}
