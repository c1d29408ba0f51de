use rand_chacha::ChaCha8Rng;

use super::layers::{Init, Linear};
use super::QuartetConfig;
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Group, ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub(crate) const TEMPORAL_CHANNELS: usize = 16;
pub(crate) const PLANE_CHANNELS: usize = 4;
const KERNEL: usize = 3;

/// Hybrid discriminator scoring a whole `[T, d]` feature map.
///
/// One branch convolves along time with the features as channels, the other
/// convolves the feature map as a single-channel image. Each branch ends in a
/// zero-initialised linear read-out averaged over positions; the score is the
/// mean of the two branches.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub feature_dim: usize,
    pub temporal_w: ParamId,
    pub temporal_b: ParamId,
    pub temporal_out: Linear,
    pub plane_w: ParamId,
    pub plane_b: ParamId,
    pub plane_out: Linear,
}

impl Discriminator {
    pub fn register(store: &mut ParameterStore, rng: &mut ChaCha8Rng, cfg: &QuartetConfig) -> Result<Self> {
        let d = cfg.feature_dim;
        let g = Group::Discriminator;
        let (tc, pc) = (TEMPORAL_CHANNELS, PLANE_CHANNELS);
        let temporal_w = store.register(
            "discriminator.temporal.conv.w",
            g,
            xavier_uniform(rng, &[KERNEL * d, tc], KERNEL * d, KERNEL * tc),
        )?;
        let temporal_b = store.register("discriminator.temporal.conv.b", g, Tensor::zeros(&[tc]))?;
        let temporal_out = Linear::register(store, rng, "discriminator.temporal.out", g, tc, 1, Init::Zeros)?;
        let plane_w = store.register(
            "discriminator.plane.conv.w",
            g,
            xavier_uniform(rng, &[KERNEL * KERNEL, pc], KERNEL * KERNEL, KERNEL * KERNEL * pc),
        )?;
        let plane_b = store.register("discriminator.plane.conv.b", g, Tensor::zeros(&[pc]))?;
        let plane_out = Linear::register(store, rng, "discriminator.plane.out", g, pc, 1, Init::Zeros)?;
        Ok(Self { feature_dim: d, temporal_w, temporal_b, temporal_out, plane_w, plane_b, plane_out })
    }

    /// One scalar score for the feature map `f`.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParameterStore, f: Var) -> Result<Var> {
        if tape.value(f).cols() != self.feature_dim {
            return Err(Error::shape(
                "discriminator",
                format!("feature width {}, expected {}", tape.value(f).cols(), self.feature_dim),
            ));
        }
        let w = tape.param(store, self.temporal_w);
        let b = tape.param(store, self.temporal_b);
        let h = tape.conv1d(f, w, b)?;
        let h = tape.relu(h)?;
        let s = self.temporal_out.forward(tape, store, h)?;
        let temporal = tape.mean(s)?;

        let w = tape.param(store, self.plane_w);
        let b = tape.param(store, self.plane_b);
        let h = tape.conv2d(f, w, b)?;
        let h = tape.relu(h)?;
        let s = self.plane_out.forward(tape, store, h)?;
        let plane = tape.mean(s)?;

        let both = tape.add(temporal, plane)?;
        tape.scale(both, 0.5)
    }

    pub(crate) fn count(cfg: &QuartetConfig) -> usize {
        let d = cfg.feature_dim;
        KERNEL * d * TEMPORAL_CHANNELS
            + TEMPORAL_CHANNELS
            + Linear::count(TEMPORAL_CHANNELS, 1)
            + KERNEL * KERNEL * PLANE_CHANNELS
            + PLANE_CHANNELS
            + Linear::count(PLANE_CHANNELS, 1)
    }
}
