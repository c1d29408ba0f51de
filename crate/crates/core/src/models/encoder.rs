use rand_chacha::ChaCha8Rng;

use super::layers::{positional_encoding, Attention, Dropout, FeedForward, Init, Linear, Norm};
use super::QuartetConfig;
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Group, ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub(crate) const FRONTEND_KERNEL: usize = 3;

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    fn register(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, group: Group, cfg: &QuartetConfig) -> Result<Self> {
        let d = cfg.feature_dim;
        Ok(Self {
            norm1: Norm::register(store, &format!("{name}.norm1"), group, d)?,
            attn: Attention::register(store, rng, &format!("{name}.attn"), group, d, cfg.attention_heads)?,
            norm2: Norm::register(store, &format!("{name}.norm2"), group, d)?,
            ff: FeedForward::register(store, rng, &format!("{name}.ff"), group, d, cfg.ff_dim)?,
        })
    }

    fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParameterStore, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h, None)?;
        let a = drop.apply(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, h)?;
        let f = drop.apply(tape, f)?;
        tape.add(x, f)
    }

    pub(crate) fn count(cfg: &QuartetConfig) -> usize {
        let d = cfg.feature_dim;
        2 * Norm::count(d) + Attention::count(d) + FeedForward::count(d, cfg.ff_dim)
    }
}

/// Temporal convolution frontend, projection, positional encoding and a stack
/// of transformer layers. Maps `[T, input_dim]` to `[T, d]`.
#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub input_dim: usize,
    pub max_len: usize,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub proj: Linear,
    pub layers: Vec<EncoderLayer>,
    pub norm: Norm,
}

impl VideoEncoder {
    pub fn register(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: Group,
        input_dim: usize,
        cfg: &QuartetConfig,
    ) -> Result<Self> {
        let d = cfg.feature_dim;
        let k = FRONTEND_KERNEL;
        let conv_w = store.register(
            format!("{prefix}.frontend.conv.w"),
            group,
            xavier_uniform(rng, &[k * input_dim, d], k * input_dim, k * d),
        )?;
        let conv_b = store.register(format!("{prefix}.frontend.conv.b"), group, Tensor::zeros(&[d]))?;
        let proj = Linear::register(store, rng, &format!("{prefix}.frontend.proj"), group, d, d, Init::Xavier)?;
        let layers = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::register(store, rng, &format!("{prefix}.layer{i}"), group, cfg))
            .collect::<Result<Vec<_>>>()?;
        let norm = Norm::register(store, &format!("{prefix}.norm"), group, d)?;
        Ok(Self { input_dim, max_len: cfg.max_len, conv_w, conv_b, proj, layers, norm })
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParameterStore, x: Var, drop: &mut Dropout) -> Result<Var> {
        let (t, width) = (tape.value(x).rows(), tape.value(x).cols());
        if width != self.input_dim {
            return Err(Error::shape("encoder", format!("input width {width}, expected {}", self.input_dim)));
        }
        if t > self.max_len {
            return Err(Error::invalid(format!("sequence of {t} frames exceeds the maximum length {}", self.max_len)));
        }
        let w = tape.param(store, self.conv_w);
        let b = tape.param(store, self.conv_b);
        let h = tape.conv1d(x, w, b)?;
        let h = tape.relu(h)?;
        let h = self.proj.forward(tape, store, h)?;
        let pe = tape.constant(positional_encoding(t, tape.value(h).cols()))?;
        let mut h = tape.add(h, pe)?;
        for layer in &self.layers {
            h = layer.forward(tape, store, h, drop)?;
        }
        self.norm.forward(tape, store, h)
    }

    pub(crate) fn count(input_dim: usize, cfg: &QuartetConfig) -> usize {
        let d = cfg.feature_dim;
        FRONTEND_KERNEL * input_dim * d
            + d
            + Linear::count(d, d)
            + cfg.encoder_layers * EncoderLayer::count(cfg)
            + Norm::count(d)
    }
}
