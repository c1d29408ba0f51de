use rand_chacha::ChaCha8Rng;

use super::layers::{causal_mask, positional_encoding, Attention, Dropout, FeedForward, Init, Linear, Norm};
use super::QuartetConfig;
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Group, ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pre-norm transformer decoder layer: masked self-attention, cross-attention
/// over the memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: Norm,
    pub self_attn: Attention,
    pub norm2: Norm,
    pub cross_attn: Attention,
    pub norm3: Norm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    fn register(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, cfg: &QuartetConfig) -> Result<Self> {
        let (d, g, h) = (cfg.feature_dim, Group::Decoder, cfg.attention_heads);
        Ok(Self {
            norm1: Norm::register(store, &format!("{name}.norm1"), g, d)?,
            self_attn: Attention::register(store, rng, &format!("{name}.self_attn"), g, d, h)?,
            norm2: Norm::register(store, &format!("{name}.norm2"), g, d)?,
            cross_attn: Attention::register(store, rng, &format!("{name}.cross_attn"), g, d, h)?,
            norm3: Norm::register(store, &format!("{name}.norm3"), g, d)?,
            ff: FeedForward::register(store, rng, &format!("{name}.ff"), g, d, cfg.ff_dim)?,
        })
    }

    fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParameterStore,
        x: Var,
        memory: Var,
        mask: Var,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let a = self.self_attn.forward(tape, store, h, h, Some(mask))?;
        let a = drop.apply(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let c = self.cross_attn.forward(tape, store, h, memory, None)?;
        let c = drop.apply(tape, c)?;
        let x = tape.add(x, c)?;
        let h = self.norm3.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, h)?;
        let f = drop.apply(tape, f)?;
        tape.add(x, f)
    }

    pub(crate) fn count(cfg: &QuartetConfig) -> usize {
        let d = cfg.feature_dim;
        3 * Norm::count(d) + 2 * Attention::count(d) + FeedForward::count(d, cfg.ff_dim)
    }
}

/// Outputs of a teacher-forced decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `[U+1, V+2]`: row `u` predicts the token after input position `u`.
    pub logits: Var,
    /// `[T, V+1]` CTC head over the memory, blank in column 0.
    pub ctc_logits: Var,
}

/// Attention decoder with a CTC head on its memory.
///
/// Token ids: blank 0, content `1..=V`, start `V+1`, end `V+2`. The attention
/// output column for id `k` is `k - 1`, so the start id is never a target and
/// the end id is column `V+1`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm: Norm,
    pub out: Linear,
    pub ctc: Linear,
}

impl Decoder {
    pub fn register(store: &mut ParameterStore, rng: &mut ChaCha8Rng, cfg: &QuartetConfig) -> Result<Self> {
        let (d, v, g) = (cfg.feature_dim, cfg.vocab_size, Group::Decoder);
        let embed = store.register("decoder.embed", g, xavier_uniform(rng, &[v + 3, d], v + 3, d))?;
        let layers = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::register(store, rng, &format!("decoder.layer{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let norm = Norm::register(store, "decoder.norm", g, d)?;
        let out = Linear::register(store, rng, "decoder.out", g, d, v + 2, Init::Xavier)?;
        let ctc = Linear::register(store, rng, "decoder.ctc", g, d, v + 1, Init::Xavier)?;
        Ok(Self { vocab_size: cfg.vocab_size, max_len: cfg.max_len, embed, layers, norm, out, ctc })
    }

    pub fn sos(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn eos(&self) -> usize {
        self.vocab_size + 2
    }

    /// Cross-entropy targets for `y`: its tokens followed by the end marker, as output columns.
    pub fn targets(&self, y: &[usize]) -> Vec<usize> {
        y.iter().map(|t| t - 1).chain(std::iter::once(self.eos() - 1)).collect()
    }

    fn check_tokens(&self, y: &[usize]) -> Result<()> {
        if let Some(&bad) = y.iter().find(|&&t| t == 0 || t > self.vocab_size) {
            return Err(Error::invalid(format!("token {bad} outside 1..={}", self.vocab_size)));
        }
        if y.len() > self.max_len {
            return Err(Error::invalid(format!("target of {} tokens exceeds the maximum length {}", y.len(), self.max_len)));
        }
        Ok(())
    }

    /// Attention logits for the inputs `ids` (start marker first).
    fn attend<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParameterStore,
        memory: Var,
        ids: &[usize],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let len = ids.len();
        let one_hot = tape.constant(Tensor::one_hot(ids, self.vocab_size + 3)?)?;
        let table = tape.param(store, self.embed);
        let x = tape.matmul(one_hot, table)?;
        let d = tape.value(x).cols();
        let pe = tape.constant(positional_encoding(len, d))?;
        let mut x = tape.add(x, pe)?;
        let mask = tape.constant(causal_mask(len))?;
        for layer in &self.layers {
            x = layer.forward(tape, store, x, memory, mask, drop)?;
        }
        let x = self.norm.forward(tape, store, x)?;
        self.out.forward(tape, store, x)
    }

    pub fn ctc_logits<'p>(&self, tape: &mut Tape<'p>, store: &'p ParameterStore, memory: Var) -> Result<Var> {
        self.ctc.forward(tape, store, memory)
    }

    /// Teacher-forced pass over `y` plus the CTC head.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParameterStore,
        memory: Var,
        y: &[usize],
        drop: &mut Dropout,
    ) -> Result<DecoderOutput> {
        self.check_tokens(y)?;
        let ids: Vec<usize> = std::iter::once(self.sos()).chain(y.iter().copied()).collect();
        let logits = self.attend(tape, store, memory, &ids, drop)?;
        let ctc_logits = self.ctc_logits(tape, store, memory)?;
        Ok(DecoderOutput { logits, ctc_logits })
    }

    /// Autoregressive argmax decoding until the end marker or `max_steps`
    /// tokens. Ties go to the lowest id.
    pub fn greedy_decode(&self, store: &ParameterStore, memory: &Tensor, max_steps: usize) -> Result<Vec<usize>> {
        let mut ids = vec![self.sos()];
        while ids.len() <= max_steps {
            let mut tape = Tape::new();
            let mem = tape.constant(memory.clone())?;
            let logits = self.attend(&mut tape, store, mem, &ids, &mut Dropout::off())?;
            let last = tape.value(logits).rows() - 1;
            let next = tape.value(logits).argmax_row(last) + 1;
            if next == self.eos() {
                break;
            }
            ids.push(next);
        }
        Ok(ids[1..].to_vec())
    }

    pub(crate) fn count(cfg: &QuartetConfig) -> usize {
        let (d, v) = (cfg.feature_dim, cfg.vocab_size);
        (v + 3) * d
            + cfg.decoder_layers * DecoderLayer::count(cfg)
            + Norm::count(d)
            + Linear::count(d, v + 2)
            + Linear::count(d, v + 1)
    }
}
