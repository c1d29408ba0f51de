//! Building blocks shared by the encoder, generator, discriminator and decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Group, ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Initialisation of a weight matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Xavier,
    Zeros,
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: Group,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = match init {
            Init::Xavier => xavier_uniform(rng, &[din, dout], din, dout),
            Init::Zeros => Tensor::zeros(&[din, dout]),
        };
        let w = store.register(format!("{name}.w"), group, weight)?;
        let b = store.register(format!("{name}.b"), group, Tensor::zeros(&[dout]))?;
        Ok(Self { w, b })
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn count(din: usize, dout: usize) -> usize {
        din * dout + dout
    }
}

/// Layer normalisation over the feature axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn register(store: &mut ParameterStore, name: &str, group: Group, dim: usize) -> Result<Self> {
        let gain = store.register(format!("{name}.gain"), group, Tensor::filled(&[dim], 1.0))?;
        let bias = store.register(format!("{name}.bias"), group, Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParameterStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }

    pub fn count(dim: usize) -> usize {
        2 * dim
    }
}

/// Inverted dropout. Inactive unless both a positive rate and a generator are set.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut().filter(|_| self.rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 - self.rate;
        let shape = tape.value(x).shape().to_vec();
        let mask: Vec<f64> = (0..tape.value(x).numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?)?;
        tape.mul(x, m)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn register(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: Group,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("feature width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::register(store, rng, &format!("{name}.wq"), group, dim, dim, Init::Xavier)?,
            k: Linear::register(store, rng, &format!("{name}.wk"), group, dim, dim, Init::Xavier)?,
            v: Linear::register(store, rng, &format!("{name}.wv"), group, dim, dim, Init::Xavier)?,
            o: Linear::register(store, rng, &format!("{name}.wo"), group, dim, dim, Init::Xavier)?,
            heads,
        })
    }

    /// Queries from `x`, keys and values from `memory`; `mask` is added to the scores.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParameterStore,
        x: Var,
        memory: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, memory)?;
        let v = self.v.forward(tape, store, memory)?;
        let dim = tape.value(q).cols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let weights = tape.softmax(scores)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let joined = tape.concat(&outs)?;
        self.o.forward(tape, store, joined)
    }

    pub fn count(dim: usize) -> usize {
        4 * Linear::count(dim, dim)
    }
}

/// Position-wise `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn register(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: Group,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::register(store, rng, &format!("{name}.fc1"), group, dim, hidden, Init::Xavier)?,
            fc2: Linear::register(store, rng, &format!("{name}.fc2"), group, hidden, dim, Init::Xavier)?,
        })
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParameterStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, store, h)
    }

    pub fn count(dim: usize, hidden: usize) -> usize {
        Linear::count(dim, hidden) + Linear::count(hidden, dim)
    }
}

/// Sinusoidal position table of shape `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim.div_ceil(2) {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[t * dim + 2 * i] = angle.sin();
            if 2 * i + 1 < dim {
                data[t * dim + 2 * i + 1] = angle.cos();
            }
        }
    }
    Tensor::from_parts(vec![len, dim], data)
}

/// Additive mask hiding future positions.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = -1e9;
        }
    }
    Tensor::from_parts(vec![len, len], data)
}
