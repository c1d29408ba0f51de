//! Synthetic paired-modality corpus.
//!
//! Sentences come from a bigram language model over `V` tokens. The "video"
//! side sees only the viseme class of each token (pairs of tokens share a
//! class), so the within-class identity is destroyed; the language model is
//! built so that the previous token almost always decides which member of a
//! class comes next, which makes the lost information recoverable from
//! context. The "audio" side is a frozen teacher encoder run on the clean
//! tokens.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{QuartetConfig, TeacherEncoder};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Token id layout: blank 0, content `1..=size`, start `size+1`, end `size+2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub size: usize,
}

impl Vocabulary {
    pub const BLANK: usize = 0;

    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("vocabulary must have at least one token"));
        }
        Ok(Self { size })
    }

    pub fn sos(&self) -> usize {
        self.size + 1
    }

    pub fn eos(&self) -> usize {
        self.size + 2
    }

    pub fn is_content(&self, id: usize) -> bool {
        (1..=self.size).contains(&id)
    }
}

/// Surjective map from token to viseme class. Classes are numbered from 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisemeMap {
    class_of: Vec<usize>,
    classes: usize,
}

impl VisemeMap {
    /// Tokens `2k-1` and `2k` share class `k`; an odd last token is alone.
    pub fn paired(vocab: Vocabulary) -> Self {
        let class_of = (0..=vocab.size).map(|t| t.div_ceil(2)).collect();
        Self { class_of, classes: vocab.size.div_ceil(2) }
    }

    /// `classes[t-1]` is the class of token `t`.
    pub fn from_classes(classes: &[usize]) -> Result<Self> {
        let count = classes.iter().copied().max().unwrap_or(0);
        let mut sizes = vec![0usize; count + 1];
        for &c in classes {
            if c == 0 {
                return Err(Error::invalid("viseme classes are numbered from 1"));
            }
            sizes[c] += 1;
        }
        if sizes[1..].contains(&0) {
            return Err(Error::invalid("every viseme class needs at least one token"));
        }
        if !sizes.iter().any(|&s| s >= 2) {
            return Err(Error::invalid("at least one viseme class must merge two tokens"));
        }
        let class_of = std::iter::once(0).chain(classes.iter().copied()).collect();
        Ok(Self { class_of, classes: count })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn vocab_size(&self) -> usize {
        self.class_of.len() - 1
    }

    pub fn class(&self, token: usize) -> usize {
        self.class_of[token]
    }

    /// Tokens of class `c`, ascending.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (1..self.class_of.len()).filter(|&t| self.class_of[t] == c).collect()
    }

    pub fn project(&self, tokens: &[usize]) -> Vec<usize> {
        tokens.iter().map(|&t| self.class(t)).collect()
    }

    /// One-hot observation matrix `[T, classes]` for `tokens`.
    pub fn observe(&self, tokens: &[usize]) -> Result<Tensor> {
        let cols: Vec<usize> = self.project(tokens).iter().map(|c| c - 1).collect();
        Tensor::one_hot(&cols, self.classes)
    }
}

/// Bigram transition table: row 0 is the sentence start, row `r` follows token `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct BigramLm {
    vocab_size: usize,
    kappa: f64,
    probs: Vec<f64>,
}

impl BigramLm {
    /// Each row ranks the viseme classes in a seeded random order and gives
    /// the class at rank `r` mass proportional to `kappa^(-r/4)`. Inside a
    /// class, a seeded coin per (row, class) picks one preferred member, which
    /// is `kappa` times as likely as each other member. `kappa = 1` is the
    /// uniform model.
    pub fn build(seed: u64, vmap: &VisemeMap, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::invalid(format!("kappa must be positive, got {kappa}")));
        }
        let v = vmap.vocab_size();
        let classes: Vec<Vec<usize>> = (1..=vmap.classes()).map(|c| vmap.members(c)).collect();
        let ratio = kappa.powf(-0.25);
        let mut probs = vec![0.0; (v + 1) * v];
        for row in 0..=v {
            let mut rng = stream(seed, "lm", &[row as u64]);
            let mut order: Vec<usize> = (0..classes.len()).collect();
            order.shuffle(&mut rng);
            let mut class_mass = vec![0.0; classes.len()];
            for (rank, &c) in order.iter().enumerate() {
                class_mass[c] = ratio.powi(rank as i32);
            }
            let norm: f64 = class_mass.iter().sum();
            for (members, mass) in classes.iter().zip(&class_mass) {
                let preferred = rng.random_range(0..members.len());
                let total = kappa + (members.len() - 1) as f64;
                for (i, &t) in members.iter().enumerate() {
                    let w = if i == preferred { kappa } else { 1.0 };
                    probs[row * v + t - 1] = mass / norm * w / total;
                }
            }
        }
        Ok(Self { vocab_size: v, kappa, probs })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// `P(token | prev)`, with `prev = 0` at the sentence start.
    pub fn prob(&self, prev: usize, token: usize) -> f64 {
        self.probs[prev * self.vocab_size + token - 1]
    }

    pub fn row(&self, prev: usize) -> &[f64] {
        &self.probs[prev * self.vocab_size..(prev + 1) * self.vocab_size]
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, rng: &mut R, prev: usize) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = self.row(prev);
        for (i, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return i + 1;
            }
        }
        row.iter().rposition(|&p| p > 0.0).expect("row has mass") + 1
    }

    pub fn sample_sentence<R: Rng + ?Sized>(&self, rng: &mut R, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut prev = 0;
        for _ in 0..len {
            prev = self.sample_next(rng, prev);
            out.push(prev);
        }
        out
    }
}

/// Corpus size and language-model settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Concentration of the language model; 1 makes it uniform.
    pub kappa: f64,
    /// Weight of a frame's own token in the teacher front end, relative to its neighbours.
    pub teacher_gain: f64,
    /// Scale of the teacher's attention and feed-forward branches.
    pub teacher_mixing: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { train: 2000, val: 200, test: 200, min_len: 6, max_len: 12, kappa: 40.0, teacher_gain: 4.0, teacher_mixing: 0.1 }
    }
}

impl CorpusSpec {
    pub fn validate(&self, model: &QuartetConfig) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid(format!(
                "corpus lengths need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.max_len > model.max_len {
            return Err(Error::invalid(format!(
                "corpus.max_len {} exceeds model.max_len {}",
                self.max_len, model.max_len
            )));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::invalid("every split needs at least one sentence"));
        }
        if model.input_dim != model.vocab_size.div_ceil(2) {
            return Err(Error::invalid(format!(
                "model.input_dim must equal the viseme class count {}",
                model.vocab_size.div_ceil(2)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|sp| sp.name() == s).ok_or_else(|| {
            Error::invalid(format!("unknown split '{s}'; valid splits are train, val, test"))
        })
    }
}

/// One utterance: tokens, viseme observations and teacher features, all of length `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub tokens: Vec<usize>,
    /// `[T, classes]` one-hot viseme observations.
    pub visemes: Tensor,
    /// `[T, d]` teacher features.
    pub teacher: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[PairedSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<PairedSample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Everything derived from the master seed that the corpus depends on.
#[derive(Clone, Debug)]
pub struct World {
    pub vocab: Vocabulary,
    pub vmap: VisemeMap,
    pub lm: BigramLm,
    pub teacher: TeacherEncoder,
}

impl World {
    pub fn new(seed: u64, spec: &CorpusSpec, model: &QuartetConfig) -> Result<Self> {
        spec.validate(model)?;
        let vocab = Vocabulary::new(model.vocab_size)?;
        let vmap = VisemeMap::paired(vocab);
        let lm = BigramLm::build(seed, &vmap, spec.kappa)?;
        let teacher = TeacherEncoder::new(model, seed, spec.teacher_gain, spec.teacher_mixing)?;
        Ok(Self { vocab, vmap, lm, teacher })
    }

    pub fn sample(&self, id: String, tokens: Vec<usize>) -> Result<PairedSample> {
        let visemes = self.vmap.observe(&tokens)?;
        let teacher = self.teacher.features(&tokens)?;
        Ok(PairedSample { id, tokens, visemes, teacher })
    }
}

/// Token sequences of every split. Each sentence has its own stream; a val or
/// test sentence that already occurs in an earlier split is redrawn from the
/// next attempt of the same stream, so the splits are disjoint.
pub fn generate_sentences(seed: u64, spec: &CorpusSpec, lm: &BigramLm) -> [Vec<Vec<usize>>; 3] {
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let counts = [spec.train, spec.val, spec.test];
    let mut out: [Vec<Vec<usize>>; 3] = Default::default();
    for (s, &count) in counts.iter().enumerate() {
        let mut split = Vec::with_capacity(count);
        for i in 0..count {
            let mut attempt = 0u64;
            let sentence = loop {
                let mut rng = stream(seed, "corpus", &[s as u64, i as u64, attempt]);
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let sentence = lm.sample_sentence(&mut rng, len);
                if s == 0 || !seen.contains(&sentence) {
                    break sentence;
                }
                attempt += 1;
            };
            split.push(sentence);
        }
        seen.extend(split.iter().cloned());
        out[s] = split;
    }
    out
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{}-{index:05}", split.name())
}

/// The full corpus for `seed`.
pub fn generate_corpus(seed: u64, spec: &CorpusSpec, model: &QuartetConfig) -> Result<(World, Corpus)> {
    let world = World::new(seed, spec, model)?;
    let [train, val, test] = generate_sentences(seed, spec, &world.lm);
    let build = |split: Split, sentences: Vec<Vec<usize>>| -> Result<Vec<PairedSample>> {
        sentences.into_iter().enumerate().map(|(i, y)| world.sample(sample_id(split, i), y)).collect()
    };
    let corpus = Corpus {
        train: build(Split::Train, train)?,
        val: build(Split::Val, val)?,
        test: build(Split::Test, test)?,
    };
    Ok((world, corpus))
}

/// Most likely token sequence given the viseme classes, by dynamic programming
/// over the true language model.
pub fn viterbi_decode(lm: &BigramLm, vmap: &VisemeMap, classes: &[usize]) -> Vec<usize> {
    if classes.is_empty() {
        return Vec::new();
    }
    let ln = |p: f64| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
    let mut cands = vmap.members(classes[0]);
    let mut score: Vec<f64> = cands.iter().map(|&t| ln(lm.prob(0, t))).collect();
    let mut back: Vec<Vec<usize>> = Vec::new();
    for &c in &classes[1..] {
        let next = vmap.members(c);
        let mut next_score = Vec::with_capacity(next.len());
        let mut pointers = Vec::with_capacity(next.len());
        for &t in &next {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (j, &p) in cands.iter().enumerate() {
                let s = score[j] + ln(lm.prob(p, t));
                if s > best_score {
                    best = j;
                    best_score = s;
                }
            }
            next_score.push(best_score);
            pointers.push(best);
        }
        back.push(pointers);
        cands = next;
        score = next_score;
    }
    let mut idx = (0..score.len()).fold(0, |b, i| if score[i] > score[b] { i } else { b });
    let mut out = vec![cands[idx]];
    for (step, pointers) in back.iter().enumerate().rev() {
        idx = pointers[idx];
        out.push(vmap.members(classes[step])[idx]);
    }
    out.reverse();
    out
}

/// Per-position most probable token (maximum posterior marginal) given the
/// viseme classes, by the forward-backward recursion.
pub fn marginal_decode(lm: &BigramLm, vmap: &VisemeMap, classes: &[usize]) -> Vec<usize> {
    let t_len = classes.len();
    if t_len == 0 {
        return Vec::new();
    }
    let cands: Vec<Vec<usize>> = classes.iter().map(|&c| vmap.members(c)).collect();
    let normalize = |v: &mut Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
    };
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut first: Vec<f64> = cands[0].iter().map(|&t| lm.prob(0, t)).collect();
    normalize(&mut first);
    alpha.push(first);
    for i in 1..t_len {
        let mut a: Vec<f64> = cands[i]
            .iter()
            .map(|&t| cands[i - 1].iter().zip(&alpha[i - 1]).map(|(&p, w)| w * lm.prob(p, t)).sum())
            .collect();
        normalize(&mut a);
        alpha.push(a);
    }
    let mut beta = vec![Vec::new(); t_len];
    beta[t_len - 1] = vec![1.0; cands[t_len - 1].len()];
    for i in (0..t_len - 1).rev() {
        let mut b: Vec<f64> = cands[i]
            .iter()
            .map(|&p| cands[i + 1].iter().zip(&beta[i + 1]).map(|(&t, w)| w * lm.prob(p, t)).sum())
            .collect();
        normalize(&mut b);
        beta[i] = b;
    }
    (0..t_len)
        .map(|i| {
            let post: Vec<f64> = alpha[i].iter().zip(&beta[i]).map(|(a, b)| a * b).collect();
            let best = (0..post.len()).fold(0, |b, j| if post[j] > post[b] { j } else { b });
            cands[i][best]
        })
        .collect()
}

/// Monte-Carlo estimate, in bits, of `H(token | viseme class, previous token)`
/// from about `tokens` sampled tokens.
pub fn conditional_entropy_bits(lm: &BigramLm, vmap: &VisemeMap, seed: u64, tokens: usize, spec: &CorpusSpec) -> f64 {
    let mut joint: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut context: HashMap<(usize, usize), usize> = HashMap::new();
    let mut total = 0usize;
    let mut rng = stream(seed, "entropy", &[]);
    while total < tokens {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut prev = 0;
        for t in lm.sample_sentence(&mut rng, len) {
            let c = vmap.class(t);
            *joint.entry((prev, c, t)).or_default() += 1;
            *context.entry((prev, c)).or_default() += 1;
            total += 1;
            prev = t;
        }
    }
    let n = total as f64;
    joint
        .iter()
        .map(|(&(prev, c, _), &count)| {
            let p = count as f64 / context[&(prev, c)] as f64;
            -(count as f64 / n) * p.log2()
        })
        .sum()
}

/// Expected bigram distribution (start transitions included) under the
/// sentence-length range of `spec`, as a `(V+1) x V` table summing to 1.
pub fn expected_bigrams(lm: &BigramLm, spec: &CorpusSpec) -> Vec<f64> {
    let v = lm.vocab_size();
    let mut joint = vec![0.0; (v + 1) * v];
    let lengths = spec.max_len - spec.min_len + 1;
    let mut state = vec![0.0; v + 1];
    state[0] = 1.0;
    for pos in 0..spec.max_len {
        // sentences of length > pos emit a transition at this position
        let alive = (spec.max_len - pos.max(spec.min_len - 1)).min(lengths) as f64 / lengths as f64;
        let mut next = vec![0.0; v + 1];
        for (prev, &w) in state.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for t in 1..=v {
                let m = w * lm.prob(prev, t);
                joint[prev * v + t - 1] += alive * m;
                next[t] += m;
            }
        }
        state = next;
    }
    let total: f64 = joint.iter().sum();
    joint.iter_mut().for_each(|x| *x /= total);
    joint
}

/// Total-variation distance between the empirical bigram distribution of
/// `sentences` and [`expected_bigrams`].
pub fn bigram_total_variation(lm: &BigramLm, spec: &CorpusSpec, sentences: &[Vec<usize>]) -> f64 {
    let v = lm.vocab_size();
    let mut counts = vec![0usize; (v + 1) * v];
    let mut n = 0usize;
    for y in sentences {
        let mut prev = 0;
        for &t in y {
            counts[prev * v + t - 1] += 1;
            n += 1;
            prev = t;
        }
    }
    let expected = expected_bigrams(lm, spec);
    0.5 * counts.iter().zip(&expected).map(|(&c, e)| (c as f64 / n as f64 - e).abs()).sum::<f64>()
}
