//! Training objectives: CTC, cross-entropy, L1 feature distance, least-squares
//! adversarial losses and the weighted stage combinations.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of the CTC blank symbol.
pub const BLANK: usize = 0;

/// Environment variable that selects a deliberately broken code path, used by
/// the self-test to prove its checks can fail.
pub const MUTATION_ENV: &str = "JEPKD_SELFTEST_MUTATION";

/// Transition structure of the CTC forward recursion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CtcRecursion {
    #[default]
    Standard,
    /// Drops the skip over a blank between distinct labels. Wrong on purpose.
    NoSkipTransition,
}

impl CtcRecursion {
    /// `NoSkipTransition` when the mutation variable asks for `ctc-no-skip`.
    pub fn from_env() -> Self {
        match std::env::var(MUTATION_ENV).as_deref() {
            Ok("ctc-no-skip") => Self::NoSkipTransition,
            _ => Self::Standard,
        }
    }
}

/// Outcome of a CTC evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum Ctc {
    /// Negative log-likelihood and its gradient with respect to the log-probabilities.
    Feasible { nll: f64, grad: Tensor },
    /// No alignment of the target fits in the available frames.
    Infeasible,
}

impl Ctc {
    pub fn nll(&self) -> f64 {
        match self {
            Ctc::Feasible { nll, .. } => *nll,
            Ctc::Infeasible => f64::INFINITY,
        }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn check_ctc_inputs(log_probs: &Tensor, target: &[usize]) -> Result<()> {
    let k = log_probs.cols();
    if log_probs.shape().len() != 2 {
        return Err(Error::shape("ctc", format!("log-probs must be [T,K], got {:?}", log_probs.shape())));
    }
    if let Some(&bad) = target.iter().find(|&&l| l == BLANK || l >= k) {
        return Err(Error::invalid(format!("ctc target label {bad} outside 1..{k}")));
    }
    Ok(())
}

/// CTC negative log-likelihood of `target` under per-frame log-probabilities
/// `log_probs` of shape `[T, K]`, with blank at index 0, computed in log space by
/// the forward-backward recursion.
pub fn ctc(log_probs: &Tensor, target: &[usize], recursion: CtcRecursion) -> Result<Ctc> {
    check_ctc_inputs(log_probs, target)?;
    let (t_len, k) = (log_probs.rows(), log_probs.cols());
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len).map(|s| if s % 2 == 0 { BLANK } else { target[s / 2] }).collect();
    let skip_allowed = |s: usize| -> bool {
        recursion == CtcRecursion::Standard && s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
    };
    let lp = |t: usize, s: usize| log_probs.at(t, ext[s]);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_allowed(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }
    let last = (t_len - 1) * s_len;
    let finals = if s_len > 1 { vec![s_len - 1, s_len - 2] } else { vec![0] };
    let log_p = finals.iter().fold(ninf, |acc, &s| log_add(acc, alpha[last + s]));
    if log_p == ninf {
        return Ok(Ctc::Infeasible);
    }

    // beta[t][s]: log-probability of finishing from state s at t, excluding the emission at t.
    let mut beta = vec![ninf; t_len * s_len];
    for &s in &finals {
        beta[last + s] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut acc = beta[next + s] + lp(t + 1, s);
            if s + 1 < s_len {
                acc = log_add(acc, beta[next + s + 1] + lp(t + 1, s + 1));
            }
            if s + 2 < s_len && skip_allowed(s + 2) {
                acc = log_add(acc, beta[next + s + 2] + lp(t + 1, s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![0.0; t_len * k];
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            grad[t * k + ext[s]] -= (a + b - log_p).exp();
        }
    }
    Ok(Ctc::Feasible { nll: -log_p, grad: Tensor::new(vec![t_len, k], grad)? })
}

/// Collapses a frame path: merge repeats, then drop blanks.
pub fn ctc_collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Reference CTC likelihood by enumerating every frame path. Exponential in
/// `T`; only usable on tiny inputs.
pub fn ctc_nll_brute_force(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    check_ctc_inputs(log_probs, target)?;
    let (t_len, k) = (log_probs.rows(), log_probs.cols());
    let total = (k as u64).checked_pow(t_len as u32).filter(|&n| n <= 50_000_000);
    let Some(total) = total else {
        return Err(Error::invalid(format!("{k}^{t_len} paths is too many to enumerate")));
    };
    let mut log_p = f64::NEG_INFINITY;
    let mut path = vec![0usize; t_len];
    for mut code in 0..total {
        for slot in path.iter_mut() {
            *slot = (code % k as u64) as usize;
            code /= k as u64;
        }
        if ctc_collapse(&path) == target {
            let lp: f64 = path.iter().enumerate().map(|(t, &c)| log_probs.at(t, c)).sum();
            log_p = log_add(log_p, lp);
        }
    }
    Ok(-log_p)
}

/// Records CTC on the tape. `None` means the target is infeasible for this
/// length and the term must be left out.
pub fn ctc_on_tape(tape: &mut Tape<'_>, log_probs: Var, target: &[usize], recursion: CtcRecursion) -> Result<Option<Var>> {
    match ctc(tape.value(log_probs), target, recursion)? {
        Ctc::Feasible { nll, grad } => Ok(Some(tape.scalar_fn(&[log_probs], nll, vec![grad])?)),
        Ctc::Infeasible => Ok(None),
    }
}

/// Mean token cross-entropy of `logits [T, C]` against `targets` (one per row).
pub fn cross_entropy(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    cross_entropy_smoothed(tape, logits, targets, 0.0)
}

/// Cross-entropy against targets mixed with `smoothing` mass spread uniformly
/// over all classes.
pub fn cross_entropy_smoothed(tape: &mut Tape<'_>, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let (rows, cols) = (tape.value(logits).rows(), tape.value(logits).cols());
    if targets.len() != rows {
        return Err(Error::shape("cross_entropy", format!("{rows} rows, {} targets", targets.len())));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let hot = Tensor::one_hot(targets, cols)?;
    let weights = hot.map(|h| (1.0 - smoothing) * h + smoothing / cols as f64);
    let lsm = tape.log_softmax(logits)?;
    let picks = tape.constant(weights)?;
    let chosen = tape.mul(lsm, picks)?;
    let total = tape.sum(chosen)?;
    tape.scale(total, -1.0 / rows as f64)
}

/// Mean absolute difference between two equally shaped feature matrices.
pub fn l1_distance(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let abs = tape.abs(diff)?;
    tape.mean(abs)
}

fn half_mean_square_offset(tape: &mut Tape<'_>, x: Var, target: f64) -> Result<Var> {
    let shifted = if target == 0.0 {
        x
    } else {
        let t = tape.constant(Tensor::scalar(target))?;
        tape.sub(x, t)?
    };
    let sq = tape.square(shifted)?;
    let m = tape.mean(sq)?;
    tape.scale(m, 0.5)
}

/// Score targets of the least-squares adversarial game.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LsGanConfig {
    /// Target score for real (teacher) features.
    pub real_target: f64,
    /// Target score for generated features in the discriminator loss.
    pub fake_target: f64,
    /// Score the generator wants the discriminator to give its output.
    pub gen_target: f64,
}

impl Default for LsGanConfig {
    fn default() -> Self {
        Self { real_target: 1.0, fake_target: 0.0, gen_target: 1.0 }
    }
}

/// `1/2 mean((d_real - real)^2) + 1/2 mean((d_fake - fake)^2)`.
pub fn lsgan_discriminator(tape: &mut Tape<'_>, d_real: Var, d_fake: Var, cfg: &LsGanConfig) -> Result<Var> {
    let real = half_mean_square_offset(tape, d_real, cfg.real_target)?;
    let fake = half_mean_square_offset(tape, d_fake, cfg.fake_target)?;
    tape.add(real, fake)
}

/// `1/2 mean((d_fake - gen)^2) + l1`.
pub fn lsgan_generator(tape: &mut Tape<'_>, d_fake: Var, l1: Var, cfg: &LsGanConfig) -> Result<Var> {
    let adv = half_mean_square_offset(tape, d_fake, cfg.gen_target)?;
    tape.add(adv, l1)
}

/// Mixing weights of the stage objectives.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageLossWeights {
    /// Weight of the CTC term.
    pub lambda: f64,
    /// Weight of the L1 distillation term in the first stage.
    pub gamma: f64,
}

impl Default for StageLossWeights {
    fn default() -> Self {
        Self { lambda: 0.3, gamma: 0.1 }
    }
}

impl StageLossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && (0.0..=1.0).contains(&w);
        if !ok(self.lambda) || !ok(self.gamma) || self.lambda + self.gamma > 1.0 {
            return Err(Error::invalid(format!(
                "loss weights need lambda, gamma in [0,1] with lambda + gamma <= 1, got {} and {}",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }

    /// `lambda*ctc + gamma*l1 + (1-lambda-gamma)*ce`; a missing CTC term is dropped.
    pub fn stage1(&self, tape: &mut Tape<'_>, ctc: Option<Var>, l1: Var, ce: Var) -> Result<Var> {
        let l1w = tape.scale(l1, self.gamma)?;
        let cew = tape.scale(ce, 1.0 - self.lambda - self.gamma)?;
        let mut total = tape.add(l1w, cew)?;
        if let Some(c) = ctc {
            let cw = tape.scale(c, self.lambda)?;
            total = tape.add(total, cw)?;
        }
        Ok(total)
    }

    /// `lambda*ctc + (1-lambda)*ce`; a missing CTC term is dropped.
    pub fn stage3(&self, tape: &mut Tape<'_>, ctc: Option<Var>, ce: Var) -> Result<Var> {
        let mut total = tape.scale(ce, 1.0 - self.lambda)?;
        if let Some(c) = ctc {
            let cw = tape.scale(c, self.lambda)?;
            total = tape.add(total, cw)?;
        }
        Ok(total)
    }
}
