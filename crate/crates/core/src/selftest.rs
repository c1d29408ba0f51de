//! Verification suites shared by `jepkd selftest` and the acceptance harness:
//! CTC against path enumeration, finite-difference gradient checks, edit
//! distance against an independent search, the least-squares adversarial
//! optimum, and binary format round-trips.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{FormatErrorKind, Result};
use crate::eval::{cer, edit_distance, EditStats};
use crate::featfile::{decode_features, encode_features, read_features, write_features};
use crate::gradcheck::{check_input, check_param};
use crate::losses::{
    cross_entropy, cross_entropy_smoothed, ctc, ctc_nll_brute_force, ctc_on_tape, l1_distance, lsgan_discriminator,
    lsgan_generator, Ctc, CtcRecursion, LsGanConfig, StageLossWeights,
};
use crate::models::{sample_noise, Dropout, Quartet, QuartetConfig};
use crate::params::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::{Checkpoint, TrainState};

/// Outcome of one suite.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckResult {
    fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Self {
        let start = Instant::now();
        let (passed, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        Self { name, passed, detail, elapsed: start.elapsed() }
    }
}

fn random_log_probs(rng: &mut ChaCha8Rng, t: usize, k: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
            logits.iter().map(|l| l - z).collect()
        })
        .collect();
    Tensor::from_rows(&rows).expect("rectangular")
}

fn all_sequences(alphabet: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &a in alphabet {
                let mut e: Vec<usize> = s.clone();
                e.push(a);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// CTC negative log-likelihood against exhaustive path enumeration for every
/// target of length at most 3, every `T <= 6` and every label count `V <= 3`.
pub fn ctc_oracle(recursion: CtcRecursion) -> CheckResult {
    CheckResult::timed("ctc-oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0c7c);
        let (mut cases, mut worst) = (0usize, 0.0f64);
        let mut failure = None;
        for v in 1..=3usize {
            let labels: Vec<usize> = (1..=v).collect();
            let targets = all_sequences(&labels, 3);
            for t in 1..=6usize {
                let lp = random_log_probs(&mut rng, t, v + 1);
                for target in &targets {
                    let fast = ctc(&lp, target, recursion)?;
                    let slow = ctc_nll_brute_force(&lp, target)?;
                    cases += 1;
                    let ok = match fast {
                        Ctc::Infeasible => slow.is_infinite(),
                        Ctc::Feasible { nll, .. } => {
                            let rel = (nll - slow).abs() / slow.abs().max(1e-300);
                            worst = worst.max(rel);
                            slow.is_finite() && rel <= 1e-9
                        }
                    };
                    if !ok && failure.is_none() {
                        failure = Some(format!("V={v} T={t} target={target:?}: {} vs brute force {slow}", fast.nll()));
                    }
                }
            }
        }
        Ok(match failure {
            Some(f) => (false, format!("{cases} cases; first mismatch {f}")),
            None => (true, format!("{cases} cases, worst relative error {worst:.2e}")),
        })
    })
}

/// Replaces zero-initialised tensors by small random values so every path
/// carries gradient.
fn roughen(store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let t = store.value_mut(id);
        if t.data().iter().all(|&x| x == 0.0) {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        }
    }
}

/// Configuration used by the gradient suite: width 4, one layer per model.
pub fn tiny_model() -> QuartetConfig {
    QuartetConfig {
        feature_dim: 4,
        encoder_layers: 1,
        decoder_layers: 1,
        generator_blocks: 1,
        attention_heads: 2,
        ff_dim: 6,
        vocab_size: 4,
        max_len: 6,
        noise_dim: 2,
        input_dim: 2,
        dropout: 0.0,
    }
}

struct GradTally {
    checks: usize,
    worst: f64,
    worst_name: String,
    tolerance: f64,
}

impl GradTally {
    fn add(&mut self, name: impl Into<String>, err: f64) {
        self.checks += 1;
        if err > self.worst || !err.is_finite() {
            self.worst = if err.is_finite() { err } else { f64::INFINITY };
            self.worst_name = name.into();
        }
    }

    fn verdict(&self) -> (bool, String) {
        let ok = self.worst < self.tolerance;
        (ok, format!("{} checks, worst relative error {:.2e} ({})", self.checks, self.worst, self.worst_name))
    }
}

/// Central finite differences (step `1e-5`, tolerance `1e-4` relative) for
/// every loss and for every parameter of every model on a tiny configuration.
pub fn gradient_suite(recursion: CtcRecursion) -> CheckResult {
    CheckResult::timed("gradient-suite", || {
        const H: f64 = 1e-5;
        let mut tally = GradTally { checks: 0, worst: 0.0, worst_name: String::new(), tolerance: 1e-4 };
        let mut rng = ChaCha8Rng::seed_from_u64(0x9bad);
        let mut randn = |r: usize, c: usize, s: f64| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-s..s)).collect()).expect("shape")
        };

        let logits = randn(5, 4, 1.5);
        for target in [vec![1, 2, 2], vec![3], vec![], vec![1, 1, 1]] {
            let r = check_input(
                |tape, x| {
                    let lp = tape.log_softmax(x)?;
                    Ok(ctc_on_tape(tape, lp, &target, recursion)?.expect("feasible"))
                },
                &logits,
                H,
            )?;
            tally.add(format!("ctc {target:?}"), r.max_error);
        }
        let targets = [0usize, 3, 1, 2, 2];
        let r = check_input(|tape, x| cross_entropy(tape, x, &targets), &logits, H)?;
        tally.add("cross_entropy", r.max_error);
        let r = check_input(|tape, x| cross_entropy_smoothed(tape, x, &targets, 0.1), &logits, H)?;
        tally.add("cross_entropy_smoothed", r.max_error);
        let other = randn(5, 4, 1.0);
        let r = check_input(
            |tape, x| {
                let b = tape.constant(other.clone())?;
                l1_distance(tape, x, b)
            },
            &logits,
            H,
        )?;
        tally.add("l1_distance", r.max_error);
        let scores = randn(1, 6, 1.0);
        let cfg = LsGanConfig::default();
        let r = check_input(
            |tape, x| {
                let real = tape.slice_cols(x, 0, 3)?;
                let fake = tape.slice_cols(x, 3, 3)?;
                lsgan_discriminator(tape, real, fake, &cfg)
            },
            &scores,
            H,
        )?;
        tally.add("lsgan_discriminator", r.max_error);
        let r = check_input(
            |tape, x| {
                let fake = tape.slice_cols(x, 0, 5)?;
                let l1 = tape.slice_cols(x, 5, 1)?;
                let l1 = tape.sum(l1)?;
                lsgan_generator(tape, fake, l1, &cfg)
            },
            &scores,
            H,
        )?;
        tally.add("lsgan_generator", r.max_error);
        let w = StageLossWeights::default();
        let terms = Tensor::from_rows(&[vec![1.3, 0.7, 2.1]])?;
        let r = check_input(
            |tape, x| {
                let parts: Vec<Var> =
                    (0..3).map(|i| tape.slice_cols(x, i, 1).and_then(|p| tape.sum(p))).collect::<Result<_>>()?;
                let s1 = w.stage1(tape, Some(parts[0]), parts[1], parts[2])?;
                let s3 = w.stage3(tape, Some(parts[0]), parts[2])?;
                tape.add(s1, s3)
            },
            &terms,
            H,
        )?;
        tally.add("stage weights", r.max_error);

        let model = tiny_model();
        let mut q = Quartet::new(&model, 11)?;
        roughen(&mut q.store, &mut rng_for("grad-roughen"));
        let q = q;
        let tokens = [2usize, 1, 4, 4];
        let x_v = Tensor::one_hot(&[1, 0, 1, 1], model.input_dim)?;
        let teacher = randn(4, model.feature_dim, 1.0);
        let z = sample_noise(&mut rng_for("grad-z"), model.noise_dim);
        let names: Vec<String> = q.store.sorted_ids().iter().map(|&id| q.store.param(id).name.clone()).collect();
        for name in &names {
            let r = check_param(
                &q.store,
                name,
                |tape, store| {
                    let mut drop = Dropout::off();
                    let x = tape.constant(x_v.clone())?;
                    let v = q.encoder.forward(tape, store, x, &mut drop)?;
                    let g = q.generator.forward(tape, store, v, &z)?;
                    let a = tape.constant(teacher.clone())?;
                    let l1 = l1_distance(tape, g, a)?;
                    let out = q.decoder.forward(tape, store, g, &tokens, &mut drop)?;
                    let ce = cross_entropy(tape, out.logits, &q.decoder.targets(&tokens))?;
                    let lp = tape.log_softmax(out.ctc_logits)?;
                    let c = ctc_on_tape(tape, lp, &tokens, recursion)?;
                    let s1 = w.stage1(tape, c, l1, ce)?;
                    let d_real = q.discriminator.forward(tape, store, a)?;
                    let d_fake = q.discriminator.forward(tape, store, g)?;
                    let dl = lsgan_discriminator(tape, d_real, d_fake, &cfg)?;
                    let gl = lsgan_generator(tape, d_fake, l1, &cfg)?;
                    let adv = tape.add(dl, gl)?;
                    tape.add(s1, adv)
                },
                H,
                6,
            )?;
            tally.add(name.clone(), r.max_error);
        }
        let r = check_input(
            |tape, x| {
                let v = q.encoder.forward(tape, &q.store, x, &mut Dropout::off())?;
                let g = q.generator.forward(tape, &q.store, v, &z)?;
                let s = q.discriminator.forward(tape, &q.store, g)?;
                let out = q.decoder.forward(tape, &q.store, g, &tokens, &mut Dropout::off())?;
                let ce = cross_entropy(tape, out.logits, &q.decoder.targets(&tokens))?;
                tape.add(s, ce)
            },
            &x_v,
            H,
        )?;
        tally.add("input gradient through all models", r.max_error);
        Ok(tally.verdict())
    })
}

fn rng_for(name: &str) -> ChaCha8Rng {
    crate::rng::stream(0, name, &[])
}

/// Minimal cost and maximal substitutions over every alignment, by explicit
/// enumeration of all edit paths.
fn alignments_exhaustive(r: &[usize], h: &[usize]) -> (usize, usize) {
    fn walk(r: &[usize], h: &[usize], cost: usize, subs: usize, best: &mut (usize, usize)) {
        if r.is_empty() && h.is_empty() {
            if cost < best.0 || (cost == best.0 && subs > best.1) {
                *best = (cost, subs);
            }
            return;
        }
        if let (Some(a), Some(b)) = (r.first(), h.first()) {
            let differ = usize::from(a != b);
            walk(&r[1..], &h[1..], cost + differ, subs + differ, best);
        }
        if !r.is_empty() {
            walk(&r[1..], h, cost + 1, subs, best);
        }
        if !h.is_empty() {
            walk(r, &h[1..], cost + 1, subs, best);
        }
    }
    let mut best = (usize::MAX, 0);
    walk(r, h, 0, 0, &mut best);
    best
}

/// The same quantity by memoised recursion over suffixes.
fn alignments_memoised(r: &[usize], h: &[usize]) -> (usize, usize) {
    fn go(r: &[usize], h: &[usize], i: usize, j: usize, memo: &mut HashMap<(usize, usize), (usize, isize)>) -> (usize, isize) {
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if i == r.len() {
            (h.len() - j, 0)
        } else if j == h.len() {
            (r.len() - i, 0)
        } else {
            let (c, s) = go(r, h, i + 1, j + 1, memo);
            let diag = if r[i] == h[j] { (c, s) } else { (c + 1, s - 1) };
            let (c, s) = go(r, h, i + 1, j, memo);
            let del = (c + 1, s);
            let (c, s) = go(r, h, i, j + 1, memo);
            diag.min(del).min((c + 1, s))
        };
        memo.insert((i, j), v);
        v
    }
    let (c, s) = go(r, h, 0, 0, &mut HashMap::new());
    (c, (-s) as usize)
}

/// Counts implied by a cost and substitution count: `D - I = n - m` and `D + I = cost - S`.
fn stats_from(cost: usize, subs: usize, n: usize, m: usize) -> EditStats {
    let gaps = (cost - subs) as isize;
    let diff = n as isize - m as isize;
    EditStats { s: subs, d: ((gaps + diff) / 2) as usize, i: ((gaps - diff) / 2) as usize, n }
}

/// Edit distance against exhaustive enumeration (all pairs up to length 4
/// over three symbols) and memoised recursion (1000 random pairs up to
/// length 20), plus the documented rate examples and structural properties.
pub fn edit_distance_oracle() -> CheckResult {
    CheckResult::timed("edit-distance-oracle", || {
        let seqs = all_sequences(&[0, 1, 2], 4);
        let mut pairs = 0usize;
        for r in &seqs {
            for h in &seqs {
                let (cost, subs) = alignments_exhaustive(r, h);
                let got = edit_distance(r, h);
                if got != stats_from(cost, subs, r.len(), h.len()) {
                    return Ok((false, format!("{r:?} vs {h:?}: got {got:?}, exhaustive cost {cost} subs {subs}")));
                }
                let back = edit_distance(h, r);
                if back.edits() != got.edits() || back.d != got.i || back.i != got.d {
                    return Ok((false, format!("{r:?} vs {h:?}: swapping does not exchange D and I")));
                }
                if got.edits() > r.len().max(h.len()) || got.s + got.d > got.n {
                    return Ok((false, format!("{r:?} vs {h:?}: bound violated by {got:?}")));
                }
                pairs += 1;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xed17);
        for _ in 0..1000 {
            let alphabet = rng.random_range(2..6usize);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> {
                let len = rng.random_range(0..=20usize);
                (0..len).map(|_| rng.random_range(0..alphabet)).collect()
            };
            let r = draw(&mut rng);
            let h = draw(&mut rng);
            let (cost, subs) = alignments_memoised(&r, &h);
            let got = edit_distance(&r, &h);
            if got != stats_from(cost, subs, r.len(), h.len()) {
                return Ok((false, format!("{r:?} vs {h:?}: got {got:?}, recursion cost {cost} subs {subs}")));
            }
            pairs += 1;
        }
        let examples: [(&[u8], &[u8], EditStats); 3] = [
            (b"abc", b"abc", EditStats { s: 0, d: 0, i: 0, n: 3 }),
            (b"abc", b"axc", EditStats { s: 1, d: 0, i: 0, n: 3 }),
            (b"", b"ab", EditStats { s: 0, d: 0, i: 2, n: 0 }),
        ];
        for (r, h, want) in examples {
            if edit_distance(r, h) != want {
                return Ok((false, format!("example {r:?}/{h:?} gave {:?}", edit_distance(r, h))));
            }
        }
        let rates = [
            (EditStats { s: 0, d: 0, i: 0, n: 5 }, 0.0),
            (EditStats { s: 1, d: 0, i: 0, n: 3 }, 1.0 / 3.0),
            (EditStats { s: 0, d: 1, i: 2, n: 2 }, 1.5),
            (EditStats { s: 0, d: 0, i: 0, n: 0 }, 0.0),
            (EditStats { s: 0, d: 0, i: 1, n: 0 }, f64::INFINITY),
        ];
        for (stats, want) in rates {
            if cer(&stats) != want {
                return Ok((false, format!("cer({stats:?}) = {}, expected {want}", cer(&stats))));
            }
        }
        Ok((true, format!("{pairs} pairs and all documented examples agree")))
    })
}

/// Least-squares discriminator optimum on point masses and the zero-loss
/// ideal configuration.
pub fn lsgan_optimum() -> CheckResult {
    CheckResult::timed("lsgan-optimum", || {
        let cfg = LsGanConfig::default();
        let mut worst = 0.0f64;
        let mut cases = 0usize;
        // A point x has mass p_r among `reals` real samples and p_g among
        // `fakes` generated samples; every other sample scores a fixed value.
        let loss_grad = |d: f64, n_r: usize, reals: usize, n_g: usize, fakes: usize| -> Result<f64> {
            let mut tape = Tape::new();
            let dv = tape.leaf(Tensor::filled(&[1, 1], d), true)?;
            let scores = |tape: &mut Tape<'_>, hits: usize, total: usize, rest: f64| -> Result<Var> {
                let ones = tape.constant(Tensor::filled(&[1, hits], 1.0))?;
                let at_x = tape.matmul(dv, ones)?;
                if hits == total {
                    return Ok(at_x);
                }
                let others = tape.constant(Tensor::filled(&[1, total - hits], rest))?;
                tape.concat(&[at_x, others])
            };
            let real = scores(&mut tape, n_r, reals, 0.8)?;
            let fake = scores(&mut tape, n_g, fakes, 0.1)?;
            let loss = lsgan_discriminator(&mut tape, real, fake, &cfg)?;
            Ok(tape.backward(loss)?.wrt(dv).item())
        };
        for (n_r, reals, n_g, fakes) in [(1, 4, 3, 4), (2, 5, 1, 7), (3, 3, 3, 3), (1, 9, 8, 9), (5, 6, 2, 11), (1, 2, 1, 3)] {
            let g0 = loss_grad(0.0, n_r, reals, n_g, fakes)?;
            let g1 = loss_grad(1.0, n_r, reals, n_g, fakes)?;
            let minimiser = -g0 / (g1 - g0);
            let (p_r, p_g) = (n_r as f64 / reals as f64, n_g as f64 / fakes as f64);
            worst = worst.max((minimiser - p_r / (p_r + p_g)).abs());
            cases += 1;
        }
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::filled(&[1, 4], 1.0))?;
        let zeros = tape.constant(Tensor::zeros(&[1, 4]))?;
        let l1 = tape.constant(Tensor::scalar(0.0))?;
        let jd = lsgan_discriminator(&mut tape, ones, zeros, &cfg)?;
        let jg = lsgan_generator(&mut tape, ones, l1, &cfg)?;
        let (jd, jg) = (tape.value(jd).item(), tape.value(jg).item());
        let ok = worst <= 1e-6 && jd == 0.0 && jg == 0.0;
        Ok((ok, format!("{cases} point-mass cases, worst deviation {worst:.2e}; J(D)={jd}, J(G)={jg}")))
    })
}

fn expect_code(bytes: &[u8], decode: impl Fn(&[u8]) -> Result<()>, want: FormatErrorKind) -> std::result::Result<(), String> {
    match decode(bytes) {
        Err(e) if e.format_kind() == Some(want) => Ok(()),
        Err(e) => Err(format!("expected {}, got: {e}", want.code())),
        Ok(()) => Err(format!("expected {}, decoding succeeded", want.code())),
    }
}

/// Feature files and checkpoints survive encode/decode/encode unchanged and
/// each corruption maps to its error code. With `scratch`, the round-trips
/// also go through files in that directory.
pub fn format_round_trips(scratch: Option<&Path>) -> CheckResult {
    CheckResult::timed("format-round-trips", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xf11e);
        let t = Tensor::new(vec![5, 3], (0..15).map(|_| rng.random_range(-4.0..4.0)).collect())?.narrowed_to_f32();
        let feat = encode_features(&t);
        if encode_features(&decode_features(&feat)?) != feat {
            return Ok((false, "feature file changed on re-encoding".into()));
        }
        let config = RunConfig { model: tiny_model(), ..RunConfig::default() };
        let mut state = TrainState::fresh(&config)?;
        roughen(&mut state.quartet.store, &mut rng);
        let ck = Checkpoint::capture(&state, config.config_hash(), config.seed).encode();
        if Checkpoint::decode(&ck)?.encode() != ck {
            return Ok((false, "checkpoint changed on re-encoding".into()));
        }
        if let Some(dir) = scratch {
            let p = dir.join("selftest-features.jpkd");
            write_features(&p, &t)?;
            let first = std::fs::read(&p).map_err(|e| crate::Error::io(&p, e))?;
            write_features(&p, &read_features(&p)?)?;
            let second = std::fs::read(&p).map_err(|e| crate::Error::io(&p, e))?;
            let c = dir.join("selftest-checkpoint.jpkc");
            Checkpoint::decode(&ck)?.save(&c)?;
            Checkpoint::load(&c)?.save(&c)?;
            let again = std::fs::read(&c).map_err(|e| crate::Error::io(&c, e))?;
            if first != second || again != ck {
                return Ok((false, "file round-trip changed bytes".into()));
            }
        }
        let corrupt = |bytes: &[u8], at: usize, value: u8| {
            let mut b = bytes.to_vec();
            b[at] = value;
            b
        };
        let with_tail = |bytes: &[u8]| {
            let mut b = bytes.to_vec();
            b.push(7);
            b
        };
        let feat_decode = |b: &[u8]| decode_features(b).map(|_| ());
        let ck_decode = |b: &[u8]| Checkpoint::decode(b).map(|_| ());
        let checks = [
            expect_code(&corrupt(&feat, 0, b'Q'), feat_decode, FormatErrorKind::BadMagic),
            expect_code(&corrupt(&feat, 4, 9), feat_decode, FormatErrorKind::BadVersion),
            expect_code(&corrupt(&feat, 8, 0), feat_decode, FormatErrorKind::BadHeader),
            expect_code(&feat[..feat.len() - 2], feat_decode, FormatErrorKind::Truncated),
            expect_code(&with_tail(&feat), feat_decode, FormatErrorKind::TrailingBytes),
            expect_code(&corrupt(&ck, 1, b'Q'), ck_decode, FormatErrorKind::BadMagic),
            expect_code(&corrupt(&ck, 4, 9), ck_decode, FormatErrorKind::BadVersion),
            expect_code(&ck[..ck.len() - 5], ck_decode, FormatErrorKind::Truncated),
            expect_code(&with_tail(&ck), ck_decode, FormatErrorKind::TrailingBytes),
        ];
        if let Some(err) = checks.into_iter().find_map(|c| c.err()) {
            return Ok((false, err));
        }
        let message = Checkpoint::decode(&ck[..40]).unwrap_err().to_string();
        if message != "truncated checkpoint" {
            return Ok((false, format!("truncation message was '{message}'")));
        }
        Ok((true, format!("feature file {} bytes, checkpoint {} bytes, 9 corruptions detected", feat.len(), ck.len())))
    })
}

/// Every suite, using the CTC recursion selected by the environment.
pub fn run_all(scratch: Option<&Path>) -> Vec<CheckResult> {
    let recursion = CtcRecursion::from_env();
    vec![
        ctc_oracle(recursion),
        gradient_suite(recursion),
        edit_distance_oracle(),
        lsgan_optimum(),
        format_round_trips(scratch),
    ]
}
