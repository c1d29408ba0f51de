//! Character error rate, greedy decoding over a split, and the comparison of
//! two evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::EvalSettings;
use crate::error::{Error, Result};
use crate::losses::ctc_collapse;
use crate::models::{sample_noise, Quartet};
use crate::rng::stream;
use crate::synthdata::{PairedSample, Split};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Substitution, deletion and insertion counts against a reference of length `n`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditStats {
    pub s: usize,
    pub d: usize,
    pub i: usize,
    pub n: usize,
}

impl EditStats {
    pub fn edits(&self) -> usize {
        self.s + self.d + self.i
    }

    pub fn merge(self, other: EditStats) -> EditStats {
        EditStats { s: self.s + other.s, d: self.d + other.d, i: self.i + other.i, n: self.n + other.n }
    }
}

/// Minimal unit-cost alignment of `reference` to `hypothesis`. Among minimal
/// alignments the one with the most substitutions wins (a substitution is
/// preferred over a deletion plus an insertion); the backtrace then takes
/// deletions before insertions.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditStats {
    let (n, m) = (reference.len(), hypothesis.len());
    // (cost, -substitutions), compared lexicographically
    let mut dp = vec![(0usize, 0isize); (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[at(i, 0)] = (i, 0);
    }
    for j in 0..=m {
        dp[at(0, j)] = (j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let (c, s) = dp[at(i - 1, j - 1)];
            let diag = if reference[i - 1] == hypothesis[j - 1] { (c, s) } else { (c + 1, s - 1) };
            let (c, s) = dp[at(i - 1, j)];
            let del = (c + 1, s);
            let (c, s) = dp[at(i, j - 1)];
            let ins = (c + 1, s);
            dp[at(i, j)] = diag.min(del).min(ins);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut stats = EditStats { n, ..EditStats::default() };
    while i > 0 || j > 0 {
        let here = dp[at(i, j)];
        if i > 0 && j > 0 {
            let (c, s) = dp[at(i - 1, j - 1)];
            let same = reference[i - 1] == hypothesis[j - 1];
            let via = if same { (c, s) } else { (c + 1, s - 1) };
            if via == here {
                if !same {
                    stats.s += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 {
            let (c, s) = dp[at(i - 1, j)];
            if (c + 1, s) == here {
                stats.d += 1;
                i -= 1;
                continue;
            }
        }
        stats.i += 1;
        j -= 1;
    }
    stats
}

/// `(S + D + I) / N`. With `N = 0` the rate is 0 without edits and infinite otherwise.
pub fn cer(stats: &EditStats) -> f64 {
    if stats.n == 0 {
        return if stats.edits() == 0 { 0.0 } else { f64::INFINITY };
    }
    stats.edits() as f64 / stats.n as f64
}

/// Which arm a report describes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    #[default]
    Jepkd,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Jepkd => "jepkd",
        }
    }

    /// Decoder memory used when evaluating in this mode.
    pub fn memory(self) -> Memory {
        match self {
            Mode::Baseline => Memory::Encoder,
            Mode::Jepkd => Memory::Generator,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "jepkd" => Ok(Mode::Jepkd),
            _ => Err(Error::invalid(format!("unknown mode '{s}'; valid modes are baseline, jepkd"))),
        }
    }
}

/// Source of the sequence the decoder attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Memory {
    /// Encoder output `v`.
    Encoder,
    /// Generator output `G(z, v)`.
    Generator,
    /// Teacher features `a`.
    Teacher,
}

/// Noise vector used for sample `index` of `split` at evaluation time.
pub fn eval_noise(seed: u64, split: Split, index: usize, dim: usize) -> Tensor {
    sample_noise(&mut stream(seed, "noise-z-eval", &[split as u64, index as u64]), dim)
}

/// Per-sample evaluation outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub ctc_hypothesis: Vec<usize>,
    pub stats: EditStats,
    pub ctc_stats: EditStats,
    /// Mean absolute difference between `G(z, v)` and the teacher features.
    pub l1_gap: f64,
}

fn evaluate_sample(
    q: &Quartet,
    sample: &PairedSample,
    memory: Memory,
    z: &Tensor,
    max_steps: usize,
) -> Result<SampleResult> {
    let v = q.encode(&sample.visemes)?;
    let g = q.generate(&v, z)?;
    let l1_gap = g.mean_abs_diff(&sample.teacher)?;
    let mem = match memory {
        Memory::Encoder => v,
        Memory::Generator => g,
        Memory::Teacher => sample.teacher.clone(),
    };
    let hypothesis = q.decoder.greedy_decode(&q.store, &mem, max_steps)?;
    let mut tape = Tape::new();
    let mv = tape.constant(mem)?;
    let logits = q.decoder.ctc_logits(&mut tape, &q.store, mv)?;
    let frames = tape.value(logits);
    let path: Vec<usize> = (0..frames.rows()).map(|t| frames.argmax_row(t)).collect();
    let ctc_hypothesis = ctc_collapse(&path);
    Ok(SampleResult {
        id: sample.id.clone(),
        stats: edit_distance(&sample.tokens, &hypothesis),
        ctc_stats: edit_distance(&sample.tokens, &ctc_hypothesis),
        reference: sample.tokens.clone(),
        hypothesis,
        ctc_hypothesis,
        l1_gap,
    })
}

/// Worker count: `JEPKD_THREADS` if set, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("JEPKD_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Evaluates every sample, fanning out over read-only model access. Results
/// come back in sample order regardless of the thread count.
pub fn evaluate_samples(
    q: &Quartet,
    samples: &[PairedSample],
    split: Split,
    memory: Memory,
    seed: u64,
    max_steps: usize,
) -> Result<Vec<SampleResult>> {
    if samples.is_empty() {
        return Err(Error::invalid(format!("split {split} is empty")));
    }
    let threads = thread_count().min(samples.len());
    let work = |start: usize, chunk: &[PairedSample]| -> Result<Vec<SampleResult>> {
        chunk
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let z = eval_noise(seed, split, start + k, q.config.noise_dim);
                evaluate_sample(q, s, memory, &z, max_steps)
            })
            .collect()
    };
    if threads <= 1 {
        return work(0, samples);
    }
    let per = samples.len().div_ceil(threads);
    let parts: Vec<Result<Vec<SampleResult>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(per)
            .enumerate()
            .map(|(c, chunk)| scope.spawn(move || work(c * per, chunk)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
}

impl GapStats {
    /// Mean and nearest-rank percentiles.
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |q: f64| sorted[((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        Self { mean: values.iter().sum::<f64>() / values.len() as f64, p50: rank(0.5), p90: rank(0.9) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstSample {
    pub id: String,
    pub cer: f64,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
}

/// Evaluation of one split. Serialised as pretty JSON; identical inputs give
/// identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub split: Split,
    pub mode: Mode,
    pub memory: Memory,
    pub config_hash: String,
    pub seed: u64,
    pub samples: usize,
    /// Pooled `(sum S + sum D + sum I) / sum N`.
    pub cer: f64,
    /// Mean of per-sample rates, for reference only.
    pub per_sample_mean_cer: f64,
    pub edits: EditStats,
    /// Rate of the CTC head's greedy collapse.
    pub ctc_greedy_cer: f64,
    pub ctc_edits: EditStats,
    pub l1_gap: GapStats,
    pub worst: Vec<WorstSample>,
}

impl EvalReport {
    pub fn from_results(
        results: &[SampleResult],
        split: Split,
        mode: Mode,
        memory: Memory,
        config_hash: &str,
        seed: u64,
        worst: usize,
    ) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::invalid(format!("split {split} is empty")));
        }
        let edits = results.iter().fold(EditStats::default(), |acc, r| acc.merge(r.stats));
        let ctc_edits = results.iter().fold(EditStats::default(), |acc, r| acc.merge(r.ctc_stats));
        let per_sample = results.iter().map(|r| cer(&r.stats)).sum::<f64>() / results.len() as f64;
        let gaps: Vec<f64> = results.iter().map(|r| r.l1_gap).collect();
        let mut ranked: Vec<&SampleResult> = results.iter().collect();
        ranked.sort_by(|a, b| b.stats.edits().cmp(&a.stats.edits()).then_with(|| a.id.cmp(&b.id)));
        let worst = ranked
            .into_iter()
            .take(worst)
            .filter(|r| r.stats.edits() > 0)
            .map(|r| WorstSample {
                id: r.id.clone(),
                cer: cer(&r.stats),
                reference: r.reference.clone(),
                hypothesis: r.hypothesis.clone(),
            })
            .collect();
        Ok(Self {
            split,
            mode,
            memory,
            config_hash: config_hash.to_string(),
            seed,
            samples: results.len(),
            cer: cer(&edits),
            per_sample_mean_cer: per_sample,
            edits,
            ctc_greedy_cer: cer(&ctc_edits),
            ctc_edits,
            l1_gap: GapStats::of(&gaps),
            worst,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses a report; a missing or mistyped field is a schema error naming it.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }
}

/// Evaluates `samples` in `mode` (encoder memory for the baseline, generator
/// memory for JEP-KD).
pub fn evaluate_corpus(
    q: &Quartet,
    samples: &[PairedSample],
    split: Split,
    mode: Mode,
    seed: u64,
    config_hash: &str,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    evaluate_with_memory(q, samples, split, mode, mode.memory(), seed, config_hash, settings)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_with_memory(
    q: &Quartet,
    samples: &[PairedSample],
    split: Split,
    mode: Mode,
    memory: Memory,
    seed: u64,
    config_hash: &str,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let results = evaluate_samples(q, samples, split, memory, seed, settings.max_decode_steps)?;
    EvalReport::from_results(&results, split, mode, memory, config_hash, seed, settings.worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Improved,
    Unchanged,
    Regressed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub baseline: f64,
    pub jepkd: f64,
    pub delta: f64,
}

/// Differences between a baseline report and a JEP-KD report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<DeltaRow>,
    pub cer_delta: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
    /// True when JEP-KD is worse than the baseline by more than the tolerance.
    pub violated: bool,
}

pub fn compare(baseline: &EvalReport, jepkd: &EvalReport, tolerance: f64) -> Comparison {
    let row = |metric: &str, b: f64, j: f64| DeltaRow { metric: metric.to_string(), baseline: b, jepkd: j, delta: j - b };
    let rows = vec![
        row("cer", baseline.cer, jepkd.cer),
        row("ctc_greedy_cer", baseline.ctc_greedy_cer, jepkd.ctc_greedy_cer),
        row("per_sample_mean_cer", baseline.per_sample_mean_cer, jepkd.per_sample_mean_cer),
        row("l1_gap_mean", baseline.l1_gap.mean, jepkd.l1_gap.mean),
        row("l1_gap_p50", baseline.l1_gap.p50, jepkd.l1_gap.p50),
        row("l1_gap_p90", baseline.l1_gap.p90, jepkd.l1_gap.p90),
    ];
    let cer_delta = jepkd.cer - baseline.cer;
    let verdict = if cer_delta < 0.0 {
        Verdict::Improved
    } else if cer_delta == 0.0 {
        Verdict::Unchanged
    } else {
        Verdict::Regressed
    };
    Comparison { rows, cer_delta, tolerance, verdict, violated: cer_delta > tolerance }
}

impl Comparison {
    /// Fixed-width table followed by a verdict line.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>10} {:>10} {:>10}", "metric", "baseline", "jepkd", "delta");
        for r in &self.rows {
            let _ = writeln!(out, "{:<22} {:>10.4} {:>10.4} {:>+10.4}", r.metric, r.baseline, r.jepkd, r.delta);
        }
        let verdict = match self.verdict {
            Verdict::Improved => "improved",
            Verdict::Unchanged => "unchanged",
            Verdict::Regressed => "regressed",
        };
        let _ = writeln!(
            out,
            "verdict: {verdict} (cer delta {:+.4}, tolerance {:.4}{})",
            self.cer_delta,
            self.tolerance,
            if self.violated { ", ordering violated" } else { "" }
        );
        out
    }
}
