use std::collections::HashMap;

use jepkd::config::EvalSettings;
use jepkd::eval::{cer, compare, edit_distance, evaluate_corpus, EditStats, EvalReport, Memory, Mode, SampleResult, Verdict};
use jepkd::models::{Quartet, QuartetConfig};
use jepkd::synthdata::{generate_corpus, CorpusSpec, Split};
use jepkd::Error;
use proptest::prelude::*;
use rand::Rng;

/// Best `(cost, -substitutions)` over every alignment of `a[i..]` to `b[j..]`,
/// by plain recursion with memoisation.
fn best(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), (usize, isize)>) -> (usize, isize) {
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if i == a.len() {
        (b.len() - j, 0)
    } else if j == b.len() {
        (a.len() - i, 0)
    } else {
        let (c, s) = best(a, b, i + 1, j + 1, memo);
        let pair = if a[i] == b[j] { (c, s) } else { (c + 1, s - 1) };
        let (c, s) = best(a, b, i + 1, j, memo);
        let del = (c + 1, s);
        let (c, s) = best(a, b, i, j + 1, memo);
        let ins = (c + 1, s);
        pair.min(del).min(ins)
    };
    memo.insert((i, j), v);
    v
}

/// Independent reference: with cost and substitutions fixed, deletions and
/// insertions follow from `d - i = n - m`.
fn oracle(a: &[u8], b: &[u8]) -> EditStats {
    let (cost, neg_s) = best(a, b, 0, 0, &mut HashMap::new());
    let s = (-neg_s) as usize;
    let rest = cost - s;
    let (n, m) = (a.len() as isize, b.len() as isize);
    let d = ((rest as isize + n - m) / 2) as usize;
    EditStats { s, d, i: rest - d, n: a.len() }
}

fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|p: &Vec<u8>| {
                (0..alphabet).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

#[test]
fn matches_the_oracle_on_every_short_pair() {
    let seqs = all_sequences(4, 3);
    assert_eq!(seqs.len(), 121);
    for a in &seqs {
        for b in &seqs {
            assert_eq!(edit_distance(a, b), oracle(a, b), "{a:?} -> {b:?}");
        }
    }
}

#[test]
fn matches_the_oracle_on_random_long_pairs() {
    let mut rng = jepkd::rng::stream(0, "edit-oracle", &[]);
    for _ in 0..1000 {
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            let len = rng.random_range(0..=20);
            (0..len).map(|_| rng.random_range(0..4u8)).collect::<Vec<u8>>()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        assert_eq!(edit_distance(&a, &b), oracle(&a, &b), "{a:?} -> {b:?}");
    }
}

#[test]
fn documented_cer_examples() {
    assert_eq!(edit_distance(b"abc", b"axc"), EditStats { s: 1, d: 0, i: 0, n: 3 });
    assert_eq!(edit_distance(b"", b"ab"), EditStats { s: 0, d: 0, i: 2, n: 0 });
    assert_eq!(cer(&EditStats { s: 0, d: 0, i: 0, n: 5 }), 0.0);
    assert!((cer(&EditStats { s: 1, d: 0, i: 0, n: 3 }) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(cer(&EditStats { s: 0, d: 1, i: 2, n: 2 }), 1.5);
    assert_eq!(cer(&EditStats { s: 0, d: 0, i: 0, n: 0 }), 0.0);
    assert_eq!(cer(&EditStats { s: 0, d: 0, i: 1, n: 0 }), f64::INFINITY);
}

fn result(id: &str, reference: Vec<usize>, hypothesis: Vec<usize>) -> SampleResult {
    let stats = edit_distance(&reference, &hypothesis);
    SampleResult { id: id.into(), ctc_hypothesis: hypothesis.clone(), ctc_stats: stats, stats, reference, hypothesis, l1_gap: 0.5 }
}

#[test]
fn pooled_cer_is_edit_weighted_not_a_mean_of_rates() {
    let results = vec![result("a", vec![1], vec![2]), result("b", (1..=9).collect(), (1..=9).collect())];
    let report = EvalReport::from_results(&results, Split::Test, Mode::Jepkd, Memory::Generator, "h", 0, 5).unwrap();
    assert!((report.cer - 0.1).abs() < 1e-12);
    assert!((report.per_sample_mean_cer - 0.5).abs() < 1e-12);
    let pooled = report.edits.edits() as f64 / report.edits.n as f64;
    assert!((report.cer - pooled).abs() < 1e-12);
    assert_eq!(report.worst.len(), 1);
    assert_eq!(report.worst[0].id, "a");
    assert!(EvalReport::from_results(&[], Split::Test, Mode::Jepkd, Memory::Generator, "h", 0, 5).is_err());
}

fn report_with_cer(value: f64) -> EvalReport {
    let results = vec![result("a", vec![1, 2, 3], vec![1, 2, 3])];
    let mut r = EvalReport::from_results(&results, Split::Test, Mode::Jepkd, Memory::Generator, "h", 0, 5).unwrap();
    r.cer = value;
    r
}

#[test]
fn comparison_verdicts() {
    let same = compare(&report_with_cer(0.3), &report_with_cer(0.3), 0.0);
    assert!(same.rows.iter().all(|r| r.delta == 0.0));
    assert_eq!(same.verdict, Verdict::Unchanged);
    assert!(!same.violated);

    let better = compare(&report_with_cer(0.30), &report_with_cer(0.22), 0.0);
    assert!((better.cer_delta + 0.08).abs() < 1e-12);
    assert_eq!(better.verdict, Verdict::Improved);
    assert!(better.to_table().contains("verdict: improved"));

    let worse = compare(&report_with_cer(0.22), &report_with_cer(0.25), 0.0);
    assert_eq!(worse.verdict, Verdict::Regressed);
    assert!(worse.violated);
    assert!(!compare(&report_with_cer(0.22), &report_with_cer(0.25), 0.05).violated);
}

#[test]
fn malformed_reports_name_the_missing_field() {
    let mut value: serde_json::Value = serde_json::from_str(&report_with_cer(0.1).to_json().unwrap()).unwrap();
    value.as_object_mut().unwrap().remove("ctc_greedy_cer");
    match EvalReport::from_json(&value.to_string()) {
        Err(Error::Schema(msg)) => assert!(msg.contains("ctc_greedy_cer"), "{msg}"),
        other => panic!("expected a schema error, got {other:?}"),
    }
    let text = report_with_cer(0.1).to_json().unwrap();
    assert_eq!(EvalReport::from_json(&text).unwrap(), report_with_cer(0.1));
}

#[test]
fn corpus_reports_are_deterministic_and_mode_selects_memory() {
    let model = QuartetConfig { feature_dim: 16, attention_heads: 2, ff_dim: 32, ..QuartetConfig::default() };
    let spec = CorpusSpec { train: 4, val: 4, test: 8, ..CorpusSpec::default() };
    let (_, corpus) = generate_corpus(1, &spec, &model).unwrap();
    let q = Quartet::new(&model, 1).unwrap();
    let settings = EvalSettings::default();
    let a = evaluate_corpus(&q, &corpus.test, Split::Test, Mode::Jepkd, 1, "h", &settings).unwrap();
    let b = evaluate_corpus(&q, &corpus.test, Split::Test, Mode::Jepkd, 1, "h", &settings).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.memory, Memory::Generator);
    let base = evaluate_corpus(&q, &corpus.test, Split::Test, Mode::Baseline, 1, "h", &settings).unwrap();
    assert_eq!(base.memory, Memory::Encoder);
    // A fresh generator is the identity, so both memories coincide.
    assert_eq!(base.edits, a.edits);
    assert_eq!(base.l1_gap, a.l1_gap);
    assert!(evaluate_corpus(&q, &[], Split::Test, Mode::Jepkd, 1, "h", &settings).is_err());
}

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn edits_are_bounded_by_the_longer_sequence(a in seq(), b in seq()) {
        let e = edit_distance(&a, &b);
        prop_assert!(e.edits() <= a.len().max(b.len()));
        prop_assert!(e.s + e.d <= e.n);
        prop_assert_eq!(e.n, a.len());
        prop_assert_eq!(e.d as isize - e.i as isize, a.len() as isize - b.len() as isize);
    }

    #[test]
    fn swapping_arguments_swaps_deletions_and_insertions(a in seq(), b in seq()) {
        let forward = edit_distance(&a, &b);
        let back = edit_distance(&b, &a);
        prop_assert_eq!(forward.edits(), back.edits());
        prop_assert_eq!(forward.s, back.s);
        prop_assert_eq!((forward.d, forward.i), (back.i, back.d));
    }
}
