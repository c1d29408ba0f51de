use std::collections::HashSet;

use jepkd::featfile::{decode_features, encode_features, read_features, write_features};
use jepkd::models::QuartetConfig;
use jepkd::synthdata::{
    bigram_total_variation, conditional_entropy_bits, generate_corpus, generate_sentences, viterbi_decode, BigramLm, CorpusSpec,
    VisemeMap, Vocabulary, World,
};
use jepkd::{Error, FormatErrorKind, Tensor};
use proptest::prelude::*;

fn small_spec() -> CorpusSpec {
    CorpusSpec { train: 60, val: 20, test: 20, ..CorpusSpec::default() }
}

fn token_error(world: &World, sentences: &[Vec<usize>]) -> f64 {
    let (mut wrong, mut total) = (0usize, 0usize);
    for y in sentences {
        let guess = viterbi_decode(&world.lm, &world.vmap, &world.vmap.project(y));
        wrong += y.iter().zip(&guess).filter(|(a, b)| a != b).count();
        total += y.len();
    }
    wrong as f64 / total as f64
}

fn joint_log_prob(lm: &BigramLm, tokens: &[usize]) -> f64 {
    let mut prev = 0;
    tokens
        .iter()
        .map(|&t| {
            let p = lm.prob(prev, t).ln();
            prev = t;
            p
        })
        .sum()
}

/// Every token sequence that projects onto `classes`.
fn preimages(vmap: &VisemeMap, classes: &[usize]) -> Vec<Vec<usize>> {
    classes.iter().fold(vec![Vec::new()], |acc, &c| {
        acc.iter()
            .flat_map(|prefix| {
                vmap.members(c).into_iter().map(move |t| {
                    let mut p = prefix.clone();
                    p.push(t);
                    p
                })
            })
            .collect()
    })
}

#[test]
fn viseme_projection_examples() {
    let vmap = VisemeMap::paired(Vocabulary::new(24).unwrap());
    assert_eq!(vmap.project(&[1, 2]), vec![1, 1]);
    assert_eq!(vmap.classes(), 12);
    let odd = VisemeMap::paired(Vocabulary::new(5).unwrap());
    assert_eq!(odd.members(3), vec![5]);
    let custom = VisemeMap::from_classes(&[1, 1, 2, 3]).unwrap();
    assert_eq!(custom.project(&[3, 4, 1]), vec![2, 3, 1]);
    assert!(VisemeMap::from_classes(&[1, 2, 3]).is_err());
    assert!(VisemeMap::from_classes(&[1, 1, 3]).is_err());

    let obs = vmap.observe(&[3, 4, 24]).unwrap();
    assert_eq!(obs.shape(), &[3, 12]);
    assert_eq!(obs.at(0, 1), 1.0);
    assert_eq!(obs.at(1, 1), 1.0);
    assert_eq!(obs.at(2, 11), 1.0);
    assert_eq!(obs.data().iter().sum::<f64>(), 3.0);
}

#[test]
fn language_model_rows_are_distributions_and_seeded() {
    let vmap = VisemeMap::paired(Vocabulary::new(24).unwrap());
    let lm = BigramLm::build(7, &vmap, 40.0).unwrap();
    for r in 0..=24 {
        assert!((lm.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(lm.row(r).iter().all(|&p| p > 0.0));
    }
    assert_eq!(BigramLm::build(7, &vmap, 40.0).unwrap(), lm);
    assert_ne!(BigramLm::build(8, &vmap, 40.0).unwrap(), lm);
    assert!(BigramLm::build(7, &vmap, 0.0).is_err());
    assert!(BigramLm::build(7, &vmap, -1.0).is_err());
    let uniform = BigramLm::build(7, &vmap, 1.0).unwrap();
    assert!(uniform.row(3).iter().all(|&p| (p - 1.0 / 24.0).abs() < 1e-15));
}

#[test]
fn default_language_model_makes_tokens_recoverable() {
    let spec = CorpusSpec::default();
    let world = World::new(0, &spec, &QuartetConfig::default()).unwrap();
    let h = conditional_entropy_bits(&world.lm, &world.vmap, 0, 100_000, &spec);
    assert!(h < 0.3, "H(token | viseme, prev) = {h:.3} bits");
    let uniform = BigramLm::build(0, &world.vmap, 1.0).unwrap();
    let h_uniform = conditional_entropy_bits(&uniform, &world.vmap, 0, 100_000, &spec);
    assert!((h_uniform - 1.0).abs() < 0.01, "{h_uniform}");
}

#[test]
fn train_bigrams_match_the_language_model() {
    let spec = CorpusSpec::default();
    let world = World::new(0, &spec, &QuartetConfig::default()).unwrap();
    let [train, _, _] = generate_sentences(0, &spec, &world.lm);
    let tv = bigram_total_variation(&world.lm, &spec, &train);
    assert!(tv < 0.05, "total variation {tv:.4}");
}

#[test]
fn viterbi_matches_exhaustive_search() {
    let vmap = VisemeMap::paired(Vocabulary::new(6).unwrap());
    let lm = BigramLm::build(11, &vmap, 5.0).unwrap();
    let mut rng = jepkd::rng::stream(11, "test", &[]);
    for len in 1..=6 {
        for _ in 0..10 {
            let y = lm.sample_sentence(&mut rng, len);
            let classes = vmap.project(&y);
            let best = preimages(&vmap, &classes)
                .into_iter()
                .map(|p| joint_log_prob(&lm, &p))
                .fold(f64::NEG_INFINITY, f64::max);
            let got = viterbi_decode(&lm, &vmap, &classes);
            assert_eq!(vmap.project(&got), classes);
            assert!((joint_log_prob(&lm, &got) - best).abs() < 1e-12, "length {len}");
        }
    }
}

#[test]
fn viterbi_oracle_separates_recoverable_from_uniform_corpora() {
    let model = QuartetConfig::default();
    let spec = CorpusSpec::default();
    let world = World::new(0, &spec, &model).unwrap();
    let [_, _, test] = generate_sentences(0, &spec, &world.lm);
    let recoverable = token_error(&world, &test);
    assert!(recoverable < 0.05, "default corpus token error {recoverable:.4}");

    let flat = CorpusSpec { kappa: 1.0, ..spec };
    let world = World::new(0, &flat, &model).unwrap();
    let [_, _, test] = generate_sentences(0, &flat, &world.lm);
    let chance = token_error(&world, &test);
    assert!((chance - 0.5).abs() < 0.03, "uniform corpus token error {chance:.4}");
}

#[test]
fn default_corpus_sizes_lengths_and_disjointness() {
    let spec = CorpusSpec::default();
    let world = World::new(3, &spec, &QuartetConfig::default()).unwrap();
    let splits = generate_sentences(3, &spec, &world.lm);
    assert_eq!(splits.iter().map(Vec::len).collect::<Vec<_>>(), vec![2000, 200, 200]);
    for split in &splits {
        assert!(split.iter().all(|y| (6..=12).contains(&y.len()) && y.iter().all(|&t| (1..=24).contains(&t))));
    }
    let sets: Vec<HashSet<&Vec<usize>>> = splits.iter().map(|s| s.iter().collect()).collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(sets[i].is_disjoint(&sets[j]), "splits {i} and {j} share a sentence");
        }
    }
    assert_eq!(generate_sentences(3, &spec, &world.lm), splits);
}

#[test]
fn paired_samples_are_aligned_and_reproducible() {
    let model = QuartetConfig::default();
    let spec = small_spec();
    let (world, corpus) = generate_corpus(5, &spec, &model).unwrap();
    let (_, again) = generate_corpus(5, &spec, &model).unwrap();
    assert_eq!(corpus, again);
    for s in corpus.train.iter().chain(&corpus.val).chain(&corpus.test) {
        let t = s.tokens.len();
        assert_eq!(s.visemes.shape(), &[t, 12]);
        assert_eq!(s.teacher.shape(), &[t, model.feature_dim]);
        assert_eq!(s.visemes, world.vmap.observe(&s.tokens).unwrap());
        assert_eq!(s.teacher, world.teacher.features(&s.tokens).unwrap());
    }
    let (_, other) = generate_corpus(6, &spec, &model).unwrap();
    assert_ne!(other.train[0].tokens, corpus.train[0].tokens);
}

#[test]
fn feature_file_layout_and_errors() {
    let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.25, 0.0, -0.125]).unwrap();
    let bytes = encode_features(&t);
    assert_eq!(bytes.len(), 44);
    assert_eq!(&bytes[..4], b"JPKD");
    assert_eq!(decode_features(&bytes).unwrap(), t);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.feat");
    write_features(&path, &t).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 44);
    assert_eq!(read_features(&path).unwrap(), t);

    let kind = |b: &[u8]| match decode_features(b) {
        Err(Error::Format { kind, .. }) => kind,
        other => panic!("expected a format error, got {other:?}"),
    };
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(kind(&bad), FormatErrorKind::BadMagic);
    assert!(decode_features(&bad).unwrap_err().to_string().contains("bad magic"));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(kind(&bad), FormatErrorKind::BadVersion);
    assert_eq!(kind(&bytes[..40]), FormatErrorKind::Truncated);
    assert_eq!(kind(&bytes[..6]), FormatErrorKind::Truncated);
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(kind(&long), FormatErrorKind::TrailingBytes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_files_round_trip_bitwise(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = jepkd::rng::stream(seed, "feat", &[]);
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::random_range(&mut rng, -1e3f32..1e3) as f64).collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        prop_assert_eq!(decode_features(&encode_features(&t)).unwrap(), t);
    }

    #[test]
    fn projection_never_increases_distinct_symbols(y in prop::collection::vec(1usize..=24, 0..20)) {
        let vmap = VisemeMap::paired(Vocabulary::new(24).unwrap());
        let before: HashSet<_> = y.iter().collect();
        let projected = vmap.project(&y);
        let after: HashSet<_> = projected.iter().collect();
        prop_assert!(after.len() <= before.len());
        prop_assert_eq!(projected.len(), y.len());
    }
}
