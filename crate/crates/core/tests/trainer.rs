use jepkd::eval::{cer, evaluate_samples, EditStats, Memory};
use jepkd::models::{Quartet, QuartetConfig};
use jepkd::synthdata::{generate_corpus, Corpus, CorpusSpec, Split};
use jepkd::trainer::{
    lr_at, AdamConfig, Checkpoint, GradBuffer, MetricsRecord, OptimState, StageSchedule, TrainObserver, TrainState, Trainer,
};
use jepkd::{Error, Group, ParameterStore, RunConfig, Tensor};

fn micro_config() -> RunConfig {
    RunConfig {
        seed: 2,
        corpus: CorpusSpec { train: 24, val: 6, test: 6, ..CorpusSpec::default() },
        model: QuartetConfig { feature_dim: 16, attention_heads: 2, ff_dim: 32, ..QuartetConfig::default() },
        schedule: StageSchedule { stage1_epochs: 2, stage2_epochs: 1, stage3_epochs: 1, warmup_steps: 10, ..StageSchedule::default() },
        ..RunConfig::default()
    }
}

fn corpus_for(config: &RunConfig) -> Corpus {
    generate_corpus(config.seed, &config.corpus, &config.model).unwrap().1
}

fn digests(store: &ParameterStore) -> Vec<[u8; 32]> {
    Group::ALL.iter().map(|&g| store.group_digest(g)).collect()
}

fn changed_groups(before: &[[u8; 32]], after: &[[u8; 32]]) -> Vec<Group> {
    Group::ALL.iter().zip(before.iter().zip(after)).filter(|(_, (b, a))| b != a).map(|(&g, _)| g).collect()
}

#[test]
fn each_stage_changes_exactly_its_groups() {
    let config = micro_config();
    let corpus = corpus_for(&config);
    let mut trainer = Trainer::new(&config, &corpus).unwrap();
    let mut log = Vec::new();
    let expected = [
        vec![Group::Encoder, Group::Generator, Group::Decoder],
        vec![Group::Generator, Group::Discriminator],
        vec![Group::Decoder],
    ];
    for (stage, groups) in (1..=3).zip(expected) {
        let before = digests(&trainer.state.quartet.store);
        trainer.run(&[stage], &mut log).unwrap();
        let after = digests(&trainer.state.quartet.store);
        assert_eq!(changed_groups(&before, &after), groups, "stage {stage}");
    }
    assert_eq!(trainer.state.cursor.stage, 4);
    // One stage-start record plus one per epoch.
    assert_eq!(log.len(), 3 + 2 + 1 + 1);
    let stage2: Vec<&MetricsRecord> = log.iter().filter(|r| r.stage == 2 && r.epoch.is_some()).collect();
    let loss = stage2[0].loss.as_ref().unwrap();
    assert!(loss.d.is_some() && loss.g.is_some() && loss.l1.is_some() && loss.ce.is_none());
}

#[test]
fn identical_runs_produce_identical_logs_and_parameters() {
    let config = micro_config();
    let corpus = corpus_for(&config);
    let run = || {
        let mut trainer = Trainer::new(&config, &corpus).unwrap();
        let mut log = Vec::new();
        trainer.run(&[1, 2, 3], &mut log).unwrap();
        (log, Checkpoint::capture(&trainer.state, config.config_hash(), config.seed).encode())
    };
    let (log_a, ckpt_a) = run();
    let (log_b, ckpt_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn zero_epoch_stages_leave_parameters_untouched() {
    let mut config = micro_config();
    config.schedule.stage1_epochs = 0;
    config.schedule.stage2_epochs = 0;
    config.schedule.stage3_epochs = 0;
    let corpus = corpus_for(&config);
    let fresh = Quartet::new(&config.model, config.seed).unwrap();
    let mut trainer = Trainer::new(&config, &corpus).unwrap();
    let mut log = Vec::new();
    trainer.run(&[1, 2, 3], &mut log).unwrap();
    assert!(log.is_empty());
    assert_eq!(digests(&trainer.state.quartet.store), digests(&fresh.store));
    assert_eq!(trainer.state.cursor.global_step, 0);

    let mut config = micro_config();
    config.schedule.stage3_epochs = 0;
    let mut trainer = Trainer::new(&config, &corpus).unwrap();
    trainer.run(&[1, 2], &mut log).unwrap();
    let after_two = digests(&trainer.state.quartet.store);
    trainer.run(&[3], &mut log).unwrap();
    assert_eq!(digests(&trainer.state.quartet.store), after_two);
}

#[test]
fn baseline_schedule_is_stage_one_for_the_same_total() {
    let sched = StageSchedule::default();
    let base = sched.baseline();
    assert_eq!((base.stage1_epochs, base.stage2_epochs, base.stage3_epochs), (32, 0, 0));
    assert_eq!(base.total_epochs(), sched.total_epochs());
    assert_eq!(StageSchedule { stage1_epochs: 0, ..sched.clone() }.baseline(), StageSchedule { stage1_epochs: 0, ..sched }.baseline());
}

#[test]
fn stage_order_is_enforced() {
    let config = micro_config();
    let corpus = corpus_for(&config);
    let mut trainer = Trainer::new(&config, &corpus).unwrap();
    let mut log = Vec::new();
    assert!(trainer.run(&[2], &mut log).is_err());
    assert!(trainer.run(&[3, 1], &mut log).is_err());
    assert!(log.is_empty());
}

#[test]
fn learning_rate_schedule_examples_and_continuity() {
    let s = StageSchedule { warmup_steps: 200, ..StageSchedule::default() };
    assert!((lr_at(200, &s) - 1e-3).abs() < 1e-15);
    assert!((lr_at(100, &s) - 5e-4).abs() < 1e-15);
    assert!((lr_at(800, &s) - 5e-4).abs() < 1e-15);
    for w in [1u64, 10, 200, 5000] {
        let s = StageSchedule { warmup_steps: w, ..StageSchedule::default() };
        let at = lr_at(w, &s);
        for step in [w.saturating_sub(1).max(1), w + 1] {
            assert!((lr_at(step, &s) - at).abs() <= s.max_lr / w as f64 + 1e-15);
        }
    }
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut store = ParameterStore::new();
    let id = store.register("w", Group::Decoder, Tensor::new(vec![2], vec![1.0, -3.0]).unwrap()).unwrap();
    let mut opt = OptimState::new(AdamConfig::default(), 1);
    let mut grads = GradBuffer::new(1);
    grads.set(id, Tensor::new(vec![2], vec![0.5, 0.0]).unwrap());
    opt.step(&mut store, &grads, 1e-3).unwrap();
    let w = store.value(id);
    assert!((w.data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
    assert_eq!(w.data()[1], -3.0);

    store.set_trainable(Group::Decoder, false);
    let before = store.value(id).clone();
    opt.step(&mut store, &grads, 1e-3).unwrap();
    assert_eq!(store.value(id), &before);

    store.set_trainable(Group::Decoder, true);
    let mut bad = GradBuffer::new(1);
    bad.set(id, Tensor::zeros(&[3]));
    assert!(opt.step(&mut store, &bad, 1e-3).is_err());
}

/// Captures a checkpoint after every epoch and stops after `stop_after` epochs.
struct Interrupt {
    stop_after: usize,
    seen: usize,
    hash: [u8; 32],
    last: Option<Checkpoint>,
    log: Vec<MetricsRecord>,
}

impl TrainObserver for Interrupt {
    fn record(&mut self, record: &MetricsRecord) -> jepkd::Result<()> {
        self.log.push(record.clone());
        Ok(())
    }

    fn epoch_done(&mut self, state: &TrainState) -> jepkd::Result<()> {
        self.last = Some(Checkpoint::capture(state, self.hash, 0));
        self.seen += 1;
        if self.seen == self.stop_after {
            return Err(Error::invalid("interrupted"));
        }
        Ok(())
    }
}

#[test]
fn resuming_from_a_checkpoint_matches_a_straight_run() {
    let config = micro_config();
    let corpus = corpus_for(&config);
    let hash = config.config_hash();

    let mut straight = Trainer::new(&config, &corpus).unwrap();
    let mut straight_log = Vec::new();
    straight.run(&[1, 2, 3], &mut straight_log).unwrap();
    let expected = Checkpoint::capture(&straight.state, hash, 0).encode();

    for stop_after in 1..=3 {
        let mut first = Trainer::new(&config, &corpus).unwrap();
        let mut obs = Interrupt { stop_after, seen: 0, hash, last: None, log: Vec::new() };
        assert!(first.run(&[1, 2, 3], &mut obs).is_err());
        let bytes = obs.last.unwrap().encode();
        let restored = Checkpoint::decode(&bytes).unwrap().restore(&config).unwrap();
        let mut second = Trainer::with_state(&config, &corpus, restored).unwrap();
        let mut log = obs.log;
        second.run(&[1, 2, 3], &mut log).unwrap();
        assert_eq!(Checkpoint::capture(&second.state, hash, 0).encode(), expected, "stopped after {stop_after}");
        assert_eq!(log, straight_log);
    }
}

#[test]
fn checkpoint_files_round_trip_and_reject_damage() {
    let config = micro_config();
    let corpus = corpus_for(&config);
    let mut trainer = Trainer::new(&config, &corpus).unwrap();
    trainer.run(&[1], &mut Vec::new()).unwrap();
    let ckpt = Checkpoint::capture(&trainer.state, config.config_hash(), config.seed);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.encode(), std::fs::read(&path).unwrap());
    let restored = loaded.restore(&config).unwrap();
    assert_eq!(digests(&restored.quartet.store), digests(&trainer.state.quartet.store));
    assert_eq!(restored.optim, trainer.state.optim);
    assert_eq!(restored.cursor, trainer.state.cursor);

    let bytes = ckpt.encode();
    let err = Checkpoint::decode(&bytes[..bytes.len() / 2]).unwrap_err();
    assert_eq!(err.to_string(), "truncated checkpoint");
    let mut bad = bytes.clone();
    bad[1] = b'?';
    assert!(Checkpoint::decode(&bad).unwrap_err().to_string().contains("bad magic"));

    let mut other = config.clone();
    other.schedule.stage3_epochs = 5;
    let msg = ckpt.restore(&other).unwrap_err().to_string();
    assert!(msg.contains(&config.config_hash_hex()) && msg.contains(&other.config_hash_hex()), "{msg}");
}

#[test]
fn non_finite_training_data_aborts_with_the_batch() {
    let config = micro_config();
    let mut corpus = corpus_for(&config);
    corpus.train[5].teacher.data_mut()[0] = f64::NAN;
    let mut trainer = Trainer::new(&config, &corpus).unwrap();
    match trainer.run(&[1], &mut Vec::new()) {
        Err(Error::NonFiniteLoss { stage: 1, epoch: 0, batch }) => assert!(batch < 3),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

/// Four sentences, used as both train and validation data.
fn overfit_setup() -> (RunConfig, Corpus) {
    let mut config = micro_config();
    config.model = QuartetConfig::default();
    config.corpus.train = 4;
    config.schedule = StageSchedule {
        stage1_epochs: 125,
        stage2_epochs: 0,
        stage3_epochs: 0,
        batch_size: 1,
        max_lr: 3e-3,
        warmup_steps: 48,
        ..StageSchedule::default()
    };
    let mut corpus = corpus_for(&config);
    corpus.val = corpus.train.clone();
    (config, corpus)
}

#[test]
fn four_sentences_are_memorised() {
    let (config, corpus) = overfit_setup();
    let mut trainer = Trainer::new(&config, &corpus).unwrap();
    let mut log = Vec::new();
    trainer.run(&[1], &mut log).unwrap();
    let epochs: Vec<&MetricsRecord> = log.iter().filter(|r| r.epoch.is_some()).collect();
    let ce: Vec<f64> = epochs.iter().map(|r| r.loss.as_ref().unwrap().ce.unwrap()).collect();
    let steps_per_epoch = 4;

    let warm = config.schedule.warmup_steps as usize / steps_per_epoch;
    let window = &epochs[warm..warm + 6];
    let totals: Vec<f64> = window.iter().map(|r| r.loss.as_ref().unwrap().total).collect();
    let rises = totals.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rises <= 1, "loss after warmup {totals:?}");

    let reached = ce.iter().position(|&c| c < 0.05).map(|e| (e + 1) * steps_per_epoch);
    assert!(matches!(reached, Some(steps) if steps <= 500), "ce never below 0.05: last {:?}", ce.last());

    let results =
        evaluate_samples(&trainer.state.quartet, &corpus.train, Split::Train, Memory::Generator, config.seed, 20).unwrap();
    let stats = results.iter().fold(EditStats::default(), |acc, r| acc.merge(r.stats));
    assert!(cer(&stats) < 0.02, "train CER {}", cer(&stats));
}

#[test]
fn indistinguishable_inputs_drive_the_discriminator_to_a_half() {
    let mut config = micro_config();
    config.corpus.train = 16;
    config.schedule = StageSchedule {
        stage1_epochs: 0,
        stage2_epochs: 30,
        stage3_epochs: 0,
        warmup_steps: 4,
        max_lr: 3e-3,
        ..StageSchedule::default()
    };
    let mut corpus = corpus_for(&config);
    let fresh = Quartet::new(&config.model, config.seed).unwrap();
    for s in corpus.train.iter_mut().chain(corpus.val.iter_mut()) {
        s.teacher = fresh.encode(&s.visemes).unwrap();
    }
    let mut trainer = Trainer::new(&config, &corpus).unwrap();
    let mut log = Vec::new();
    trainer.run(&[2], &mut log).unwrap();
    assert!(log[0].mean_l1_gap < 1e-12);
    let d: Vec<f64> = log.iter().filter_map(|r| r.loss.as_ref()?.d).collect();
    let tail = &d[d.len() - 5..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!((mean - 0.25).abs() < 0.02, "d loss tail {tail:?}");
    let first = &corpus.train[0];
    let q = &trainer.state.quartet;
    let score = q.discriminate(&first.teacher).unwrap();
    assert!((score - 0.5).abs() < 0.1, "D(a) = {score}");
}
