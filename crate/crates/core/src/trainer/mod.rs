//! The three-stage training state machine: Adam with warmup, parameter-group
//! freezing per stage, per-epoch validation and checkpoint cursors.
//!
//! Stage 1 trains encoder, generator and decoder on the decoder, CTC and L1
//! terms. Stage 2 freezes encoder and decoder and plays the least-squares
//! adversarial game between generator and discriminator. Stage 3 trains the
//! decoder alone on the generator's output.

mod adam;
mod checkpoint;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, GradBuffer, Moments, OptimState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_samples, Memory};
use crate::losses::{
    cross_entropy_smoothed, ctc_on_tape, l1_distance, lsgan_discriminator, lsgan_generator, CtcRecursion, LsGanConfig,
    StageLossWeights,
};
use crate::models::{sample_noise, Dropout, Quartet};
use crate::params::{Group, GroupSet};
use crate::rng::stream;
use crate::synthdata::{Corpus, PairedSample, Split};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Epoch counts, loss weights and optimiser settings of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub weights: StageLossWeights,
    pub d_steps_per_g_step: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_steps: u64,
    /// Restart the warmup ramp at the beginning of every stage.
    pub rewarm_per_stage: bool,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    pub lsgan: LsGanConfig,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 20,
            stage2_epochs: 10,
            stage3_epochs: 2,
            weights: StageLossWeights::default(),
            d_steps_per_g_step: 1,
            batch_size: 8,
            max_lr: 1e-3,
            warmup_steps: 200,
            rewarm_per_stage: false,
            adam: AdamConfig::default(),
            label_smoothing: 0.0,
            lsgan: LsGanConfig::default(),
        }
    }
}

impl StageSchedule {
    pub fn epochs(&self, stage: u32) -> usize {
        match stage {
            1 => self.stage1_epochs,
            2 => self.stage2_epochs,
            3 => self.stage3_epochs,
            _ => 0,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs + self.stage3_epochs
    }

    /// The stage-1-only arm with the same total number of epochs.
    pub fn baseline(&self) -> Self {
        Self { stage1_epochs: self.total_epochs(), stage2_epochs: 0, stage3_epochs: 0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("schedule.batch_size must be positive"));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(Error::invalid("schedule.d_steps_per_g_step must be positive"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::invalid("schedule.warmup_steps must be positive"));
        }
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return Err(Error::invalid(format!("schedule.max_lr must be positive, got {}", self.max_lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid(format!("schedule.label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::invalid("schedule.adam needs betas in [0, 1) and a positive eps"));
        }
        Ok(())
    }
}

/// Linear ramp to `max_lr` over `warmup_steps`, then inverse-square-root decay.
pub fn lr_at(step: u64, sched: &StageSchedule) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let (s, w) = (step as f64, sched.warmup_steps as f64);
    sched.max_lr * (s / w).min((w / s).sqrt())
}

/// Groups updated in `stage`.
pub fn trainable_groups(stage: u32) -> GroupSet {
    match stage {
        1 => GroupSet::of(&[Group::Encoder, Group::Generator, Group::Decoder]),
        2 => GroupSet::of(&[Group::Generator, Group::Discriminator]),
        3 => GroupSet::of(&[Group::Decoder]),
        _ => GroupSet::EMPTY,
    }
}

/// Position in the run: the next epoch to train is `epoch` of `stage`.
/// Stage 4 means every stage is complete.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cursor {
    pub stage: u32,
    pub epoch: u32,
    pub global_step: u64,
    /// Value of `global_step` when the current stage began.
    pub stage_start_step: u64,
}

impl Cursor {
    pub const FINISHED_STAGE: u32 = 4;

    fn start() -> Self {
        Self { stage: 1, epoch: 0, global_step: 0, stage_start_step: 0 }
    }

    /// Moves past finished and zero-epoch stages.
    fn normalise(&mut self, sched: &StageSchedule) {
        while self.stage < Self::FINISHED_STAGE && self.epoch as usize >= sched.epochs(self.stage) {
            self.stage += 1;
            self.epoch = 0;
            self.stage_start_step = self.global_step;
        }
    }
}

/// Mean loss terms over an epoch. Terms that a stage does not compute are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ctc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub g: Option<f64>,
}

/// One line of the metrics log. A record without an epoch is the validation
/// snapshot taken when a stage begins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: u32,
    pub epoch: Option<u32>,
    pub step: u64,
    pub loss: Option<LossComponents>,
    pub lr: Option<f64>,
    pub val_cer: f64,
    pub mean_l1_gap: f64,
}

impl MetricsRecord {
    /// Whether a log line was written before the state at `cursor`.
    pub fn precedes(&self, cursor: &Cursor) -> bool {
        self.stage < cursor.stage
            || (self.stage == cursor.stage
                && match self.epoch {
                    None => cursor.epoch > 0,
                    Some(e) => e < cursor.epoch,
                })
    }
}

/// Parameters, optimiser moments and cursor.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub quartet: Quartet,
    pub optim: OptimState,
    pub cursor: Cursor,
}

impl TrainState {
    pub fn fresh(config: &RunConfig) -> Result<Self> {
        let quartet = Quartet::new(&config.model, config.seed)?;
        let optim = OptimState::new(config.schedule.adam, quartet.store.len());
        let mut cursor = Cursor::start();
        cursor.normalise(&config.schedule);
        Ok(Self { quartet, optim, cursor })
    }
}

/// Receives metrics and end-of-epoch states (for logging and checkpointing).
pub trait TrainObserver {
    fn record(&mut self, record: &MetricsRecord) -> Result<()>;

    fn epoch_done(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for Vec<MetricsRecord> {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

#[derive(Default)]
struct SampleLoss {
    total: f64,
    ce: Option<f64>,
    ctc: Option<f64>,
    l1: Option<f64>,
    d: Option<f64>,
    g: Option<f64>,
}

#[derive(Default)]
struct Tally {
    total: (f64, usize),
    ce: (f64, usize),
    ctc: (f64, usize),
    l1: (f64, usize),
    d: (f64, usize),
    g: (f64, usize),
}

impl Tally {
    fn add(&mut self, s: &SampleLoss) {
        let put = |slot: &mut (f64, usize), v: Option<f64>| {
            if let Some(v) = v {
                slot.0 += v;
                slot.1 += 1;
            }
        };
        put(&mut self.total, Some(s.total));
        put(&mut self.ce, s.ce);
        put(&mut self.ctc, s.ctc);
        put(&mut self.l1, s.l1);
        put(&mut self.d, s.d);
        put(&mut self.g, s.g);
    }

    fn mean(&self) -> LossComponents {
        let m = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
        LossComponents {
            total: m(self.total).unwrap_or(0.0),
            ce: m(self.ce),
            ctc: m(self.ctc),
            l1: m(self.l1),
            d: m(self.d),
            g: m(self.g),
        }
    }
}

/// Runs stages of one configuration over an in-memory corpus.
pub struct Trainer<'a> {
    config: &'a RunConfig,
    corpus: &'a Corpus,
    pub state: TrainState,
    recursion: CtcRecursion,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a RunConfig, corpus: &'a Corpus) -> Result<Self> {
        Self::with_state(config, corpus, TrainState::fresh(config)?)
    }

    pub fn with_state(config: &'a RunConfig, corpus: &'a Corpus, mut state: TrainState) -> Result<Self> {
        config.validate()?;
        if corpus.train.is_empty() || corpus.val.is_empty() {
            return Err(Error::invalid("training needs non-empty train and val splits"));
        }
        state.cursor.normalise(&config.schedule);
        Ok(Self { config, corpus, state, recursion: CtcRecursion::from_env() })
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// Runs the requested stages, which must be strictly increasing. Stages
    /// already completed according to the cursor are skipped; a stage whose
    /// predecessor is incomplete is rejected.
    pub fn run(&mut self, stages: &[u32], observer: &mut dyn TrainObserver) -> Result<()> {
        validate_stage_list(stages)?;
        for &stage in stages {
            if self.state.cursor.stage > stage {
                continue;
            }
            if self.state.cursor.stage < stage {
                return Err(Error::invalid(format!(
                    "stage {stage} requested but stage {} is not complete",
                    self.state.cursor.stage
                )));
            }
            self.run_stage(stage, observer)?;
        }
        Ok(())
    }

    fn run_stage(&mut self, stage: u32, observer: &mut dyn TrainObserver) -> Result<()> {
        let sched = &self.config.schedule;
        self.state.quartet.store.set_trainable_groups(trainable_groups(stage));
        if self.state.cursor.epoch == 0 {
            let (val_cer, mean_l1_gap) = self.validate()?;
            observer.record(&MetricsRecord {
                stage,
                epoch: None,
                step: self.state.cursor.global_step,
                loss: None,
                lr: None,
                val_cer,
                mean_l1_gap,
            })?;
        }
        while self.state.cursor.stage == stage {
            let epoch = self.state.cursor.epoch;
            let loss = self.run_epoch(stage, epoch)?;
            let (val_cer, mean_l1_gap) = self.validate()?;
            let lr = lr_at(self.lr_step(), sched);
            observer.record(&MetricsRecord {
                stage,
                epoch: Some(epoch),
                step: self.state.cursor.global_step,
                loss: Some(loss),
                lr: Some(lr),
                val_cer,
                mean_l1_gap,
            })?;
            self.state.cursor.epoch += 1;
            self.state.cursor.normalise(sched);
            observer.epoch_done(&self.state)?;
        }
        Ok(())
    }

    fn lr_step(&self) -> u64 {
        let c = &self.state.cursor;
        if self.config.schedule.rewarm_per_stage {
            c.global_step - c.stage_start_step
        } else {
            c.global_step
        }
    }

    /// Validation CER and mean L1 gap with the decoder reading the generator output.
    pub fn validate(&self) -> Result<(f64, f64)> {
        let results = evaluate_samples(
            &self.state.quartet,
            &self.corpus.val,
            Split::Val,
            Memory::Generator,
            self.config.seed,
            self.config.eval.max_decode_steps,
        )?;
        let stats = results.iter().fold(crate::eval::EditStats::default(), |acc, r| acc.merge(r.stats));
        let gap = results.iter().map(|r| r.l1_gap).sum::<f64>() / results.len() as f64;
        Ok((crate::eval::cer(&stats), gap))
    }

    fn order(&self, stage: u32, epoch: u32) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.corpus.train.len()).collect();
        order.shuffle(&mut stream(self.config.seed, "shuffle", &[stage as u64, epoch as u64]));
        order
    }

    fn noise(&self, stage: u32, epoch: u32, sample: usize, k: usize) -> Tensor {
        let mut rng = stream(self.config.seed, "noise-z", &[stage as u64, epoch as u64, sample as u64, k as u64]);
        sample_noise(&mut rng, self.config.model.noise_dim)
    }

    fn dropout(&self, stage: u32, epoch: u32, sample: usize) -> Dropout {
        let rate = self.config.model.dropout;
        if rate == 0.0 {
            return Dropout::off();
        }
        Dropout::new(rate, stream(self.config.seed, "dropout", &[stage as u64, epoch as u64, sample as u64]))
    }

    fn run_epoch(&mut self, stage: u32, epoch: u32) -> Result<LossComponents> {
        let order = self.order(stage, epoch);
        let mut tally = Tally::default();
        for (batch_index, batch) in order.chunks(self.config.schedule.batch_size).enumerate() {
            let abort = |e: Error| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { stage, epoch: epoch as usize, batch: batch_index },
                other => other,
            };
            self.state.cursor.global_step += 1;
            let lr = lr_at(self.lr_step(), &self.config.schedule);
            let losses = match stage {
                1 => self.decoder_batch(stage, epoch, batch, lr).map_err(abort)?,
                2 => self.adversarial_batch(epoch, batch, lr).map_err(abort)?,
                3 => self.decoder_batch(stage, epoch, batch, lr).map_err(abort)?,
                _ => return Err(Error::invalid(format!("no stage {stage}"))),
            };
            for l in &losses {
                if !l.total.is_finite() {
                    return Err(Error::NonFiniteLoss { stage, epoch: epoch as usize, batch: batch_index });
                }
                tally.add(l);
            }
        }
        Ok(tally.mean())
    }

    fn apply(&mut self, grads: Vec<Gradients>, lr: f64) -> Result<()> {
        let mut buffer = GradBuffer::new(self.state.quartet.store.len());
        let n = grads.len();
        for g in &grads {
            buffer.add(g)?;
        }
        buffer.scale(1.0 / n as f64);
        self.state.optim.step(&mut self.state.quartet.store, &buffer, lr)
    }

    /// Stage 1 and stage 3: one update from the decoder-side objective.
    fn decoder_batch(&mut self, stage: u32, epoch: u32, batch: &[usize], lr: f64) -> Result<Vec<SampleLoss>> {
        let mut losses = Vec::with_capacity(batch.len());
        let mut grads = Vec::with_capacity(batch.len());
        for &i in batch {
            let sample = &self.corpus.train[i];
            let z = self.noise(stage, epoch, i, 0);
            let mut drop = self.dropout(stage, epoch, i);
            let (loss, g) = if stage == 1 {
                stage1_sample(&self.state.quartet, sample, &z, &mut drop, &self.config.schedule, self.recursion)?
            } else {
                let q = &self.state.quartet;
                let memory = q.generate(&q.encode(&sample.visemes)?, &z)?;
                decoder_only_sample(q, sample, memory, &mut drop, &self.config.schedule, self.recursion)?
            };
            losses.push(loss);
            grads.push(g);
        }
        self.apply(grads, lr)?;
        Ok(losses)
    }

    /// Stage 2: `d_steps_per_g_step` discriminator updates on detached
    /// generator output, then one generator update.
    fn adversarial_batch(&mut self, epoch: u32, batch: &[usize], lr: f64) -> Result<Vec<SampleLoss>> {
        let k = self.config.schedule.d_steps_per_g_step;
        let cfg = self.config.schedule.lsgan;
        let encoded: Vec<Tensor> = batch
            .iter()
            .map(|&i| self.state.quartet.encode(&self.corpus.train[i].visemes))
            .collect::<Result<_>>()?;
        let mut d_losses = vec![0.0; batch.len()];
        for step in 0..k {
            let mut grads = Vec::with_capacity(batch.len());
            for (j, &i) in batch.iter().enumerate() {
                let q = &self.state.quartet;
                let fake = q.generate(&encoded[j], &self.noise(2, epoch, i, step))?;
                let mut tape = Tape::with_param_grads(GroupSet::of(&[Group::Discriminator]));
                let real = tape.constant(self.corpus.train[i].teacher.clone())?;
                let fake = tape.constant(fake)?;
                let d_real = q.discriminator.forward(&mut tape, &q.store, real)?;
                let d_fake = q.discriminator.forward(&mut tape, &q.store, fake)?;
                let loss = lsgan_discriminator(&mut tape, d_real, d_fake, &cfg)?;
                d_losses[j] = tape.value(loss).item();
                grads.push(tape.backward(loss)?);
            }
            self.apply(grads, lr)?;
        }
        let mut losses = Vec::with_capacity(batch.len());
        let mut grads = Vec::with_capacity(batch.len());
        for (j, &i) in batch.iter().enumerate() {
            let q = &self.state.quartet;
            let mut tape = Tape::with_param_grads(GroupSet::of(&[Group::Generator]));
            let v = tape.constant(encoded[j].clone())?;
            let g = q.generator.forward(&mut tape, &q.store, v, &self.noise(2, epoch, i, k))?;
            let d_fake = q.discriminator.forward(&mut tape, &q.store, g)?;
            let a = tape.constant(self.corpus.train[i].teacher.clone())?;
            let l1 = l1_distance(&mut tape, g, a)?;
            let loss = lsgan_generator(&mut tape, d_fake, l1, &cfg)?;
            let g_loss = tape.value(loss).item();
            losses.push(SampleLoss {
                total: d_losses[j] + g_loss,
                l1: Some(tape.value(l1).item()),
                d: Some(d_losses[j]),
                g: Some(g_loss),
                ..SampleLoss::default()
            });
            grads.push(tape.backward(loss)?);
        }
        self.apply(grads, lr)?;
        Ok(losses)
    }
}

/// Rejects stage lists that are empty, out of order, repeated or out of range.
pub fn validate_stage_list(stages: &[u32]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::invalid("no stages requested"));
    }
    if let Some(&bad) = stages.iter().find(|&&s| !(1..=3).contains(&s)) {
        return Err(Error::invalid(format!("stage {bad} does not exist; stages are 1, 2, 3")));
    }
    if stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("stages must be listed in increasing order, got {stages:?}")));
    }
    Ok(())
}

/// Cross-entropy and (when feasible) CTC for the decoder reading `memory`.
fn decoder_terms<'p>(
    tape: &mut Tape<'p>,
    q: &'p Quartet,
    memory: Var,
    tokens: &[usize],
    drop: &mut Dropout,
    sched: &StageSchedule,
    recursion: CtcRecursion,
) -> Result<(Var, Option<Var>)> {
    let out = q.decoder.forward(tape, &q.store, memory, tokens, drop)?;
    let ce = cross_entropy_smoothed(tape, out.logits, &q.decoder.targets(tokens), sched.label_smoothing)?;
    let lp = tape.log_softmax(out.ctc_logits)?;
    let ctc = ctc_on_tape(tape, lp, tokens, recursion)?;
    Ok((ce, ctc))
}

fn stage1_sample(
    q: &Quartet,
    sample: &PairedSample,
    z: &Tensor,
    drop: &mut Dropout,
    sched: &StageSchedule,
    recursion: CtcRecursion,
) -> Result<(SampleLoss, Gradients)> {
    let mut tape = Tape::with_param_grads(trainable_groups(1));
    let x = tape.constant(sample.visemes.clone())?;
    let v = q.encoder.forward(&mut tape, &q.store, x, drop)?;
    let g = q.generator.forward(&mut tape, &q.store, v, z)?;
    let a = tape.constant(sample.teacher.clone())?;
    let l1 = l1_distance(&mut tape, g, a)?;
    let (ce, ctc) = decoder_terms(&mut tape, q, g, &sample.tokens, drop, sched, recursion)?;
    let total = sched.weights.stage1(&mut tape, ctc, l1, ce)?;
    let loss = SampleLoss {
        total: tape.value(total).item(),
        ce: Some(tape.value(ce).item()),
        ctc: ctc.map(|c| tape.value(c).item()),
        l1: Some(tape.value(l1).item()),
        ..SampleLoss::default()
    };
    Ok((loss, tape.backward(total)?))
}

/// The stage-3 objective with the decoder reading a fixed `memory`.
fn decoder_only_sample(
    q: &Quartet,
    sample: &PairedSample,
    memory: Tensor,
    drop: &mut Dropout,
    sched: &StageSchedule,
    recursion: CtcRecursion,
) -> Result<(SampleLoss, Gradients)> {
    let mut tape = Tape::with_param_grads(GroupSet::of(&[Group::Decoder]));
    let m = tape.constant(memory)?;
    let (ce, ctc) = decoder_terms(&mut tape, q, m, &sample.tokens, drop, sched, recursion)?;
    let total = sched.weights.stage3(&mut tape, ctc, ce)?;
    let loss = SampleLoss {
        total: tape.value(total).item(),
        ce: Some(tape.value(ce).item()),
        ctc: ctc.map(|c| tape.value(c).item()),
        ..SampleLoss::default()
    };
    Ok((loss, tape.backward(total)?))
}

/// Trains only the decoder of a fresh quartet with the teacher features as
/// its memory, giving the upper bound a perfect student could reach. Returns
/// the model and the per-epoch mean loss.
pub fn train_topline(config: &RunConfig, corpus: &Corpus, epochs: usize) -> Result<(Quartet, Vec<f64>)> {
    config.validate()?;
    let sched = &config.schedule;
    let recursion = CtcRecursion::from_env();
    let mut q = Quartet::new(&config.model, config.seed)?;
    q.store.set_trainable_groups(GroupSet::of(&[Group::Decoder]));
    let mut optim = OptimState::new(sched.adam, q.store.len());
    let mut step = 0u64;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut stream(config.seed, "shuffle-topline", &[epoch as u64]));
        let mut sum = 0.0;
        for batch in order.chunks(sched.batch_size) {
            step += 1;
            let mut buffer = GradBuffer::new(q.store.len());
            for &i in batch {
                let s = &corpus.train[i];
                let (loss, g) = decoder_only_sample(&q, s, s.teacher.clone(), &mut Dropout::off(), sched, recursion)?;
                sum += loss.total;
                buffer.add(&g)?;
            }
            buffer.scale(1.0 / batch.len() as f64);
            optim.step(&mut q.store, &buffer, lr_at(step, sched))?;
        }
        history.push(sum / corpus.train.len() as f64);
    }
    Ok((q, history))
}
