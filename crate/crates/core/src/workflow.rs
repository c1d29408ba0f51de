//! File-backed training and evaluation: a run directory holds the latest
//! checkpoint, one snapshot per completed stage and the metrics log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataset::read_corpus;
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, EvalReport, Mode};
use crate::featfile::write_atomic;
use crate::synthdata::Split;
use crate::trainer::{Checkpoint, MetricsRecord, TrainObserver, TrainState, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.jpkc";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn stage_checkpoint_file(stage: u32) -> String {
    format!("stage{stage}.jpkc")
}

/// Reads a metrics log, ignoring a torn final line.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (k, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if k + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(e) => return Err(Error::Schema(format!("{} line {}: {e}", path.display(), k + 1))),
        }
    }
    Ok(out)
}

fn render_metrics(records: &[MetricsRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

struct DirObserver<'a> {
    dir: &'a Path,
    config_hash: [u8; 32],
    teacher_seed: u64,
    metrics: fs::File,
    stage: u32,
}

impl TrainObserver for DirObserver<'_> {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        let line = serde_json::to_string(record)? + "\n";
        self.metrics.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
        self.metrics.flush().map_err(|e| Error::io(&path, e))?;
        self.stage = record.stage;
        Ok(())
    }

    fn epoch_done(&mut self, state: &TrainState) -> Result<()> {
        let ck = Checkpoint::capture(state, self.config_hash, self.teacher_seed);
        let bytes = ck.encode();
        if state.cursor.stage > self.stage {
            write_atomic(&self.dir.join(stage_checkpoint_file(self.stage)), &bytes)?;
        }
        write_atomic(&self.dir.join(CHECKPOINT_FILE), &bytes)
    }
}

/// Outcome of [`train_in_dir`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub resumed: bool,
    pub records: Vec<MetricsRecord>,
    pub state: TrainState,
}

/// Trains `stages` of `config` on the corpus in `data_dir`, checkpointing
/// into `out_dir` after every epoch. An existing checkpoint is resumed (and
/// the metrics log cut back to it) unless `fresh` is set.
pub fn train_in_dir(config: &RunConfig, data_dir: &Path, out_dir: &Path, stages: &[u32], fresh: bool) -> Result<TrainSummary> {
    crate::trainer::validate_stage_list(stages)?;
    let corpus = read_corpus(data_dir, config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let (state, resumed) = if ck_path.exists() && !fresh {
        (Checkpoint::load(&ck_path)?.restore(config)?, true)
    } else {
        let stale = (1..=3).map(stage_checkpoint_file).chain(std::iter::once(CHECKPOINT_FILE.to_string()));
        for name in stale {
            let p = out_dir.join(name);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        (TrainState::fresh(config)?, false)
    };
    let kept: Vec<MetricsRecord> = if resumed {
        read_metrics(&metrics_path)?.into_iter().filter(|r| r.precedes(&state.cursor)).collect()
    } else {
        Vec::new()
    };
    write_atomic(&metrics_path, render_metrics(&kept)?.as_bytes())?;
    let metrics = fs::OpenOptions::new().append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut observer = DirObserver {
        dir: out_dir,
        config_hash: config.config_hash(),
        teacher_seed: config.seed,
        metrics,
        stage: state.cursor.stage,
    };
    let mut trainer = Trainer::with_state(config, &corpus, state)?;
    trainer.run(stages, &mut observer)?;
    if !ck_path.exists() {
        Checkpoint::capture(&trainer.state, observer.config_hash, observer.teacher_seed).save(&ck_path)?;
    }
    Ok(TrainSummary { resumed, records: read_metrics(&metrics_path)?, state: trainer.into_state() })
}

/// Loads a checkpoint for `config` and evaluates `split` of the corpus in `data_dir`.
pub fn eval_checkpoint(config: &RunConfig, checkpoint: &Path, data_dir: &Path, split: Split, mode: Mode) -> Result<EvalReport> {
    let state = Checkpoint::load(checkpoint)?.restore(config)?;
    let corpus = read_corpus(data_dir, config)?;
    evaluate_corpus(
        &state.quartet,
        corpus.split(split),
        split,
        mode,
        config.seed,
        &config.config_hash_hex(),
        &config.eval,
    )
}

/// Default report location inside a run directory.
pub fn report_path(out_dir: &Path, split: Split, mode: Mode) -> PathBuf {
    out_dir.join(format!("eval-{split}-{}.json", mode.name()))
}
