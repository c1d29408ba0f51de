//! `jepkd`: generate the synthetic corpus, train the staged quartet, evaluate
//! checkpoints, compare runs and self-verify the numerical core.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use jepkd::dataset::write_corpus;
use jepkd::error::Error;
use jepkd::eval::{compare, EvalReport, Mode};
use jepkd::selftest;
use jepkd::synthdata::Split;
use jepkd::workflow::{eval_checkpoint, report_path, train_in_dir, CHECKPOINT_FILE};
use jepkd::RunConfig;

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "jepkd", version, about = "Joint-embedding predictive knowledge distillation on a synthetic lipreading corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Model arm, overriding the configuration.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the paired corpus (manifest plus feature files).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Replace a corpus generated from different settings.
        #[arg(long)]
        force: bool,
    },
    /// Run training stages, checkpointing after every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory written by gen-data.
        #[arg(long, value_name = "DIR", default_value = "data")]
        data: PathBuf,
        /// Comma-separated stages, e.g. 1,2,3 or 1. Baseline mode defaults to 1.
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        stages: Option<Vec<u32>>,
        /// Start from scratch even if the output directory holds a checkpoint.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on one split and write a report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR", default_value = "data")]
        data: PathBuf,
        /// Checkpoint to evaluate; defaults to the one in the output directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare a baseline report with a JEP-KD report.
    Compare {
        baseline: PathBuf,
        jepkd: PathBuf,
        /// Largest CER regression of the JEP-KD arm that is still accepted.
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
        /// Directory for the JSON delta document.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run the gradient, oracle and format verification suites.
    Selftest {
        /// Directory for scratch files; a temporary one is used otherwise.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(mode) = common.mode {
        config.mode = mode;
    }
    if let Some(out) = &common.out {
        config.out_dir = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &RunConfig, fallback: &str) -> PathBuf {
    config.out_dir.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn gen_data(common: &Common, force: bool) -> Result<u8> {
    let config = load_config(common)?;
    let dir = out_dir(&config, "data");
    let (manifest, outcome) = write_corpus(&dir, &config, force)?;
    println!(
        "{:?}: {} samples in {} (data hash {})",
        outcome,
        manifest.sample_count(),
        dir.display(),
        manifest.data_hash
    );
    Ok(0)
}

fn train(common: &Common, data: &Path, stages: Option<Vec<u32>>, force: bool) -> Result<u8> {
    let config = load_config(common)?;
    let dir = out_dir(&config, "run");
    let stages = stages.unwrap_or_else(|| match config.mode {
        Mode::Baseline => vec![1],
        Mode::Jepkd => vec![1, 2, 3],
    });
    let summary = train_in_dir(&config, data, &dir, &stages, force)?;
    if summary.resumed {
        println!("resumed from {}", dir.join(CHECKPOINT_FILE).display());
    }
    if let Some(last) = summary.records.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    let c = summary.state.cursor;
    println!("cursor: stage {} epoch {} step {}", c.stage, c.epoch, c.global_step);
    Ok(0)
}

fn eval(common: &Common, data: &Path, checkpoint: Option<PathBuf>, split: &str) -> Result<u8> {
    let split: Split = split.parse()?;
    let config = load_config(common)?;
    let dir = out_dir(&config, "run");
    let checkpoint = checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    let report = eval_checkpoint(&config, &checkpoint, data, split, config.mode)?;
    let path = report_path(&dir, split, config.mode);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    jepkd::featfile::write_atomic(&path, report.to_json()?.as_bytes())?;
    println!("CER={}", report.cer);
    eprintln!("report written to {}", path.display());
    Ok(0)
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EvalReport::from_json(&text).with_context(|| format!("reading {}", path.display()))
}

fn compare_cmd(baseline: &Path, jepkd: &Path, tolerance: f64, out: Option<PathBuf>) -> Result<u8> {
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(Error::invalid(format!("tolerance must be non-negative, got {tolerance}")).into());
    }
    let b = read_report(baseline)?;
    let j = read_report(jepkd)?;
    if b.split != j.split {
        bail!(Error::invalid(format!("reports cover different splits ({} and {})", b.split, j.split)));
    }
    let cmp = compare(&b, &j, tolerance);
    let json = serde_json::to_string_pretty(&cmp)? + "\n";
    print!("{}", cmp.to_table());
    match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join("compare.json");
            jepkd::featfile::write_atomic(&path, json.as_bytes())?;
            eprintln!("delta document written to {}", path.display());
        }
        None => print!("{json}"),
    }
    Ok(if cmp.violated { EXIT_VERIFY } else { 0 })
}

fn selftest_cmd(out: Option<PathBuf>) -> Result<u8> {
    let results = match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            selftest::run_all(Some(&dir))
        }
        None => {
            let tmp = tempfile::tempdir().context("creating a scratch directory")?;
            selftest::run_all(Some(tmp.path()))
        }
    };
    let mut failed = 0;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<20} {:>6.2}s  {}", r.name, r.elapsed.as_secs_f64(), r.detail);
        failed += usize::from(!r.passed);
    }
    println!("{} of {} suites passed", results.len() - failed, results.len());
    Ok(if failed == 0 { 0 } else { EXIT_VERIFY })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Io { .. }) | Some(Error::Format { .. }) => EXIT_IO,
        Some(Error::NonFiniteLoss { .. }) | Some(Error::NonFinite { .. }) => EXIT_VERIFY,
        _ => EXIT_USAGE,
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData { common, force } => gen_data(&common, force),
        Command::Train { common, data, stages, force } => train(&common, &data, stages, force),
        Command::Eval { common, data, checkpoint, split } => eval(&common, &data, checkpoint, &split),
        Command::Compare { baseline, jepkd, tolerance, out } => compare_cmd(&baseline, &jepkd, tolerance, out),
        Command::Selftest { out } => selftest_cmd(out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
