//! The `dhat` command line: `gen-data`, `train`, `eval` and `compare`.
//!
//! Exit codes are 0 on success, 2 for configuration or input errors and 3
//! for runtime failures such as divergence.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::{DatasetConfig, EvalConfig, ExperimentConfig};
use crate::data::{export_dataset, generate_spurious_dataset, SpuriousSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    emit_report, evaluate, load_report, write_attention_pngs, EvalReport, ReportContext, RunComparison, RunRow,
    REPORT_FILE,
};
use crate::models::Checkpoint;
use crate::training::{resume, train, EpochRecord, MetricsLog, RunSummary, TrainOptions, SUMMARY_SCHEMA_VERSION};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

/// Set to `0` to append wall-clock times to `metrics.csv`. By default the
/// file holds only quantities that are identical across reruns.
pub const DETERMINISM_ENV: &str = "DHAT_DETERMINISTIC";

#[derive(Debug, Parser)]
#[command(name = "dhat", version, about = "Debiased high-confidence adversarial training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic spurious-background dataset as .npy files.
    GenData {
        /// Dataset spec, or an experiment config with a synthetic dataset.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Train a model; with --checkpoint, resume a previous run.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        /// Checkpoint to resume from; its metrics.csv must sit beside it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop after this many completed epochs (resume later).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint; writes a timestamped report directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Eval config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parent directory for the report (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare evaluated runs.
    Compare {
        /// Run directories (or report directories) to compare.
        #[arg(required = true, num_args = 1..)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn deterministic_csv() -> bool {
    std::env::var(DETERMINISM_ENV).map_or(true, |v| v != "0")
}

fn checkpoint_user_error(e: Error) -> Error {
    match e {
        Error::Io { path, source } => Error::Checkpoint(format!("{}: {source}", path.display())),
        other => other,
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(config: &Path, out: &Path, seed_override: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::config(config.display().to_string(), e.to_string()))?;
    let mut spec: SpuriousSpec = match serde_json::from_str(&text) {
        Ok(s) => s,
        Err(_) => match ExperimentConfig::from_json(&text)?.dataset {
            DatasetConfig::Synthetic { spec } => spec,
            _ => return Err(Error::config("dataset.kind", "gen-data needs a synthetic dataset")),
        },
    };
    if let Some(s) = seed_override {
        spec.seed = s;
    }
    let data = generate_spurious_dataset(&spec)?;
    let manifest = export_dataset(&data, &spec, out)?;
    eprintln!("wrote {} files to {}", manifest.files.len() + 1, out.display());
    Ok(())
}

fn print_epoch(r: &EpochRecord) {
    eprintln!(
        "epoch {:>3}  lr {:.4}  loss {:.4} (ce {:.4}, dhlr {:.4}, floe {:.4})  clean {:.3}/{:.3}  robust {:.3}/{:.3}  {:.1}s",
        r.epoch,
        r.lr,
        r.loss_total,
        r.loss_ce,
        r.loss_dhlr,
        r.loss_floe,
        r.train_clean_acc,
        r.test_clean_acc,
        r.train_robust_acc,
        r.test_robust_acc,
        r.wall_time_s
    );
}

fn cmd_train(
    config: &Path,
    out: Option<PathBuf>,
    seed_override: Option<u64>,
    checkpoint: Option<PathBuf>,
    stop_after: Option<usize>,
) -> Result<()> {
    let mut cfg = ExperimentConfig::from_path(config)?;
    if let Some(s) = seed_override {
        cfg.override_seed(s);
    }
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join(CONFIG_FILE), cfg.to_json()?)?;

    let started = Instant::now();
    let mut on_epoch = print_epoch;
    let opts = TrainOptions {
        stop_after,
        on_epoch: Some(&mut on_epoch),
        ..Default::default()
    };
    let outcome = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(&path).map_err(checkpoint_user_error)?;
            let metrics = path.with_file_name(METRICS_FILE);
            let prior = if metrics.exists() {
                MetricsLog::read_csv(&metrics)?
            } else {
                MetricsLog::new()
            };
            resume(ckpt, prior, &cfg, opts)?
        }
        None => train(&cfg, opts)?,
    };
    let elapsed = started.elapsed().as_secs_f64();

    outcome.checkpoint.save(dir.join(CHECKPOINT_FILE))?;
    outcome.log.write_csv(&dir.join(METRICS_FILE), !deterministic_csv())?;
    let summary = RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        config_hash: cfg.hash()?,
        objective: cfg.objective.name().into(),
        seed: cfg.seed,
        epochs_planned: cfg.schedule.epochs,
        epochs_completed: outcome.checkpoint.step.epoch,
        finished: outcome.divergence.is_none() && outcome.checkpoint.step.epoch >= cfg.schedule.epochs,
        diverged: outcome.divergence.as_ref().map(|d| d.message.clone()),
        checkpoint_digest: outcome.checkpoint.digest()?,
        total_wall_time_s: elapsed,
        records: outcome.log.records().to_vec(),
    };
    write(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    if let Some(d) = outcome.divergence {
        eprintln!("last good checkpoint saved to {}", dir.join(CHECKPOINT_FILE).display());
        return Err(d.into_error());
    }
    eprintln!("run written to {}", dir.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, config: Option<PathBuf>, out: Option<PathBuf>) -> Result<PathBuf> {
    let ckpt = Checkpoint::load(checkpoint).map_err(checkpoint_user_error)?;
    let eval_cfg = match &config {
        Some(p) => EvalConfig::from_path(p)?,
        None => EvalConfig::default(),
    };
    let run_dir = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
    let exp_path = run_dir.join(CONFIG_FILE);
    let exp = if exp_path.exists() {
        let exp = ExperimentConfig::from_path(&exp_path)?;
        if exp.hash()? != ckpt.config_hash {
            return Err(Error::Checkpoint(format!(
                "{} does not match the checkpoint (config hash {} vs {})",
                exp_path.display(),
                exp.hash()?,
                ckpt.config_hash
            )));
        }
        Some(exp)
    } else {
        None
    };
    let dataset = eval_cfg
        .dataset
        .clone()
        .or_else(|| exp.as_ref().map(|e| e.dataset.clone()))
        .ok_or_else(|| Error::config("dataset", "no dataset given and no config.json beside the checkpoint"))?;
    let data = dataset.load()?;
    let model = ckpt.model()?;
    let arch = model.arch();
    if arch.num_classes != data.test.num_classes() || arch.in_channels != data.test.example_shape().0 {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {:?} does not fit the dataset ({} classes, {} channels)",
            model.arch(),
            data.test.num_classes(),
            data.test.example_shape().0
        )));
    }
    let mut sources = Vec::new();
    for p in &eval_cfg.transfer_sources {
        let c = Checkpoint::load(p).map_err(checkpoint_user_error)?;
        let name = p
            .parent()
            .and_then(|d| d.file_name())
            .unwrap_or(p.as_os_str())
            .to_string_lossy()
            .into_owned();
        sources.push((name, c.model()?));
    }
    let ctx = ReportContext {
        checkpoint_digest: ckpt.digest()?,
        config_hash: ckpt.config_hash.clone(),
        objective: exp.as_ref().map(|e| e.objective.name().to_string()),
        seed: exp.as_ref().map(|e| e.seed),
        experiment_config: exp.clone(),
    };
    let report = evaluate(&model, &data.train, &data.test, &eval_cfg, &sources, ctx)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let parent = out.unwrap_or(run_dir.clone());
    let mut dir = parent.join(format!("eval-{stamp}"));
    let mut n = 1;
    while dir.exists() {
        dir = parent.join(format!("eval-{stamp}-{n}"));
        n += 1;
    }
    let metrics = run_dir.join(METRICS_FILE);
    let log = metrics.exists().then(|| MetricsLog::read_csv(&metrics)).transpose()?;
    emit_report(&report, log.as_ref(), &dir)?;
    if eval_cfg.export_maps > 0 {
        let n = eval_cfg.export_maps.min(data.test.len());
        let sample = data.test.truncated(n);
        let maps = crate::attention::grad_cam(
            &model,
            sample.images(),
            sample.labels(),
            crate::attention::MapSource::TrainedModel,
        )?;
        write_attention_pngs(&maps.values, &dir.join("attention"), n)?;
    }
    eprintln!("report written to {}", dir.display());
    Ok(dir)
}

/// Finds the report of a run: `report.json` in the directory itself or in
/// its most recent `eval-*` subdirectory.
fn find_report(dir: &Path) -> Option<PathBuf> {
    let direct = dir.join(REPORT_FILE);
    if direct.exists() {
        return Some(direct);
    }
    let mut evals: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("eval-")))
        .filter(|p| p.join(REPORT_FILE).exists())
        .collect();
    evals.sort();
    evals.pop().map(|p| p.join(REPORT_FILE))
}

fn cmd_compare(run_dirs: &[PathBuf], out: &Path) -> Result<()> {
    if run_dirs.len() < 2 {
        return Err(Error::config("run_dirs", "compare needs at least two run directories"));
    }
    let mut unfinished = Vec::new();
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for dir in run_dirs {
        let summary = dir.join(SUMMARY_FILE);
        if summary.exists() && !RunSummary::load(&summary)?.finished {
            unfinished.push(dir.display().to_string());
            continue;
        }
        match find_report(dir) {
            Some(p) => {
                let name = dir.file_name().unwrap_or(dir.as_os_str()).to_string_lossy().into_owned();
                reports.push((name, load_report(&p)?));
            }
            None => unfinished.push(dir.display().to_string()),
        }
    }
    if !unfinished.is_empty() {
        return Err(Error::config(
            "run_dirs",
            format!("unfinished or unevaluated runs: {}", unfinished.join(", ")),
        ));
    }
    let rows = reports
        .into_iter()
        .map(|(name, r)| RunRow {
            name,
            objective: r.objective.clone(),
            seed: r.seed,
            metrics: r.metrics(),
        })
        .collect();
    let cmp = RunComparison::build(rows)?;
    cmp.emit(out)?;
    for s in &cmp.sign_counts {
        eprintln!(
            "{:<40} {} − {}: +{} −{} ={} over {} seeds",
            s.metric, s.first, s.second, s.positive, s.negative, s.ties, s.pairs
        );
    }
    eprintln!("comparison written to {}", out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed_override } => gen_data(&config, &out, seed_override),
        Command::Train {
            config,
            out,
            seed_override,
            checkpoint,
            stop_after,
        } => cmd_train(&config, out, seed_override, checkpoint, stop_after),
        Command::Eval { checkpoint, config, out } => cmd_eval(&checkpoint, config, out).map(|_| ()),
        Command::Compare { run_dirs, out } => cmd_compare(&run_dirs, &out),
    }
}

pub fn exit_code(result: &Result<()>) -> u8 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_user_error() => 2,
        Err(_) => 3,
    }
}

/// Parses `args`, runs the command and reports errors on stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result))
}
