//! Command-line driver: `gen`, `train`, `eval`, `bounds`, `mc-validate` and
//! `inspect-kb`.
//!
//! Structured settings come from a JSON run config; flags override its
//! scalars and `PROTEUS_SEED` overrides the seed. Every command prints JSON
//! lines on stdout and a short human summary on stderr. Exit codes: 0 ok,
//! 2 configuration, 3 data, 4 numerical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, ScoreRule, FORMAT_VERSION};
use crate::lora::{Ortho, TransferMode};
use crate::pipeline::{self, EvalOptions, PipelineConfig, RetrievalMode, Trainer};
use crate::taskgen::{self, StreamSpec, TaskDataset};
use crate::theory::{self, McConfig};

pub const SEED_ENV: &str = "PROTEUS_SEED";

/// A stream given either as a file path or inline as a generator spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StreamSource {
    Path(PathBuf),
    Spec(StreamSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stream: Option<StreamSource>,
    pub pipeline: PipelineConfig,
    pub eval: EvalOptions,
    /// Target misretrieval rate for bound reports.
    pub eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stream: None,
            pipeline: PipelineConfig::default(),
            eval: EvalOptions::default(),
            eps: 0.05,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!("eps must lie in (0, 1), got {}", self.eps)));
        }
        if !(self.eval.gamma > 0.0 && self.eval.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.eval.gamma)));
        }
        if self.eval.top_k == Some(0) {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        match &self.stream {
            Some(StreamSource::Path(p)) if !p.exists() => {
                Err(Error::Config(format!("stream file {} does not exist", p.display())))
            }
            Some(StreamSource::Spec(s)) => s.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "proteus", version, about = "Continual fine-tuning with retrievable low-rank units")]
pub struct Cli {
    /// Worker cap; orchestration is single-threaded so values above 1 change nothing.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task stream.
    Gen(GenArgs),
    /// Train sequentially over a stream and write a knowledge base.
    Train(TrainArgs),
    /// Evaluate a knowledge base on a stream's test split.
    Eval(EvalArgs),
    /// Measure separation factors and compare them with the required minimum.
    Bounds(BoundsArgs),
    /// Simulate retrieval in an idealized world and compare with the bound.
    McValidate(McArgs),
    /// Summarize a knowledge base file.
    InspectKb(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Generator spec (JSON). Defaults to the reference stream.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Stream file; falls back to the config's stream.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub kb_out: PathBuf,
    /// Per-task JSON-lines log; defaults to `<kb-out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_parser = parse_name::<TransferMode>)]
    pub transfer_mode: Option<TransferMode>,
    #[arg(long, value_parser = parse_name::<Ortho>)]
    pub ortho: Option<Ortho>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_name::<RetrievalMode>)]
    pub retrieval: Option<RetrievalMode>,
    #[arg(long, value_parser = parse_name::<ScoreRule>)]
    pub score: Option<ScoreRule>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Also rebuild every prefix of the KB for the accuracy matrix and forgetting.
    #[arg(long)]
    pub incremental: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 2.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 5)]
    pub tasks: usize,
    #[arg(long, default_value_t = 1)]
    pub components: usize,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub kb: PathBuf,
}

/// Parses a lowercase enum name through its serde representation.
fn parse_name<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// `PROTEUS_SEED`, if set; an unparsable value is a configuration error.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

fn check_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    check_overwrite(path, force)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_stream(path: &Path) -> Result<Vec<TaskDataset>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    taskgen::read_stream(BufReader::new(f))
}

fn resolve_stream(flag: Option<&Path>, cfg: &RunConfig) -> Result<Vec<TaskDataset>> {
    match (flag, &cfg.stream) {
        (Some(p), _) => load_stream(p),
        (None, Some(StreamSource::Path(p))) => load_stream(p),
        (None, Some(StreamSource::Spec(s))) => taskgen::generate_stream(s),
        (None, None) => Err(Error::Config("no stream given (use --stream or the config's stream)".into())),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    writeln!(out, "{value}").map_err(|e| Error::io("<stdout>", e))
}

/// Writes the stream for `spec` to `out`; returns the byte count.
pub fn cmd_gen(spec: &StreamSpec, out: &Path, force: bool) -> Result<usize> {
    spec.validate()?;
    let tasks = taskgen::generate_stream(spec)?;
    let mut buf = Vec::new();
    taskgen::write_stream(&tasks, &mut buf).map_err(|e| Error::io(out, e))?;
    write_file(out, &buf, force)?;
    Ok(buf.len())
}

/// Trains over `tasks`, writing the KB and one log line per task.
pub fn cmd_train(
    tasks: &[TaskDataset],
    cfg: &PipelineConfig,
    kb_out: &Path,
    log_out: &Path,
    force: bool,
    events: &mut dyn Write,
) -> Result<KnowledgeBase> {
    check_overwrite(kb_out, force)?;
    check_overwrite(log_out, force)?;
    let input_dim = pipeline::stream_input_dim(tasks)?;
    let cfg_json = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut trainer = Trainer::new(cfg.clone(), input_dim, tasks.len(), cfg_json)?;
    let log_file = File::create(log_out).map_err(|e| Error::io(log_out, e))?;
    let mut log = BufWriter::new(log_file);
    for t in tasks {
        let report = trainer.step(t)?;
        let line = serde_json::to_string(report).map_err(|e| Error::Numerical(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(log_out, e))?;
        emit(
            events,
            &json!({"event": "task_trained", "task": t.task, "components": report.components,
                    "train_accuracy": report.train.train_accuracy}),
        )?;
    }
    log.flush().map_err(|e| Error::io(log_out, e))?;
    let (kb, _) = trainer.into_parts();
    kb.save(kb_out)?;
    Ok(kb)
}

fn run_command(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let seed_env = env_seed()?;
    match cli.command {
        Command::Gen(a) => {
            let mut spec = match &a.spec {
                Some(p) => read_json::<StreamSpec>(p)?,
                None => taskgen::reference_spec(),
            };
            if let Some(s) = seed_env {
                spec.seed = s;
            }
            let bytes = cmd_gen(&spec, &a.out, a.force)?;
            emit(out, &json!({"event": "gen", "out": a.out, "tasks": spec.tasks, "bytes": bytes}))?;
            let _ = writeln!(err, "wrote {} tasks to {}", spec.tasks, a.out.display());
        }
        Command::Train(a) => {
            let mut cfg = load_config(a.config.as_deref())?;
            let train = &mut cfg.pipeline.train;
            if let Some(m) = a.transfer_mode {
                train.transfer_mode = m;
            }
            if let Some(o) = a.ortho {
                train.ortho = o;
            }
            if let Some(e) = a.epochs {
                train.epochs = e;
            }
            if let Some(s) = a.seed.or(seed_env) {
                train.seed = s;
            }
            cfg.validate()?;
            let tasks = resolve_stream(a.stream.as_deref(), &cfg)?;
            let log = a.log.clone().unwrap_or_else(|| {
                let mut p = a.kb_out.clone().into_os_string();
                p.push(".log.jsonl");
                PathBuf::from(p)
            });
            let kb = cmd_train(&tasks, &cfg.pipeline, &a.kb_out, &log, a.force, out)?;
            emit(out, &json!({"event": "train_done", "kb": a.kb_out, "log": log, "entries": kb.len()}))?;
            let _ = writeln!(err, "trained {} tasks; knowledge base at {}", kb.len(), a.kb_out.display());
        }
        Command::Eval(a) => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(r) = a.retrieval {
                cfg.eval.retrieval = r;
            }
            if let Some(s) = a.score {
                cfg.eval.score = s;
            }
            if a.top_k.is_some() {
                cfg.eval.top_k = a.top_k;
            }
            if let Some(g) = a.gamma {
                cfg.eval.gamma = g;
            }
            cfg.validate()?;
            let kb = KnowledgeBase::load(&a.kb)?;
            let tasks = resolve_stream(a.stream.as_deref(), &cfg)?;
            let report = pipeline::evaluate(&kb, &tasks, &cfg.eval)?;
            let incremental = if a.incremental {
                Some(pipeline::evaluate_incremental(&kb, &tasks, &cfg.eval)?)
            } else {
                None
            };
            let value = json!({"event": "eval", "report": report, "incremental": incremental});
            if let Some(p) = &a.out {
                let text = serde_json::to_string_pretty(&value).map_err(|e| Error::Numerical(e.to_string()))?;
                write_file(p, format!("{text}\n").as_bytes(), a.force)?;
            }
            emit(out, &value)?;
            let _ = writeln!(
                err,
                "accuracy {:.4}, retrieval accuracy {:.4} over {} samples",
                report.accuracy, report.retrieval_accuracy, report.samples
            );
        }
        Command::Bounds(a) => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(e) = a.eps {
                cfg.eps = e;
            }
            cfg.validate()?;
            let kb = KnowledgeBase::load(&a.kb)?;
            let tasks = resolve_stream(a.stream.as_deref(), &cfg)?;
            let report = pipeline::bound_report(&kb, &tasks, cfg.eps)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Numerical(e.to_string()))?;
            if let Some(csv) = &a.csv {
                check_overwrite(csv, a.force)?;
            }
            write_file(&a.out, format!("{text}\n").as_bytes(), a.force)?;
            if let Some(csv) = &a.csv {
                write_file(csv, report.to_csv().as_bytes(), true)?;
            }
            emit(
                out,
                &json!({"event": "bounds", "rows": report.rows.len(), "tasks": report.tasks,
                        "all_tasks_exceed": report.all_tasks_exceed}),
            )?;
            let passing = report.tasks.iter().filter(|t| t.exceeds).count();
            let _ = writeln!(
                err,
                "{passing}/{} tasks have measured separation above the required minimum",
                report.tasks.len()
            );
        }
        Command::McValidate(a) => {
            let cfg = McConfig {
                d: a.d,
                delta: a.delta,
                tasks: a.tasks,
                components: a.components,
                samples: a.samples,
                seed: a.seed.or(seed_env).unwrap_or(0),
            };
            let report = theory::mc_validate(&cfg)?;
            let value = serde_json::to_value(&report).map_err(|e| Error::Numerical(e.to_string()))?;
            if let Some(p) = &a.out {
                let text = serde_json::to_string_pretty(&value).map_err(|e| Error::Numerical(e.to_string()))?;
                write_file(p, format!("{text}\n").as_bytes(), a.force)?;
            }
            emit(out, &json!({"event": "mc_validate", "report": value}))?;
            let _ = writeln!(
                err,
                "empirical {:.5} ± {:.5} vs bound {:.5}: {}",
                report.empirical_error,
                report.standard_error,
                report.bound.value,
                if report.passed { "ok" } else { "VIOLATED" }
            );
        }
        Command::InspectKb(a) => {
            let kb = KnowledgeBase::load(&a.kb)?;
            let entries: Vec<_> = kb
                .entries()
                .iter()
                .map(|e| {
                    json!({
                        "task": e.task,
                        "ordinal": e.ordinal,
                        "components": e.multikey.len(),
                        "weights": e.multikey.components().iter().map(|c| c.weight()).collect::<Vec<_>>(),
                        "rank": e.unit.rank(),
                        "transfer_l1": e.transfer.values().map(f64::abs).fold(0.0, |a, v| a + v),
                    })
                })
                .collect();
            let value = json!({
                "event": "inspect_kb",
                "version": FORMAT_VERSION,
                "dims": kb.backbone().dims(),
                "d": kb.meta().d,
                "seed": kb.meta().seed,
                "classes": kb.lda().classes(),
                "tasks_seen": kb.lda().tasks_seen(),
                "gamma": kb.lda().gamma(),
                "entries": entries,
            });
            emit(out, &value)?;
            let _ = writeln!(err, "{} entries, embedding dim {}", kb.len(), kb.meta().d);
        }
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_command(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
