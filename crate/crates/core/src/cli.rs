//! The `kevo` command line: argument parsing, subcommand dispatch and exit codes.
//!
//! Artifacts land under the configured output directory:
//!
//! | path | written by |
//! |---|---|
//! | `checkpoints/gen-<g>.kevo` | `train`, `evolve` |
//! | `logs.jsonl`, `summary.csv` | `train`, `evolve` |
//! | `slim.kevo`, `slim_dims.csv` | `extract` |
//! | `analysis.csv`, `h2d.csv` | `analyze` |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{DataError, Dataset};
use crate::graph::{GraphDescription, GraphError, NetworkGraph, ParamStore};
use crate::io::{emit_report, write_atomic, Checkpoint, CheckpointError, CheckpointMeta, ReportError, ReportFormat};
use crate::metrics::{h2d_metrics, hypothesis_mean_abs, MetricsError};
use crate::split::{extract_slim, kels_split, masked_dense, profile_network, SplitError, SplitMask, Technique};
use crate::train::{evaluate_model, GenerationLog, KeRun, KeState, TrainConfig, TrainError};

#[derive(Debug, Parser)]
#[command(
    name = "kevo",
    version,
    about = "Knowledge evolution training with network splitting"
)]
pub struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dot-path override such as `train.split_rate=0.8`; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the first generation only.
    Train,
    /// Run knowledge evolution, checkpointing after every generation.
    Evolve {
        /// Continue from a checkpoint written by an earlier run with the same configuration.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Extract the slim network from a KELS checkpoint.
    Extract {
        /// Defaults to the latest generation checkpoint.
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: Option<PathBuf>,
    },
    /// Print per-layer operation and parameter counts as CSV.
    Profile {
        /// Profile the KELS slim network instead of the dense one.
        #[arg(long)]
        slim: bool,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        /// Defaults to the latest generation checkpoint.
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        /// Zero the reset-hypothesis before evaluating.
        #[arg(long)]
        masked: bool,
    },
    /// Recompute hypothesis statistics and H2D from stored checkpoints.
    Analyze {
        /// Defaults to every generation checkpoint in the output directory.
        checkpoints: Vec<PathBuf>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("report: {0}")]
    Report(#[from] ReportError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for configuration errors, 3 for data and artifact errors, 4 for numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Split(_) | CliError::Graph(_) => 2,
            CliError::Data(_) | CliError::Checkpoint(_) | CliError::Report(_) | CliError::Io { .. } => 3,
            CliError::Metrics(_) => 4,
            CliError::Train(e) => match e {
                TrainError::Config(_) | TrainError::Graph(_) | TrainError::Split(_) => 2,
                TrainError::NonFiniteLoss { .. }
                | TrainError::NonFiniteGradient { .. }
                | TrainError::Metrics(_)
                | TrainError::Engine(_) => 4,
            },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses arguments from the process, runs, and maps failures to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_experiment(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config <PATH> is required".into()))?;
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let mut cfg = ExperimentConfig::load(path, &overrides)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

pub fn run_experiment(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train => {
            let one = ExperimentConfig {
                train: TrainConfig {
                    generations: 1,
                    ..cfg.train.clone()
                },
                ..cfg
            };
            evolve(&one, None).map(|_| ())
        }
        Command::Evolve { resume } => evolve(&cfg, resume.as_deref()).map(|_| ()),
        Command::Extract { checkpoint } => extract(&cfg, checkpoint.as_deref()),
        Command::Profile { slim } => {
            print!("{}", profile_csv(&cfg, *slim)?);
            Ok(())
        }
        Command::Eval { checkpoint, masked } => {
            let path = resolve_checkpoint(&cfg, checkpoint.as_deref())?;
            let metric = eval_checkpoint(&cfg, &path, *masked)?;
            println!("{}", serde_json::to_string(&metric).expect("metrics serialize"));
            Ok(())
        }
        Command::Analyze { checkpoints } => analyze(&cfg, checkpoints),
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), CliError> {
    let source = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs a [data] section".into()))?;
    let (train, eval) = source.load()?;
    if let Some(input) = cfg.input_shape() {
        if train.sample_shape() != input || eval.sample_shape() != input {
            return Err(DataError::Invalid(format!(
                "samples are {:?} but the model expects {input:?}",
                train.sample_shape()
            ))
            .into());
        }
    }
    Ok((train, eval))
}

pub fn checkpoint_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("checkpoints")
}

pub fn generation_checkpoint(cfg: &ExperimentConfig, generation: usize) -> PathBuf {
    checkpoint_dir(cfg).join(format!("gen-{generation}.kevo"))
}

/// Generation checkpoints in the output directory, ordered by generation.
pub fn list_checkpoints(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let dir = checkpoint_dir(cfg);
    let mut found = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        let generation = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("gen-")?.strip_suffix(".kevo")?.parse::<usize>().ok());
        if let Some(g) = generation {
            found.push((g, path));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

fn resolve_checkpoint(cfg: &ExperimentConfig, explicit: Option<&Path>) -> Result<PathBuf, CliError> {
    match explicit {
        Some(p) => Ok(p.to_path_buf()),
        None => list_checkpoints(cfg)?
            .pop()
            .ok_or_else(|| CliError::Usage(format!("no checkpoints under {}", checkpoint_dir(cfg).display()))),
    }
}

/// Training settings that must agree between a checkpoint and the run resuming it.
fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    TrainConfig {
        generations: 0,
        ..a.clone()
    } == TrainConfig {
        generations: 0,
        ..b.clone()
    }
}

/// Runs (or resumes) knowledge evolution, writing a checkpoint and the reports
/// after every generation. Returns the full log.
pub fn evolve(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<Vec<GenerationLog>, CliError> {
    let graph = cfg.build_graph()?;
    let (train, eval) = load_data(cfg)?;
    let echo = cfg.to_toml();
    let graph_text = GraphDescription::from(&graph).to_toml();
    let mut logs = Vec::new();
    let mut run = match resume {
        None => KeRun::new(&graph, &cfg.train, &train, &eval)?,
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if let Some(old) = ck.meta.config.as_deref() {
                let old: ExperimentConfig =
                    toml::from_str(old).map_err(|e| CheckpointError::Format(format!("config echo: {e}")))?;
                if !same_run(&old.train, &cfg.train) {
                    return Err(CliError::Usage(
                        "the checkpoint was written with different training settings".into(),
                    ));
                }
            }
            let mask = ck
                .mask
                .ok_or_else(|| CheckpointError::Format("checkpoint has no split mask".into()))?;
            logs = previous_logs(cfg, ck.meta.generation)?;
            let state = KeState {
                completed: ck.meta.generation,
                params: ck.params,
                mask,
            };
            KeRun::resume(&graph, &cfg.train, &train, &eval, state)?
        }
    };
    while !run.finished() {
        let log = run.next_generation()?;
        let state = run.state();
        Checkpoint {
            params: state.params.clone(),
            mask: Some(state.mask.clone()),
            meta: CheckpointMeta {
                generation: state.completed,
                graph: Some(graph_text.clone()),
                config: Some(echo.clone()),
            },
        }
        .save(&generation_checkpoint(cfg, state.completed))?;
        eprintln!("{}", progress_line(&log));
        logs.push(log);
        emit_report(&logs, &cfg.out, &[ReportFormat::Structured, ReportFormat::Csv])?;
    }
    Ok(logs)
}

fn progress_line(log: &GenerationLog) -> String {
    let mut s = format!("generation {}: dense {:.4}", log.generation, log.dense.primary());
    if let Some(slim) = &log.slim {
        let _ = write!(s, ", slim {:.4}", slim.primary());
    }
    if let Some(loss) = log.epoch_losses.last() {
        let _ = write!(s, ", final loss {loss:.4}");
    }
    let _ = write!(s, " ({:.1}s)", log.wall_seconds);
    s
}

/// Logs already written for generations up to `completed`.
fn previous_logs(cfg: &ExperimentConfig, completed: usize) -> Result<Vec<GenerationLog>, CliError> {
    let path = cfg.out.join("logs.jsonl");
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let mut logs = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let log: GenerationLog =
            serde_json::from_str(line).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
        if log.generation <= completed {
            logs.push(log);
        }
    }
    Ok(logs)
}

fn kels_mask(cfg: &ExperimentConfig, graph: &NetworkGraph, ck: &Checkpoint) -> Result<SplitMask, CliError> {
    let mask = match &ck.mask {
        Some(m) => m.clone(),
        None => kels_split(graph, cfg.train.split_rate)?,
    };
    if mask.technique != Technique::Kels {
        return Err(SplitError::UnsupportedTechnique(mask.technique).into());
    }
    Ok(mask)
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Dimension table `tensor,dense,slim` (shapes written as `64x3x7x7`).
pub fn dimension_table(dense: &ParamStore<f32>, slim: &ParamStore<f32>) -> String {
    let mut out = String::from("tensor,dense,slim\n");
    for (key, t) in dense.iter() {
        let s = slim.get(key).map(|s| shape_text(s.shape())).unwrap_or_default();
        let _ = writeln!(out, "{key},{},{s}", shape_text(t.shape()));
    }
    out
}

fn extract(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let path = resolve_checkpoint(cfg, checkpoint)?;
    let ck = Checkpoint::load(&path)?;
    let graph = cfg.build_graph()?;
    let mask = kels_mask(cfg, &graph, &ck)?;
    let net = extract_slim(&graph, &ck.params, &mask)?;
    let table = dimension_table(&ck.params, &net.params);
    Checkpoint {
        params: net.params,
        mask: None,
        meta: CheckpointMeta {
            graph: Some(GraphDescription::from(&net.graph).to_toml()),
            ..ck.meta
        },
    }
    .save(&cfg.out.join("slim.kevo"))?;
    let dims = cfg.out.join("slim_dims.csv");
    write_atomic(&dims, table.as_bytes()).map_err(io_err(&dims))?;
    print!("{table}");
    Ok(())
}

pub fn profile_csv(cfg: &ExperimentConfig, slim: bool) -> Result<String, CliError> {
    let graph = cfg.build_graph()?;
    let s = graph.input_shape();
    let input = [s.channels, s.height, s.width];
    let report = if slim {
        let mask = kels_split(&graph, cfg.train.split_rate)?;
        let net = extract_slim(&graph, &graph.init_params::<f32>(0), &mask)?;
        profile_network(&net.graph, input)?
    } else {
        profile_network(&graph, input)?
    };
    Ok(report.to_csv())
}

/// Evaluates a checkpoint. Checkpoints that carry their own graph (slim
/// networks) use it; the rest use the configured model.
pub fn eval_checkpoint(
    cfg: &ExperimentConfig,
    path: &Path,
    masked: bool,
) -> Result<crate::train::MetricRecord, CliError> {
    let ck = Checkpoint::load(path)?;
    let graph = match (&ck.meta.graph, ck.mask.is_some()) {
        (Some(text), false) => GraphDescription::parse(text)?.build()?,
        _ => cfg.build_graph()?,
    };
    let params = if masked {
        let mask = ck
            .mask
            .as_ref()
            .ok_or_else(|| CliError::Usage("--masked needs a checkpoint with a split mask".into()))?;
        masked_dense(&graph, &ck.params, mask)?
    } else {
        ck.params
    };
    graph.check_params(&params)?;
    let (_, eval) = load_data(cfg)?;
    Ok(evaluate_model(
        &graph,
        &params,
        &eval,
        cfg.train.loss.task(),
        cfg.train.nmi_clusters,
    )?)
}

fn analyze(cfg: &ExperimentConfig, explicit: &[PathBuf]) -> Result<(), CliError> {
    let paths = if explicit.is_empty() {
        list_checkpoints(cfg)?
    } else {
        explicit.to_vec()
    };
    if paths.is_empty() {
        return Err(CliError::Usage("no checkpoints to analyze".into()));
    }
    let graph = cfg.build_graph()?;
    let mut stats = String::from("generation,node,mean_abs_fit,mean_abs_reset\n");
    let mut masks = Vec::new();
    let mut generations = Vec::new();
    for path in &paths {
        let ck = Checkpoint::load(path)?;
        let mask = ck
            .mask
            .ok_or_else(|| CheckpointError::Format(format!("{} has no split mask", path.display())))?;
        let g = ck.meta.generation;
        for s in hypothesis_mean_abs(&graph, &ck.params, &mask)? {
            let reset = s.reset.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(stats, "{g},{},{},{reset}", s.node, s.fit);
        }
        masks.push(mask.flatten(&graph)?);
        generations.push(g);
    }
    let mut h2d = String::from("generation,s_h2d,c_h2d\n");
    if masks.len() >= 2 {
        let (s, c) = h2d_metrics(&masks)?;
        for (i, (s, c)) in s.iter().zip(&c).enumerate() {
            let _ = writeln!(h2d, "{},{s},{c}", generations[i + 1]);
        }
    }
    for (name, text) in [("analysis.csv", &stats), ("h2d.csv", &h2d)] {
        let path = cfg.out.join(name);
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
    }
    print!("{stats}\n{h2d}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Data(DataError::Invalid("x".into())).exit_code(), 3);
        let nan = TrainError::NonFiniteLoss {
            generation: 1,
            epoch: 1,
            batch: 0,
        };
        assert_eq!(CliError::Train(nan).exit_code(), 4);
        assert_eq!(CliError::Train(TrainError::Config("x".into())).exit_code(), 2);
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        let err = Cli::try_parse_from(["kevo", "--config", "x.toml", "frobnicate"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let ok = Cli::try_parse_from(["kevo", "evolve", "--config", "x.toml", "--override", "train.lr=0.1"]).unwrap();
        assert_eq!(ok.overrides, ["train.lr=0.1"]);
    }
}
