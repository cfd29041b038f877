//! `timedet`: generate synthetic data, train, evaluate, ablate, probe, plot.
//!
//! Every failure ends the process with one line `error[<kind>]: <reason>` on
//! stderr and exit code 2 (config), 3 (data) or 4 (runtime).

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "timedet", version, about = "End-to-end temporal action detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that read a config file.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.heads=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Record a sha256 per feature file in the manifest.
        #[arg(long)]
        checksums: bool,
    },
    /// Train a detector; writes checkpoints and history.json into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Seeds both parameter initialization and batch order.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint without post-processing, optionally also with NMS.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Additionally evaluate after class-wise NMS at this IoU.
        #[arg(long)]
        nms: Option<f64>,
        /// Keep only the N highest-scoring detections per video.
        #[arg(long = "fixed-topk")]
        fixed_topk: Option<usize>,
        /// Comma-separated IoU thresholds.
        #[arg(long)]
        iou: Option<String>,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Train and evaluate every cell of a config grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Grid file (`key = v1, v2`); defaults to coord x select x nms.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Perturb final-layer offsets and report the mAP change.
    ProbeNoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated noise magnitudes.
        #[arg(long)]
        alphas: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Render SVG charts from result files.
    Plot {
        /// history.json written by `train`.
        #[arg(long)]
        history: PathBuf,
        /// results.json written by `eval` (false negatives by length).
        #[arg(long)]
        results: Option<PathBuf>,
        /// probe.json written by `probe-noise`.
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData {
            cfg,
            out,
            seed,
            force,
            checksums,
        } => commands::generate_data(&cfg, &out, seed, force, checksums),
        Command::Train {
            data,
            cfg,
            out,
            epochs,
            seed,
            resume,
        } => commands::train(&data, &cfg, &out, epochs, seed, resume.as_deref()),
        Command::Eval {
            data,
            checkpoint,
            cfg,
            out,
            nms,
            fixed_topk,
            iou,
            split,
        } => commands::eval(&data, &checkpoint, &cfg, &out, nms, fixed_topk, iou.as_deref(), &split),
        Command::Ablate {
            data,
            grid,
            cfg,
            out,
            epochs,
        } => commands::ablate(&data, grid.as_deref(), &cfg, &out, epochs),
        Command::ProbeNoise {
            checkpoint,
            data,
            alphas,
            trials,
            seed,
            cfg,
            out,
            split,
        } => commands::probe_noise(&checkpoint, &data, &alphas, trials, seed, &cfg, &out, &split),
        Command::Plot {
            history,
            results,
            probe,
            out,
        } => plot::plot(&history, results.as_deref(), probe.as_deref(), &out),
    }
}

/// Exit code and reason prefix for an error chain.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    use timedet::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::InvalidArgument(_) | E::Checkpoint(_) => (2, "config"),
                E::Data(_) | E::Shape { .. } | E::MissingFile(_) | E::Io { .. } | E::Json { .. } => (3, "data"),
                E::NonFiniteLoss { .. } => (4, "runtime"),
            };
        }
        if cause.downcast_ref::<plot::SchemaError>().is_some() {
            return (3, "data");
        }
    }
    (4, "runtime")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[config]: {first}");
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = classify(&err);
            let reason = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {reason}");
            ExitCode::from(code)
        }
    }
}
