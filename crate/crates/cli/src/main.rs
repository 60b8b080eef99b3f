//! `pfgdf`: train, analyze, prune, fine-tune and report on CNNs pruned by the
//! distribution of their filter norms.

mod dataset;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pfgdf::config::RunConfig;
use pfgdf::data::Dataset;
use pfgdf::driver::auto_prune;
use pfgdf::model::checkpoint::Checkpoint;
use pfgdf::model::{build, load_checkpoint, save_checkpoint, Arch};
use pfgdf::report::{emit, summarize, write_curve};
use pfgdf::stats::{snapshot_distributions, write_snapshots};
use pfgdf::train::{fine_tune, train_baseline, SgdTrainer};

use crate::dataset::DataSource;

const EFFECTIVE_CONFIG: &str = "effective_config.toml";
const THREADS_VAR: &str = "PFGDF_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "pfgdf",
    version,
    about = "Filter pruning guided by the distribution of filter L1 norms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML file of run settings (`key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable. VALUE is TOML, e.g. `alpha_grid=[0.5,1.0]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> pfgdf::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a baseline model from scratch.
    Train {
        #[arg(long)]
        arch: Arch,
        #[arg(long, value_name = "synth[:k=v,...]|cifar10:DIR")]
        data: DataSource,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Epochs at which to record norm distributions, e.g. `0,16,32,160`.
        #[arg(long, value_delimiter = ',')]
        snapshot_epochs: Option<Vec<usize>>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write norm, QQ and histogram files for every conv layer.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a trained checkpoint layer by layer.
    Prune {
        checkpoint: PathBuf,
        #[arg(long, value_name = "synth[:k=v,...]|cifar10:DIR")]
        data: DataSource,
        /// Pruned checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Directory for the pruning report.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a pruned checkpoint further.
    Finetune {
        checkpoint: PathBuf,
        #[arg(long, value_name = "synth[:k=v,...]|cifar10:DIR")]
        data: DataSource,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare two checkpoints and write the counts summary.
    Report {
        baseline: PathBuf,
        pruned: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| pfgdf::Error::io(dir, e))?;
    Ok(())
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let path = dir.join(EFFECTIVE_CONFIG);
    fs::write(&path, cfg.to_toml()).map_err(|e| pfgdf::Error::io(&path, e))?;
    Ok(())
}

fn load_data(source: &DataSource) -> Result<Dataset> {
    let data = source.load()?;
    log::info!(
        "dataset {}: {} train / {} eval, {} classes",
        data.id,
        data.train.len(),
        data.eval.len(),
        data.num_classes
    );
    Ok(data)
}

fn check_dataset(ckpt: &Checkpoint, data: &Dataset) {
    if !ckpt.meta.dataset_id.is_empty() && ckpt.meta.dataset_id != data.id {
        log::warn!(
            "checkpoint was trained on {}, continuing on {}",
            ckpt.meta.dataset_id,
            data.id
        );
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            arch,
            data,
            out,
            snapshot_epochs,
            config,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(epochs) = snapshot_epochs {
                cfg.snapshot_epochs = epochs;
            }
            let data = load_data(&data)?;
            let graph = build(arch, data.num_classes, data.input_shape)?;
            let outcome = train_baseline(&graph, &data, &cfg)?;
            let dir = parent_dir(&out);
            echo_config(&cfg, &dir)?;
            save_checkpoint(&outcome.checkpoint, &out)?;
            write_curve(&outcome.curve, &dir.join("train_curve.csv"))?;
            for (epoch, snaps) in &outcome.snapshots {
                write_snapshots(snaps, &dir.join("snapshots").join(format!("epoch_{epoch}")))?;
            }
            log::info!(
                "baseline accuracy {:.4} at epoch {}, written to {}",
                outcome.checkpoint.meta.baseline_accuracy,
                outcome.checkpoint.meta.epoch,
                out.display()
            );
        }
        Command::Analyze { checkpoint, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let snaps = snapshot_distributions(&ckpt)?;
            write_snapshots(&snaps, &out)?;
            log::info!(
                "wrote distributions for {} conv layers to {}",
                snaps.len(),
                out.display()
            );
        }
        Command::Prune {
            checkpoint,
            data,
            out,
            report,
            config,
        } => {
            let cfg = config.resolve()?;
            let baseline = load_checkpoint(&checkpoint)?;
            let data = load_data(&data)?;
            check_dataset(&baseline, &data);
            let run = auto_prune(&baseline, &mut SgdTrainer::new(&data, &cfg), &cfg)?;
            let summary = summarize(&baseline, &run.checkpoint, &run.records)?;
            echo_config(&cfg, &parent_dir(&out))?;
            save_checkpoint(&run.checkpoint, &out)?;
            emit(&summary, &report)?;
            echo_config(&cfg, &report)?;
            log::info!(
                "filters {} -> {} ({} removed), accuracy {:.4} against reference {:.4}",
                summary.baseline.filters,
                summary.pruned.filters,
                summary.reductions.filters.display,
                summary.pruned.accuracy,
                run.reference_accuracy
            );
        }
        Command::Finetune {
            checkpoint,
            data,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = load_data(&data)?;
            check_dataset(&ckpt, &data);
            let (tuned, curve) = fine_tune(&ckpt, &data, &cfg)?;
            let dir = parent_dir(&out);
            echo_config(&cfg, &dir)?;
            save_checkpoint(&tuned, &out)?;
            write_curve(&curve, &dir.join("finetune_curve.csv"))?;
            log::info!(
                "fine-tuned accuracy {:.4}",
                tuned.meta.accuracy.unwrap_or(0.0)
            );
        }
        Command::Report {
            baseline,
            pruned,
            out,
        } => {
            let base = load_checkpoint(&baseline)?;
            let after = load_checkpoint(&pruned)?;
            let summary = summarize(&base, &after, &[])?;
            emit(&summary, &out)?;
            log::info!(
                "filters {}, params {}, FLOPs {} removed",
                summary.reductions.filters.display,
                summary.reductions.params.display,
                summary.reductions.flops.display
            );
        }
    }
    Ok(())
}

/// Exit status and error class for a failure.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    use pfgdf::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Usage(_) | E::Input(_) | E::Policy(_)) => (1, "usage"),
        Some(E::Divergence(_) | E::NonFinite { .. }) => (3, "divergence"),
        Some(E::Format { .. }) => (2, "format"),
        Some(E::Io { .. }) => (2, "io"),
        Some(E::Dimension { .. }) => (2, "data"),
        Some(E::Invariant(_)) | None => (2, "internal"),
    }
}

fn fail(code: u8, kind: &str, message: String) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "exit_code": code, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        pfgdf::Error::Usage(format!("{THREADS_VAR}={raw:?} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or_default();
            return fail(1, "usage", first.trim_start_matches("error: ").to_string());
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = classify(&err);
            // library errors already print their source inline
            let mut message = String::new();
            for cause in err.chain().map(|c| c.to_string()) {
                if !message.contains(&cause) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&cause);
                }
            }
            fail(code, kind, message)
        }
    }
}
