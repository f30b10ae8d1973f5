//! `mc3`: generate synthetic corpora, train the two-stage encoders, evaluate
//! them and check gradients, all from one flat config file.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mc3::Mc3Error;

use commands::Task;
use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mc3", version, about = "Multimodal consensus contrastive training and evaluation")]
struct Cli {
    /// Flat `key = value` config file; flags and `--set` override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus: three feature banks and a manifest.
    GenSynth,
    /// Run align then refine training and write a checkpoint and loss log.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write metrics.json plus curve CSVs.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        task: Task,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[arg(long)]
        instances: Option<usize>,
        /// Corrupt one analytic gradient; the check must then fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig, Mc3Error> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        let text = std::fs::read_to_string(p).map_err(|e| Mc3Error::io(p, e))?;
        cfg.apply_text(&text, p)?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    match &cli.command {
        Command::Train { manifest, resume } => {
            if manifest.is_some() {
                cfg.manifest = manifest.clone();
            }
            if resume.is_some() {
                cfg.resume = resume.clone();
            }
        }
        Command::Eval {
            manifest, checkpoint, ..
        } => {
            if manifest.is_some() {
                cfg.manifest = manifest.clone();
            }
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint.clone();
            }
        }
        Command::GradCheck {
            instances,
            inject_fault,
        } => {
            if let Some(n) = instances {
                cfg.grad.instances = *n;
            }
            cfg.grad.inject_fault = *inject_fault;
        }
        Command::GenSynth => {}
    }
    cfg.finish()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::GenSynth => commands::gen_synth(&cfg)?,
        Command::Train { .. } => commands::train(&cfg)?,
        Command::Eval { task, .. } => commands::evaluate(&cfg, *task)?,
        Command::GradCheck { .. } => commands::grad_check(&cfg)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
