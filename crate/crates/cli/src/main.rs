mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use polyadapt::probing::ProbeTask;
use polyadapt::tasks::Task;

use commands::Placement;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "polyadapt", version, about = "Adapter tuning experiments on synthetic multilingual code")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set tuning=full`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct Output {
    /// Write into this directory instead of a hashed one under the run root.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Run root (default: $POLYADAPT_RUN_ROOT, else ./runs).
    #[arg(long)]
    run_root: Option<PathBuf>,
}

impl Output {
    fn placement(self) -> Placement {
        Placement { run_dir: self.run_dir, run_root: self.run_root }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and its split manifest.
    Generate {
        #[arg(long, default_value_t = 4)]
        languages: usize,
        /// Examples for the largest language.
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        imbalance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Masked-language-model pre-training of a base model.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: Output,
    },
    /// Fine-tune a base model under one regime and evaluate it.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: Output,
    },
    /// Evaluate a checkpoint on the test split of some languages.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        languages: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: Output,
    },
    /// Layer-wise linear probes on a checkpoint's encoder.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', value_parser = parse_probe, default_value = "LEN,CPX,TYP")]
        tasks: Vec<ProbeTask>,
        /// Probe examples per task.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: Output,
    },
    /// Adapter tuning at several bottleneck dimensions.
    SweepDim {
        #[arg(long, value_delimiter = ',', default_value = "24,64,128")]
        dims: Vec<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: Output,
    },
    /// Train on each language, evaluate on every language, for adapter and full tuning.
    CrossLingual {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: Output,
    },
    /// Adapter tuning on k samples per language, averaged over seeds.
    LowResource {
        #[arg(long, value_delimiter = ',', default_value = "100,200,500,1000")]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: Output,
    },
}

fn parse_task(s: &str) -> Result<Task, String> {
    Task::parse(s).map_err(|e| e.to_string())
}

fn parse_probe(s: &str) -> Result<ProbeTask, String> {
    ProbeTask::parse(s).map_err(|e| e.to_string())
}

fn load(cfg: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(cfg.config.as_deref(), &cfg.set)
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate { languages, n, imbalance, seed, out, force } => {
            commands::generate(&commands::GenerateArgs { languages, n, imbalance, seed, out, force })
        }
        Command::Pretrain { cfg, out } => commands::pretrain(&load(&cfg)?, &out.placement()),
        Command::Finetune { cfg, out } => commands::finetune_cmd(&load(&cfg)?, &out.placement()),
        Command::Eval { checkpoint, adapters, task, languages, cfg, out } => {
            let config = if cfg.config.is_some() || !cfg.set.is_empty() { Some(load(&cfg)?) } else { None };
            let languages = languages.into_iter().filter(|l| !l.is_empty()).collect();
            commands::eval(&commands::EvalArgs { checkpoint, adapters, task, languages, config }, &out.placement())
        }
        Command::Probe { checkpoint, adapters, tasks, n, seed, out } => {
            commands::probe(&commands::ProbeArgs { checkpoint, adapters, tasks, n, seed }, &out.placement())
        }
        Command::SweepDim { dims, cfg, out } => commands::sweep_dim(&load(&cfg)?, &dims, &out.placement()),
        Command::CrossLingual { cfg, out } => commands::cross_lingual(&load(&cfg)?, &out.placement()),
        Command::LowResource { ks, seeds, cfg, out } => commands::low_resource(&load(&cfg)?, &ks, &seeds, &out.placement()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
