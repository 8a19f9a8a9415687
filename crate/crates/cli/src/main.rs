use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use twins_core::analysis::summarize_run;
use twins_core::workbench::{
    evaluate_checkpoint, gen_data, read_metrics, run_experiment, ExperimentConfig, Overrides, Stages,
};
use twins_core::Method;

/// Adversarial fine-tuning experiments with dual-statistics batch norm.
#[derive(Debug, Parser)]
#[command(name = "twins", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured datasets as IDX files.
    GenData {
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Robust source pre-training only.
    Pretrain {
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Fine-tune from `pretrain.ckpt` in each seed directory (or `init_checkpoint`).
    Finetune {
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Evaluate a checkpoint on the target validation split.
    Eval {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Summarize metrics CSV files as JSON.
    Analyze {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
    /// Full pipeline: pre-training, warmup, fine-tuning, evaluation.
    Run {
        #[command(flatten)]
        exp: ExpArgs,
    },
}

#[derive(Debug, Args)]
struct ExpArgs {
    /// Experiment config (JSON).
    config: PathBuf,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fine-tuning method.
    #[arg(long)]
    method: Option<String>,
}

impl ExpArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg =
            ExperimentConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        let method = self.method.as_deref().map(str::parse::<Method>).transpose()?;
        cfg.apply(&Overrides {
            seed: self.seed,
            output_dir: self.out.clone(),
            method,
        })?;
        Ok(cfg)
    }
}

fn print_json<S: serde::Serialize>(v: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn analyze(paths: &[PathBuf]) -> Result<()> {
    let mut out = serde_json::Map::new();
    for p in paths {
        let history = read_metrics(p).with_context(|| format!("reading {}", p.display()))?;
        out.insert(p.display().to_string(), serde_json::to_value(summarize_run(&history)?)?);
    }
    print_json(&out)
}

fn stages(exp: &ExpArgs, stages: Stages) -> Result<()> {
    let cfg = exp.load()?;
    print_json(&run_experiment(&cfg, stages)?)
}

fn eval(exp: &ExpArgs, checkpoint: &Path) -> Result<()> {
    let cfg = exp.load()?;
    if !checkpoint.is_file() {
        bail!("checkpoint {} does not exist", checkpoint.display());
    }
    print_json(&evaluate_checkpoint(&cfg, checkpoint, cfg.seeds[0])?)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { exp } => {
            let cfg = exp.load()?;
            for p in gen_data(&cfg, &cfg.output_dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Pretrain { exp } => {
            if exp.load()?.pretrain.is_none() {
                bail!("the config has no `pretrain` section");
            }
            stages(exp, Stages::PRETRAIN)
        }
        Command::Finetune { exp } => stages(exp, Stages::FINETUNE),
        Command::Eval { exp, checkpoint } => eval(exp, checkpoint),
        Command::Analyze { metrics } => analyze(metrics),
        Command::Run { exp } => stages(exp, Stages::ALL),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
