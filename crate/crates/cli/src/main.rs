//! `fillerlm`: corpus synthesis, MLM training, perplexity, probing,
//! downstream regression and seed-sweep comparisons.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{Ctx, Format};
use crate::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "fillerlm", version, about = "Filler-aware masked language modelling experiments", after_help = config::keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for single-run commands (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated seed list (overrides `seeds`).
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Strategy such as T1.PS3 (overrides `strategy`).
    #[arg(long, global = true)]
    strategy: Option<String>,
    /// Skip MLM fine-tuning.
    #[arg(long, global = true)]
    no_finetune: bool,
    /// Artifact root (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Records,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic corpus at `corpus_path`.
    Synth,
    /// Print corpus statistics.
    Stats,
    /// Train the masked language model for `strategy` and `seed`.
    TrainMlm,
    /// Pseudo-perplexity of a trained model on the test split.
    EvalPpl,
    /// Filler position probe for a PS3-style model against its PS1 counterpart.
    Probe,
    /// Train a regression head for `task` on a trained model.
    TrainHead,
    /// Test MSE of a trained head.
    EvalHead,
    /// Seed sweep of `strategy` against `compare.against` with a Wilcoxon test.
    Compare,
    /// Synthesize, run every table cell over all seeds and compare.
    ReproAll,
    /// Print the resolved configuration.
    Config,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env(std::env::vars())?;
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(seeds) = &cli.seeds {
        cfg.set("seeds", seeds)?;
    }
    if let Some(s) = &cli.strategy {
        cfg.set("strategy", s)?;
    }
    if cli.no_finetune {
        cfg.set("fine_tune", "false")?;
    }
    if let Some(out) = &cli.out {
        cfg.set("output_dir", &out.display().to_string())?;
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        config: resolve(&cli)?,
        format: match cli.format {
            FormatArg::Csv => Format::Csv,
            FormatArg::Records => Format::Records,
        },
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Stats => commands::stats(&ctx),
        Command::TrainMlm => commands::train_mlm(&ctx),
        Command::EvalPpl => commands::eval_ppl(&ctx),
        Command::Probe => commands::probe(&ctx),
        Command::TrainHead => commands::train_head(&ctx),
        Command::EvalHead => commands::eval_head(&ctx),
        Command::Compare => commands::compare(&ctx),
        Command::ReproAll => commands::repro_all(&ctx),
        Command::Config => {
            print!("{}", ctx.config.render());
            Ok(())
        }
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
