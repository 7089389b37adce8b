//! `supmoco` — command-line front end for the contrastive training
//! laboratory. Five subcommands cover the pipeline: generate a synthetic
//! dataset, train an encoder, evaluate it episodically, analyze retrieval
//! collapse, and aggregate results files into a ranked report.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use supmoco_core::commands::{run_command, Command};
use supmoco_core::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "supmoco",
    about = "Desk-scale laboratory for SupMoCo and its ancestor contrastive objectives",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Verb,

    /// Config file of `key = value` lines (see `--print-config` for keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set train.temperature=0.2`. Repeatable;
    /// later overrides win.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Override the top-level seed (applied after --config and --set).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory artifacts are read from and written to.
    #[arg(long, default_value = ".", global = true)]
    out: PathBuf,

    /// Print the fully resolved config and exit without running anything.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Write the synthetic multi-domain dataset (with label masking).
    Generate,
    /// Train an encoder on the dataset and write checkpoint + history.
    Train,
    /// Run the few-shot episodic evaluation against a checkpoint.
    Eval,
    /// Write the nearest-neighbor collapse report for a checkpoint.
    Analyze,
    /// Aggregate several results files into a table with average ranks.
    Report,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();

    let mut sets = Vec::with_capacity(cli.sets.len());
    for pair in &cli.sets {
        let Some((key, value)) = pair.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{pair}`");
        };
        sets.push((key.trim().to_string(), value.trim().to_string()));
    }
    let config = ExperimentConfig::resolve(cli.config.as_deref(), &sets, cli.seed)
        .context("resolving configuration")?;

    if cli.print_config {
        print!("{}", config.render());
        return Ok(());
    }

    let command = match cli.command {
        Verb::Generate => Command::Generate,
        Verb::Train => Command::Train,
        Verb::Eval => Command::Eval,
        Verb::Analyze => Command::Analyze,
        Verb::Report => Command::Report,
    };
    let written = run_command(command, &config, &cli.out)
        .with_context(|| format!("{} failed", command.name()))?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
