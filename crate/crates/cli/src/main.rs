use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

mod commands;
mod config;

use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "saddle", version, about = "Adversarial training and attack experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment config; defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train a model and write its checkpoint and logs.
    Train,
    /// Score a checkpoint under every configured attack.
    Attack,
    /// Restart study, maxima geometry and segment probes.
    Explore,
    /// Accuracy against PGD over a range of ε.
    Sweep,
    /// Cross-model transfer table and gradient angles.
    Transfer,
    /// First-layer filter census and weight histograms.
    Inspect,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Attack => "attack",
            Command::Explore => "explore",
            Command::Sweep => "sweep",
            Command::Transfer => "transfer",
            Command::Inspect => "inspect",
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    cfg.resolve_seed();
    cfg.validate()?;
    if let Some(n) = cli.threads {
        saddle_core::par::init_threads(n.max(1))?;
    }
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;

    let started = SystemTime::now();
    let written = match cli.command {
        Command::Train => commands::train(&cfg)?,
        Command::Attack => commands::attack(&cfg)?,
        Command::Explore => commands::explore(&cfg)?,
        Command::Sweep => commands::sweep(&cfg)?,
        Command::Transfer => commands::transfer(&cfg)?,
        Command::Inspect => commands::inspect(&cfg)?,
    };
    let secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let meta = json!({
        "command": cli.command.name(),
        "started_unix": secs(started),
        "finished_unix": secs(SystemTime::now()),
        "threads": saddle_core::par::threads(),
        "files": written,
    });
    let path = cfg.output_dir.join(format!("run_meta_{}.json", cli.command.name()));
    std::fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n")?;
    for f in &written {
        println!("{}", cfg.output_dir.join(f).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
