use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use kfeprune::pipeline::{run, Command, RunConfig};
use kfeprune::prune::Strategy;
use kfeprune::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Train,
    Estimate,
    Prune,
    Iterate,
    Finetune,
    Eval,
    Decompose,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Estimate => Command::Estimate,
            Cmd::Prune => Command::Prune,
            Cmd::Iterate => Command::Iterate,
            Cmd::Finetune => Command::Finetune,
            Cmd::Eval => Command::Eval,
            Cmd::Decompose => Command::Decompose,
        }
    }
}

/// Hessian-based structured pruning with Kronecker-factored curvature.
#[derive(Debug, Parser)]
#[command(name = "kfeprune", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// key = value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    cap: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input checkpoint for every command except train.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Minibatches used for curvature estimation (default: whole train split).
    #[arg(long)]
    fisher_batches: Option<usize>,
}

fn config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.strategy {
        cfg.strategy = v;
    }
    if let Some(v) = cli.ratio {
        cfg.ratio = v;
    }
    if let Some(v) = cli.cap {
        cfg.cap = Some(v);
    }
    if let Some(v) = cli.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = cli.damping {
        cfg.damping = v;
    }
    if let Some(v) = &cli.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &cli.checkpoint {
        cfg.checkpoint = Some(v.clone());
    }
    if cli.fisher_batches.is_some() {
        cfg.fisher_batches = cli.fisher_batches;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config(&cli).and_then(|cfg| run(cli.command.into(), &cfg));
    match result {
        Ok(metrics) => {
            println!("{}", metrics.to_json());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("kfeprune: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
