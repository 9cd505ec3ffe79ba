use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use langevin_gf::cli::{self, Command, ExperimentConfig, Overrides};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CommandArg {
    WeakOrder,
    Ergodic,
    Structure,
    Simulate,
}

impl From<CommandArg> for Command {
    fn from(c: CommandArg) -> Self {
        match c {
            CommandArg::WeakOrder => Command::WeakOrder,
            CommandArg::Ergodic => Command::Ergodic,
            CommandArg::Structure => Command::Structure,
            CommandArg::Simulate => Command::Simulate,
        }
    }
}

/// Conformal symplectic integration experiments for stochastic Langevin equations.
#[derive(Debug, Parser)]
#[command(name = "langevin-gf", version)]
struct Args {
    /// Experiment to run.
    #[arg(value_enum)]
    command: CommandArg,
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output.directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides mc.master_seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Realization count (overrides mc.realizations).
    #[arg(long)]
    realizations: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let command = Command::from(args.command);
    let result = (|| {
        cli::configure_threads()?;
        let mut cfg = ExperimentConfig::from_path(&args.config)?;
        cfg.apply(&Overrides { out: args.out.clone(), seed: args.seed, realizations: args.realizations })?;
        cli::run(&cfg, command)
    })();
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("langevin-gf {}: error: {e}", command.name());
            ExitCode::FAILURE
        }
    }
}
