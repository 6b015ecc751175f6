mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::{CommandError, Format, Output};
use config::{Command, Settings};

/// Panel double machine learning with two-way cluster-robust LASSO first stages.
#[derive(Parser)]
#[command(name = "paneldml", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Monte Carlo study of the estimators on simulated two-way clustered panels.
    Simulate(RunArgs),
    /// Estimate the structural parameter from a CSV panel.
    Estimate(RunArgs),
    /// Print the two-way penalty loadings of every dictionary column.
    Weights(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the csv/json result here and print a table to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Result format (default: csv for simulate and weights, json for estimate).
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Worker threads for replications and folds.
    #[arg(long)]
    threads: Option<usize>,
    /// Base seed; overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// key=value overrides applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    User(String),
    Internal(String),
}

impl From<CommandError> for Failure {
    fn from(e: CommandError) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::User(e.to_string())
    }
}

fn parse_cli() -> Result<Cli, clap::Error> {
    let mut cmd = Cli::command();
    for (name, which) in [
        ("simulate", Command::Simulate),
        ("estimate", Command::Estimate),
        ("weights", Command::Weights),
    ] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(which.key_help()));
    }
    let matches = cmd.try_get_matches()?;
    Cli::from_arg_matches(&matches)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (which, args) = match cli.command {
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Estimate(a) => (Command::Estimate, a),
        Sub::Weights(a) => (Command::Weights, a),
    };
    let mut settings = Settings::new(which);
    if let Some(path) = &args.config {
        settings.load_file(path)?;
    }
    for o in &args.overrides {
        settings.merge_override(o)?;
    }
    if let Some(seed) = args.seed {
        settings.set("seed", &seed.to_string()).map_err(|_| {
            Failure::User(format!("--seed does not apply to the {} command", command_name(which)))
        })?;
    }
    if let Some(threads) = args.threads {
        if threads == 0 {
            return Err(Failure::User("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Internal(format!("thread pool: {e}")))?;
    }
    let format = args.format.unwrap_or(match which {
        Command::Estimate => Format::Json,
        _ => Format::Csv,
    });
    let output: Output = match which {
        Command::Simulate => commands::simulate(&settings, format)?,
        Command::Estimate => commands::estimate(&settings, format)?,
        Command::Weights => commands::weights(&settings, format)?,
    };
    for w in &output.warnings {
        eprintln!("warning: {w}");
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, &output.data)
                .map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
            print!("{}", output.table);
        }
        None => print!("{}", output.data),
    }
    Ok(())
}

fn command_name(which: Command) -> &'static str {
    match which {
        Command::Simulate => "simulate",
        Command::Estimate => "estimate",
        Command::Weights => "weights",
    }
}

fn main() -> ExitCode {
    let cli = match parse_cli() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}
