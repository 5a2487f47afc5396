use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nscl_cli::config::RunConfig;
use nscl_cli::{commands, error_kind, exit_code};

/// Continual learning in the null space of feature covariance.
#[derive(Parser)]
#[command(name = "nscl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task sequence and write metrics, spectra and diagnostics.
    Run {
        /// Path to a key = value config file.
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set mode=plain-adam (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run a verification suite: lemma1, projector, covariance, plasticity or sweep.
    Verify {
        suite: String,
        /// Seed for the suite's synthetic instances.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Dump per-layer eigenvalue spectra of a covariance checkpoint.
    Spectra {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Null-space threshold factor.
        #[arg(long, default_value_t = 10.0)]
        a: f64,
        /// Output directory for the spectrum CSVs.
        #[arg(long, default_value = "spectra")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                eprintln!("error: kind=config msg=\"invalid command line\"");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };

    let result = match cli.command {
        Command::Run { config, set } => {
            RunConfig::load(&config, &set).and_then(|cfg| commands::run(&cfg).map(|_| ()))
        }
        Command::Verify { suite, seed } => commands::run_verify(&suite, seed),
        Command::Spectra { checkpoint, a, out_dir } => {
            commands::run_spectra(&checkpoint, a, &out_dir)
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={:?}", error_kind(&e), e.to_string());
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
