//! `sbsampler` command-line driver.
//!
//! * `run <config>` pretrains, trains and evaluates every seed of a config
//!   and writes one directory of artifacts per seed.
//! * `compare <reports...>` tabulates reports by loss kind and target.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on invalid input.

mod compare;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sbsampler::losses::RegularizerKind;
use sbsampler::targets::TargetName;

use config::{ExperimentConfig, Overrides};
use run::SeedOutcome;

#[derive(Parser)]
#[command(name = "sbsampler", version, about = "Schrödinger-bridge sampler experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the runs described by a config file.
    Run {
        config: PathBuf,
        #[arg(long)]
        target: Option<TargetName>,
        #[arg(long)]
        loss: Option<RegularizerKind>,
        #[arg(long, allow_negative_numbers = true)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the resolved config and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Tabulate run reports (report.json files or run directories).
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

const INVALID: u8 = 2;

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            target,
            loss,
            lambda,
            seed,
            out,
            dry_run,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(INVALID, &e),
            };
            cfg.apply(&Overrides {
                target,
                loss,
                lambda,
                seed,
                out,
            });
            if let Some(&s) = cfg.seeds.first() {
                if let Err(e) = cfg.train_config(s).validate() {
                    return fail(INVALID, &e.into());
                }
            } else {
                eprintln!("error: seeds: at least one seed is required");
                return ExitCode::from(INVALID);
            }
            if dry_run {
                print!("{}", cfg.to_toml());
                return ExitCode::SUCCESS;
            }
            let mut status = ExitCode::SUCCESS;
            for outcome in run::run_all(&cfg) {
                match outcome {
                    SeedOutcome::Done(dir) => println!("wrote {}", dir.display()),
                    SeedOutcome::Failed(dir, e) => {
                        eprintln!("run {} failed: {e:#}", dir.display());
                        status = ExitCode::FAILURE;
                    }
                }
            }
            status
        }
        Command::Compare { reports, csv } => {
            let loaded: anyhow::Result<Vec<_>> =
                reports.iter().map(|p| compare::load_report(p)).collect();
            let table = match loaded.and_then(|r| compare::compare(&r)) {
                Ok(t) => t,
                Err(e) => return fail(INVALID, &e),
            };
            print!("{}", table.render());
            if let Some(path) = csv {
                if let Err(e) = std::fs::write(&path, table.to_csv()) {
                    return fail(1, &e.into());
                }
            }
            ExitCode::SUCCESS
        }
    }
}

fn fail(code: u8, e: &anyhow::Error) -> ExitCode {
    eprintln!("error: {e:#}");
    ExitCode::from(code)
}
