use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cadence_core::harness::runner::{report_json, STATE_FILE};
use cadence_core::harness::{
    report_from_dir, restore_state, run_to_dir, snapshot_state, ExperimentConfig, RunOptions, RunStatus,
};
use clap::{Parser, Subcommand};

/// Agentic message personalisation: simulate, decide, measure, learn.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write audit logs, checkpoint and lift report to DIR.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the simulator seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many cycles in total and leave a checkpoint.
        #[arg(long)]
        cycles: Option<usize>,
        /// Continue from the checkpoint in DIR.
        #[arg(long)]
        resume: bool,
    },
    /// Recompute and print the lift report of a finished run.
    Report {
        #[arg(long)]
        audit: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Export a run's posterior state to PATH.
    Snapshot {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate PATH and install it as a run's posterior state.
    Restore {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            cycles,
            resume,
        } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(seed) = seed {
                cfg.sim.seed = seed;
            }
            let opts = RunOptions {
                stop_after: cycles,
                resume,
            };
            match run_to_dir(cfg, &out, opts)? {
                RunStatus::Paused { next_cycle } => {
                    println!("paused before cycle {next_cycle}; resume with --resume");
                }
                RunStatus::Finished(report) => print!("{}", report.render_table()),
            }
        }
        Command::Report { audit, json } => {
            let report = report_from_dir(&audit)?;
            if json {
                println!("{}", report_json(&report));
            } else {
                print!("{}", report.render_table());
            }
        }
        Command::Snapshot { state, out } => {
            let store = restore_state(&out.join(STATE_FILE))?;
            snapshot_state(&store, &state)?;
            println!("{} entries written to {}", store.len(), state.display());
        }
        Command::Restore { state, out } => {
            let store = restore_state(&state)?;
            snapshot_state(&store, &out.join(STATE_FILE))?;
            println!("{} entries restored into {}", store.len(), out.display());
        }
    }
    Ok(())
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
