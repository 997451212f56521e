//! `sddg` — command-line front end for the stochastic delay differential
//! game solver.
//!
//! Exit codes: `0` the run completed, `1` the run started but a module
//! failed (partial artifacts and a manifest naming the error are on disk),
//! `2` the configuration could not be loaded/resolved or the output
//! directory could not be set up.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sddg_core::config::{CliOverrides, ExperimentConfig, Mode, PRESET_NAMES};
use sddg_core::experiment::run_experiment;
use sddg_core::parallel;

#[derive(Parser)]
#[command(
    name = "sddg",
    about = "Closed-loop Nash equilibria of stochastic delay differential games \
             via deep fictitious play",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON configuration file.
    Run {
        /// Path to the experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Master seed override (wins over every seed in the file).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory override.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Mode override.
        #[arg(long, value_enum)]
        mode: Option<CliMode>,
        /// Clamp the number of fictitious-play rounds (0 = just emit the
        /// initial policies and artifacts).
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// List the built-in benchmark presets.
    Presets,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    Train,
    EvalOnly,
    OracleOnly,
    PdeOnly,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Train => Mode::Train,
            CliMode::EvalOnly => Mode::EvalOnly,
            CliMode::OracleOnly => Mode::OracleOnly,
            CliMode::PdeOnly => Mode::PdeOnly,
        }
    }
}

fn main() -> ExitCode {
    // Worker-pool size comes from SDDG_THREADS when set; results are
    // bitwise independent of it either way.
    parallel::init_threads(None);

    match Cli::parse().command {
        Command::Presets => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, seed, out, mode, rounds } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("sddg: cannot load {}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            let overrides = CliOverrides {
                seed,
                out_dir: out,
                mode: mode.map(Mode::from),
                rounds,
            };
            let resolved = match cfg.resolve(&overrides) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("sddg: invalid configuration: {e}");
                    return ExitCode::from(2);
                }
            };
            eprintln!(
                "sddg: {} / {:?} -> {}",
                resolved.game.kind_name(),
                resolved.mode,
                resolved.out_dir.display()
            );
            match run_experiment(&resolved) {
                Ok(outcome) if outcome.is_complete() => {
                    for (k, v) in &outcome.stats {
                        println!("{k}: {v}");
                    }
                    println!("complete: {}", outcome.out_dir.display());
                    ExitCode::SUCCESS
                }
                Ok(outcome) => {
                    eprintln!(
                        "sddg: run incomplete: {}",
                        outcome.error.as_deref().unwrap_or("unknown error")
                    );
                    eprintln!("sddg: partial artifacts in {}", outcome.out_dir.display());
                    ExitCode::from(1)
                }
                Err(e) => {
                    eprintln!("sddg: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
