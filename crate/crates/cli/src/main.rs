//! Command-line front end for the removal-region estimation library.
//!
//! Every subcommand writes its outputs under `--out` together with a
//! `manifest.json` hashing each artifact, so runs can be compared
//! byte-for-byte. Exit codes: 0 success, 2 configuration error,
//! 3 numerical failure, 4 I/O failure.

mod artifacts;
mod commands;
mod config;
mod errors;

use std::path::PathBuf;
use std::process;

use clap::{Parser, Subcommand};

use crate::config::load_config;
use crate::errors::CliError;

#[derive(Parser)]
#[command(
    name = "resect",
    about = "Estimates surgically removed bone regions from pre/post volume pairs",
    version
)]
struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides both the phantom seed and the optimizer seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = one per logical CPU).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pre/post/ground-truth volume triple.
    Phantom,
    /// Rigidly align a moving volume onto a fixed volume.
    Register {
        /// Fixed (reference) volume header path.
        fixed: PathBuf,
        /// Moving volume header path.
        moving: PathBuf,
        /// Resolution pyramid levels.
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// Optimize the removal-probability field for a volume pair.
    Optimize {
        /// Intact (reference) volume header path.
        rho: PathBuf,
        /// Post-removal volume header path.
        omega: PathBuf,
        /// Binarization threshold (defaults to the config's eval_threshold).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compute overlap and surface metrics for prediction/truth pairs.
    Evaluate {
        /// JSON manifest listing the cases to score.
        manifest: PathBuf,
    },
    /// Extract an iso-surface mesh (STL + OBJ) from a volume.
    Mesh {
        /// Volume header path.
        volume: PathBuf,
        /// Iso level.
        #[arg(long, default_value_t = 0.5)]
        iso: f64,
    },
    /// Loss diagnostics.
    Loss {
        #[command(subcommand)]
        command: LossCommand,
    },
    /// Run phantom -> (register) -> optimize -> evaluate -> mesh end to end.
    Pipeline,
    /// Run the pipeline for every (loss variant, seed) pair.
    Ablation {
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4, 5, 6, 7])]
        seeds: Vec<u64>,
    },
}

#[derive(Subcommand)]
enum LossCommand {
    /// Score a stored probability field against a volume pair.
    Eval {
        /// Intact (reference) volume header path.
        rho: PathBuf,
        /// Post-removal volume header path.
        omega: PathBuf,
        /// Probability-field volume header path.
        delta: PathBuf,
        /// Also emit per-scale component diagnostics as CSV.
        #[arg(long)]
        per_scale: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = &cli.out;
    match cli.command {
        Command::Phantom => commands::phantom::run(&cfg, out),
        Command::Register {
            fixed,
            moving,
            levels,
        } => {
            if levels == 0 {
                return Err(CliError::Config("--levels must be >= 1".into()));
            }
            commands::register::run(&fixed, &moving, levels, out)
        }
        Command::Optimize {
            rho,
            omega,
            threshold,
        } => {
            if let Some(t) = threshold {
                if !(t.is_finite() && t > 0.0 && t < 1.0) {
                    return Err(CliError::Config(format!(
                        "--threshold must be inside (0,1), got {t}"
                    )));
                }
            }
            commands::optimize::run(&cfg, &rho, &omega, threshold, out)
        }
        Command::Evaluate { manifest } => commands::evaluate::run(&manifest, out),
        Command::Mesh { volume, iso } => commands::mesh::run(&volume, iso, out),
        Command::Loss {
            command: LossCommand::Eval {
                rho,
                omega,
                delta,
                per_scale,
            },
        } => commands::loss::run(&cfg, &rho, &omega, &delta, per_scale, out),
        Command::Pipeline => {
            let outcome = commands::pipeline::run(&cfg, out)?;
            let dice = outcome.row.values()[0];
            println!(
                "pipeline: {} iterations, final loss {:.6}, dice {}",
                outcome.iterations,
                outcome.final_loss,
                artifacts::csv_num(dice)
            );
            Ok(())
        }
        Command::Ablation { seeds } => commands::ablation::run(&cfg, &seeds, out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        process::exit(e.exit_code());
    }
}
