//! Command-line front end: run experiments from JSON configs, compute
//! transferability matrices, audit gradients, and inspect trajectory
//! distributions.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use meta_rtl::gradcheck::{standard_battery, FD_TOL};
use meta_rtl::harness::{
    run_experiment, transferability_matrix, write_outputs, RunConfig,
};
use meta_rtl::rl::enumerate_trajectories;
use meta_rtl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "meta-rtl",
    about = "Reinforcement-weighted multi-source meta-transfer learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method over its seeds and write metrics.
    Run {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Output directory (metrics.csv, summary.json, timings.json).
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Pairwise source-task transfer benefits under the config's budgets.
    Transferability {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Finite-difference audit of the reverse-mode gradients.
    Checkgrad {
        /// Random evaluation points per section.
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print every length-k trajectory and its exact probability.
    EnumerateTrajectories {
        /// Number of tasks (used with a uniform distribution unless --probs
        /// is given).
        #[arg(long, short)]
        m: Option<usize>,
        /// Trajectory length.
        #[arg(long, short)]
        k: usize,
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        /// Comma-separated task probabilities (must sum to 1).
        #[arg(long, value_delimiter = ',')]
        probs: Option<Vec<f64>>,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            seed_override,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed_override {
                cfg.seeds = vec![seed];
            }
            let result = run_experiment(&cfg)?;
            write_outputs(&result, &out)?;
            let s = &result.summary;
            println!(
                "{}: final accuracy {:.4} +/- {:.4} over {} seed(s), best {:.4}",
                s.method, s.final_accuracy_mean, s.final_accuracy_std, s.seeds, s.best_accuracy_mean
            );
            println!("wrote {}", out.join("metrics.csv").display());
            Ok(())
        }
        Command::Transferability { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let matrix = transferability_matrix(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let csv = matrix.csv();
            std::fs::write(out.join("transferability.csv"), &csv)?;
            let json = serde_json::to_string_pretty(&matrix)
                .map_err(|e| Error::ConfigError(format!("matrix serialization: {e}")))?;
            std::fs::write(out.join("transferability.json"), json + "\n")?;
            print!("{csv}");
            Ok(())
        }
        Command::Checkgrad { points, seed } => {
            if points == 0 {
                return Err(Error::ConfigError("points must be positive".into()));
            }
            let sections = standard_battery(points, seed)?;
            let mut worst = 0.0f64;
            let mut flagged = 0;
            for s in &sections {
                println!(
                    "{:<14} points {:>3}  max rel err {:.3e}  flagged {}",
                    s.name, s.points, s.max_rel_err, s.flagged
                );
                worst = worst.max(s.max_rel_err);
                flagged += s.flagged;
            }
            if flagged > 0 {
                return Err(Error::GradientCheckFailed {
                    max_rel_err: worst,
                    flagged,
                });
            }
            println!("all gradients within {FD_TOL:.0e}");
            Ok(())
        }
        Command::EnumerateTrajectories {
            m,
            k,
            epsilon,
            probs,
        } => {
            let probs = match (probs, m) {
                (Some(p), _) => p,
                (None, Some(m)) => vec![1.0 / m as f64; m],
                (None, None) => {
                    return Err(Error::ConfigError(
                        "pass --probs or --m for a uniform distribution".into(),
                    ))
                }
            };
            let all = enumerate_trajectories(&probs, k, epsilon)?;
            let mut total = 0.0;
            for (indices, p) in &all {
                let labels: Vec<String> = indices.iter().map(|i| i.to_string()).collect();
                println!("{:<16} {:.10}", labels.join(" -> "), p);
                total += p;
            }
            println!("{} trajectories, total probability {total:.12}", all.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
