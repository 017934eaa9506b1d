//! Command line front end: coverage and reward experiments against the
//! continuous task, ground-truth recovery on synthetic data, and the
//! fast-path-versus-reference validation suite.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use modeplan::harness::{
    coverage_experiment, fit_synthetic, oracle_suite, rewards_experiment, write_artifacts,
    RunResult,
};
use modeplan::Config;

#[derive(Parser)]
#[command(name = "modeplan", version, about = "Region-planning agent experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    /// Uniform random controls instead of the agent.
    Random,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (JSON). Defaults apply when omitted.
    #[arg(long, value_name = "path")]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the agent with a baseline controller.
    #[arg(long, value_name = "which")]
    baseline: Option<Baseline>,
    /// Drop the parameter information-gain term from policy scoring.
    #[arg(long)]
    no_info_gain: bool,
    /// Directory the artifact files are written into.
    #[arg(long, value_name = "dir", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the state-space coverage experiment (step budget per seed).
    Coverage {
        #[command(flatten)]
        run: RunArgs,
        /// Steps per seed; defaults to the configured value.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the sparse-reward experiment (episode budget per seed).
    Rewards {
        #[command(flatten)]
        run: RunArgs,
        /// Episodes per seed; defaults to the configured value.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Fit a fresh model to data simulated from a known two-mode system and
    /// report how well it was recovered.
    FitSynthetic {
        #[arg(long, value_name = "path")]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Transitions to simulate.
        #[arg(long, default_value_t = 1500)]
        steps: usize,
        /// Directory the recovery report is written into.
        #[arg(long, value_name = "dir", default_value = "out")]
        out: PathBuf,
    },
    /// Run every fast path against its independent reference implementation.
    OracleSuite {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<Config> {
    match path {
        Some(p) => {
            Config::from_file(p).with_context(|| format!("loading config {}", p.display()))
        }
        None => Ok(Config::default()),
    }
}

fn summarize(label: &str, runs: &[RunResult]) {
    for r in runs {
        println!(
            "{label} seed {}: steps {} episodes {} successes {} total reward {:.3} coverage {:.4}",
            r.seed,
            r.records.len(),
            r.episodes.len(),
            r.successes,
            r.total_reward,
            r.final_coverage
        );
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    match cli.command {
        Command::Coverage { run, steps } => {
            let cfg = load_config(&run.config)?;
            let steps = steps.unwrap_or(cfg.experiment.coverage.steps);
            let seeds = match run.seed {
                Some(s) => vec![s],
                None => cfg.experiment.coverage.seeds.clone(),
            };
            let baseline = run.baseline.is_some();
            let results = coverage_experiment(&cfg, &seeds, steps, baseline, run.no_info_gain)?;
            summarize("coverage", &results);
            write_artifacts(&run.out, &cfg, &results)?;
            println!("artifacts written to {}", run.out.display());
        }
        Command::Rewards { run, episodes } => {
            let cfg = load_config(&run.config)?;
            let episodes = episodes.unwrap_or(cfg.experiment.rewards.episodes);
            let seeds = match run.seed {
                Some(s) => vec![s],
                None => cfg.experiment.rewards.seeds.clone(),
            };
            let baseline = run.baseline.is_some();
            let results = rewards_experiment(&cfg, &seeds, episodes, baseline, run.no_info_gain)?;
            summarize("rewards", &results);
            write_artifacts(&run.out, &cfg, &results)?;
            println!("artifacts written to {}", run.out.display());
        }
        Command::FitSynthetic {
            config,
            seed,
            steps,
            out,
        } => {
            let cfg = load_config(&config)?;
            let report = fit_synthetic(&cfg, seed, steps)?;
            println!(
                "segmentation accuracy {:.4} (seed {seed}, {steps} transitions)",
                report.segmentation_accuracy
            );
            for (k, (te, ce)) in report
                .transition_errors
                .iter()
                .zip(&report.control_errors)
                .enumerate()
            {
                println!("mode {k}: transition error {te:.5}, control error {ce:.5}");
            }
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("synthetic_report.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("report written to {}", path.display());
        }
        Command::OracleSuite { seed } => {
            let checks = oracle_suite(seed)?;
            let mut failures = 0usize;
            for c in &checks {
                println!(
                    "{}: {} (error {:.3e}, tolerance {:.3e})",
                    c.name,
                    if c.pass { "ok" } else { "FAIL" },
                    c.error,
                    c.tolerance
                );
                failures += (!c.pass) as usize;
            }
            if failures > 0 {
                bail!("{failures} reference comparison(s) failed");
            }
        }
    }
    Ok(())
}
