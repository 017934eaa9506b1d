//! Experiment harness: seeded runs of the agent (or a random baseline) on
//! the continuous task, step and episode budgets, state-space coverage
//! bookkeeping, and the on-disk artifact layout. All artifact files are
//! written with deterministic formatting so a rerun with the same
//! configuration and seeds reproduces them byte for byte.

mod synthetic_fit;
mod suite;

pub use suite::{oracle_suite, OracleCheck};
pub use synthetic_fit::{fit_synthetic, SyntheticReport};

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, AgentCounters, DecisionRecord};
use crate::config::Config;
use crate::env::{ContinuousEnv, MountainCar};
use crate::error::{Error, Result};
use crate::snapshot::RefitSnapshot;

/// How long one run lasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Steps(usize),
    Episodes(usize),
}

/// One seeded run request.
#[derive(Debug, Clone, Copy)]
pub struct RunSpec {
    pub seed: u64,
    pub budget: Budget,
    /// Replace the agent with uniform random controls.
    pub baseline_random: bool,
    /// Zero out the parameter information-gain term in policy scoring.
    pub no_info_gain: bool,
}

/// One row of the step log.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub episode: usize,
    pub position: f64,
    pub velocity: f64,
    pub control: f64,
    pub reward: f64,
    pub terminated: bool,
    pub region: Option<usize>,
    pub has_model: bool,
}

/// Per-episode outcome.
#[derive(Debug, Clone)]
pub struct EpisodeStat {
    pub index: usize,
    pub steps: usize,
    pub reward: f64,
    pub success: bool,
}

/// Visited-cell tracker over the (position, velocity) box.
#[derive(Debug, Clone)]
pub struct CoverageGrid {
    position_bins: usize,
    velocity_bins: usize,
    lower: DVector<f64>,
    upper: DVector<f64>,
    visited: Vec<bool>,
}

impl CoverageGrid {
    pub fn new(env: &dyn ContinuousEnv, position_bins: usize, velocity_bins: usize) -> Self {
        CoverageGrid {
            position_bins,
            velocity_bins,
            lower: env.state_lower(),
            upper: env.state_upper(),
            visited: vec![false; position_bins * velocity_bins],
        }
    }

    fn bin(&self, value: f64, lo: f64, hi: f64, bins: usize) -> usize {
        let t = ((value - lo) / (hi - lo)).clamp(0.0, 1.0);
        ((t * bins as f64) as usize).min(bins - 1)
    }

    pub fn mark(&mut self, state: &DVector<f64>) {
        let p = self.bin(state[0], self.lower[0], self.upper[0], self.position_bins);
        let v = self.bin(state[1], self.lower[1], self.upper[1], self.velocity_bins);
        self.visited[p * self.velocity_bins + v] = true;
    }

    pub fn visited_cells(&self) -> usize {
        self.visited.iter().filter(|&&v| v).count()
    }

    pub fn total_cells(&self) -> usize {
        self.visited.len()
    }

    pub fn fraction(&self) -> f64 {
        self.visited_cells() as f64 / self.total_cells() as f64
    }
}

/// Point on the coverage curve.
#[derive(Debug, Clone, Copy)]
pub struct CoveragePoint {
    pub step: usize,
    pub visited_cells: usize,
    pub total_cells: usize,
}

/// Everything one seeded run produced.
#[derive(Debug)]
pub struct RunResult {
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub episodes: Vec<EpisodeStat>,
    pub decisions: Vec<DecisionRecord>,
    pub refits: Vec<RefitSnapshot>,
    pub counters: AgentCounters,
    pub coverage_curve: Vec<CoveragePoint>,
    pub final_coverage: f64,
    pub total_reward: f64,
    pub successes: usize,
    pub config_hash: String,
}

enum Controller {
    Agent(Box<Agent>),
    Random(ChaCha8Rng),
}

/// Runs one seed to its budget. Episodes are truncated without reward after
/// `experiment.max_episode_steps` steps; a truncated episode still counts
/// toward an episode budget.
pub fn run(cfg: &Config, spec: &RunSpec) -> Result<RunResult> {
    let mut cfg = cfg.clone();
    if spec.no_info_gain {
        cfg.planner.info_gain_weight = 0.0;
    }
    cfg.validate()?;
    let config_hash = cfg.hash();
    let env = MountainCar::new(cfg.env.clone());
    let max_ep = cfg.experiment.max_episode_steps;
    let coverage_cfg = &cfg.experiment.coverage;
    let mut grid = CoverageGrid::new(
        &env,
        coverage_cfg.grid_position_bins,
        coverage_cfg.grid_velocity_bins,
    );
    let stride = coverage_cfg.checkpoint_stride;

    let mut controller = if spec.baseline_random {
        Controller::Random(ChaCha8Rng::seed_from_u64(spec.seed))
    } else {
        Controller::Agent(Box::new(Agent::new(cfg.clone(), &env, spec.seed)?))
    };

    let mut x = env.reset();
    if let Controller::Agent(agent) = &mut controller {
        agent.begin_episode(&x);
    }
    grid.mark(&x);

    let mut records = Vec::new();
    let mut episodes = Vec::new();
    let mut curve = Vec::new();
    let mut step = 0usize;
    let mut episode = 0usize;
    let mut ep_steps = 0usize;
    let mut ep_reward = 0.0f64;
    let mut total_reward = 0.0f64;
    let mut successes = 0usize;

    loop {
        match spec.budget {
            Budget::Steps(n) if step >= n => break,
            Budget::Episodes(n) if episode >= n => break,
            _ => {}
        }

        let u = match &mut controller {
            Controller::Agent(agent) => agent.decide_control(),
            Controller::Random(rng) => DVector::from_fn(env.control_dim(), |i, _| {
                rng.random_range(env.control_lower()[i]..env.control_upper()[i])
            }),
        };
        let out = env.step(&x, &u);
        step += 1;
        ep_steps += 1;
        ep_reward += out.reward;
        total_reward += out.reward;
        grid.mark(&out.state);

        if let Controller::Agent(agent) = &mut controller {
            agent.record_step(&u, &out.state, out.reward, out.terminated)?;
        }
        let (region, has_model) = match &controller {
            Controller::Agent(agent) => (agent.current_region(), agent.has_model()),
            Controller::Random(_) => (None, false),
        };
        records.push(StepRecord {
            step,
            episode,
            position: out.state[0],
            velocity: out.state[1],
            control: u[0],
            reward: out.reward,
            terminated: out.terminated,
            region,
            has_model,
        });
        if step % stride == 0 {
            curve.push(CoveragePoint {
                step,
                visited_cells: grid.visited_cells(),
                total_cells: grid.total_cells(),
            });
        }

        if out.terminated || ep_steps >= max_ep {
            episodes.push(EpisodeStat {
                index: episode,
                steps: ep_steps,
                reward: ep_reward,
                success: out.terminated,
            });
            successes += out.terminated as usize;
            episode += 1;
            ep_steps = 0;
            ep_reward = 0.0;
            x = env.reset();
            grid.mark(&x);
            if let Controller::Agent(agent) = &mut controller {
                agent.begin_episode(&x);
            }
        } else {
            x = out.state;
        }
    }

    let (decisions, refits, counters) = match controller {
        Controller::Agent(mut agent) => (
            agent.take_decisions(),
            agent.take_refit_snapshots(),
            *agent.counters(),
        ),
        Controller::Random(_) => (Vec::new(), Vec::new(), AgentCounters::default()),
    };
    Ok(RunResult {
        seed: spec.seed,
        records,
        episodes,
        decisions,
        refits,
        counters,
        final_coverage: grid.fraction(),
        coverage_curve: curve,
        total_reward,
        successes,
        config_hash,
    })
}

/// Runs every seed sequentially with a step budget.
pub fn coverage_experiment(
    cfg: &Config,
    seeds: &[u64],
    steps: usize,
    baseline_random: bool,
    no_info_gain: bool,
) -> Result<Vec<RunResult>> {
    seeds
        .iter()
        .map(|&seed| {
            run(
                cfg,
                &RunSpec {
                    seed,
                    budget: Budget::Steps(steps),
                    baseline_random,
                    no_info_gain,
                },
            )
        })
        .collect()
}

/// Runs every seed sequentially with an episode budget.
pub fn rewards_experiment(
    cfg: &Config,
    seeds: &[u64],
    episodes: usize,
    baseline_random: bool,
    no_info_gain: bool,
) -> Result<Vec<RunResult>> {
    seeds
        .iter()
        .map(|&seed| {
            run(
                cfg,
                &RunSpec {
                    seed,
                    budget: Budget::Episodes(episodes),
                    baseline_random,
                    no_info_gain,
                },
            )
        })
        .collect()
}

/// `{:?}` float formatting round-trips exactly and never varies between
/// identical runs, which keeps rerun artifacts byte-identical.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes the full artifact set for a batch of runs:
/// `config.json`, `run_log.csv`, `decisions.jsonl`, `coverage.csv`,
/// `rewards.csv`, and one JSON file per refit under `refit_snapshots/`.
pub fn write_artifacts(dir: impl AsRef<Path>, cfg: &Config, runs: &[RunResult]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    cfg.to_file(dir.join("config.json"))?;

    let mut run_log = String::from(
        "seed,step,episode,position,velocity,control,reward,terminated,region,has_model\n",
    );
    for r in runs {
        for rec in &r.records {
            let region = rec
                .region
                .map(|v| v.to_string())
                .unwrap_or_default();
            writeln!(
                run_log,
                "{},{},{},{},{},{},{},{},{},{}",
                r.seed,
                rec.step,
                rec.episode,
                fmt_f64(rec.position),
                fmt_f64(rec.velocity),
                fmt_f64(rec.control),
                fmt_f64(rec.reward),
                rec.terminated,
                region,
                rec.has_model
            )
            .expect("write to string");
        }
    }
    write_text(&dir.join("run_log.csv"), &run_log)?;

    let mut decisions = String::new();
    for r in runs {
        for d in &r.decisions {
            let mut line = serde_json::json!(d);
            line["seed"] = serde_json::json!(r.seed);
            writeln!(decisions, "{line}").expect("write to string");
        }
    }
    write_text(&dir.join("decisions.jsonl"), &decisions)?;

    let mut coverage = String::from("seed,step,visited_cells,total_cells,fraction\n");
    for r in runs {
        for p in &r.coverage_curve {
            writeln!(
                coverage,
                "{},{},{},{},{}",
                r.seed,
                p.step,
                p.visited_cells,
                p.total_cells,
                fmt_f64(p.visited_cells as f64 / p.total_cells as f64)
            )
            .expect("write to string");
        }
    }
    write_text(&dir.join("coverage.csv"), &coverage)?;

    let mut rewards = String::from("seed,episode,steps,reward,success\n");
    for r in runs {
        for e in &r.episodes {
            writeln!(
                rewards,
                "{},{},{},{},{}",
                r.seed,
                e.index,
                e.steps,
                fmt_f64(e.reward),
                e.success
            )
            .expect("write to string");
        }
    }
    write_text(&dir.join("rewards.csv"), &rewards)?;

    let snap_dir = dir.join("refit_snapshots");
    std::fs::create_dir_all(&snap_dir)
        .map_err(|e| Error::io(snap_dir.display().to_string(), e))?;
    for r in runs {
        for snap in &r.refits {
            let name = format!("seed{:03}_step{:07}.json", r.seed, snap.step);
            snap.write_file(snap_dir.join(name))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.model.num_modes = 3;
        cfg.agent.refit_interval = 150;
        cfg.agent.max_dwell = 10;
        cfg.fit.em_rounds = 1;
        cfg.fit.newton_max_iters = 8;
        cfg.fit.kmeans_iters = 15;
        cfg.planner.horizon = 2;
        cfg.planner.rollout_samples = 8;
        cfg.lqr.horizon = 10;
        cfg.lqr.cost_samples = 4;
        cfg.priors.max_iters = 300;
        cfg.experiment.coverage.checkpoint_stride = 50;
        cfg
    }

    #[test]
    fn step_budget_is_respected_and_episodes_truncate() {
        let cfg = tiny_config();
        let spec = RunSpec {
            seed: 2,
            budget: Budget::Steps(450),
            baseline_random: true,
            no_info_gain: false,
        };
        let result = run(&cfg, &spec).unwrap();
        assert_eq!(result.records.len(), 450);
        for e in &result.episodes {
            assert!(e.steps <= cfg.experiment.max_episode_steps);
            if !e.success {
                assert_eq!(e.reward, 0.0);
            }
        }
        assert!(result.decisions.is_empty());
        assert!(result.refits.is_empty());
    }

    #[test]
    fn episode_budget_counts_episodes() {
        let cfg = tiny_config();
        let spec = RunSpec {
            seed: 3,
            budget: Budget::Episodes(3),
            baseline_random: true,
            no_info_gain: false,
        };
        let result = run(&cfg, &spec).unwrap();
        assert_eq!(result.episodes.len(), 3);
    }

    #[test]
    fn coverage_curve_is_monotone() {
        let cfg = tiny_config();
        let spec = RunSpec {
            seed: 4,
            budget: Budget::Steps(400),
            baseline_random: true,
            no_info_gain: false,
        };
        let result = run(&cfg, &spec).unwrap();
        assert!(!result.coverage_curve.is_empty());
        let mut last = 0;
        for p in &result.coverage_curve {
            assert!(p.visited_cells >= last);
            assert!(p.visited_cells <= p.total_cells);
            last = p.visited_cells;
        }
        assert!(result.final_coverage > 0.0 && result.final_coverage <= 1.0);
    }

    #[test]
    fn artifacts_are_byte_identical_across_reruns() {
        let cfg = tiny_config();
        let spec = RunSpec {
            seed: 5,
            budget: Budget::Steps(320),
            baseline_random: false,
            no_info_gain: false,
        };
        let dir_a = std::env::temp_dir().join("modeplan-harness-a");
        let dir_b = std::env::temp_dir().join("modeplan-harness-b");
        for dir in [&dir_a, &dir_b] {
            std::fs::remove_dir_all(dir).ok();
            let result = run(&cfg, &spec).unwrap();
            write_artifacts(dir, &cfg, &[result]).unwrap();
        }
        for name in ["run_log.csv", "decisions.jsonl", "coverage.csv", "rewards.csv", "config.json"] {
            let a = std::fs::read(dir_a.join(name)).unwrap();
            let b = std::fs::read(dir_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        let cfg_back = Config::from_file(dir_a.join("config.json")).unwrap();
        assert_eq!(cfg_back.hash(), cfg.hash());
        std::fs::remove_dir_all(&dir_a).ok();
        std::fs::remove_dir_all(&dir_b).ok();
    }

    #[test]
    fn agent_run_logs_decisions_once_model_exists() {
        let cfg = tiny_config();
        let spec = RunSpec {
            seed: 6,
            budget: Budget::Steps(400),
            baseline_random: false,
            no_info_gain: false,
        };
        let result = run(&cfg, &spec).unwrap();
        assert!(result.counters.refits >= 1);
        assert!(!result.decisions.is_empty());
        assert_eq!(
            result.counters.planner_calls,
            result.counters.mode_change_triggers + result.counters.dwell_triggers
        );
        let with_model = result.records.iter().filter(|r| r.has_model).count();
        assert!(with_model > 0);
    }
}
