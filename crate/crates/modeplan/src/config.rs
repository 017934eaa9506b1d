//! Runtime configuration for every layer, with serde round-tripping so a run
//! can be reproduced from its `config.json` artifact alone. All defaults match
//! the mountain-car experiment setup.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};

/// Continuous environment parameters (sparse-reward mountain car).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Force multiplier applied to the commanded control.
    pub power: f64,
    /// Amplitude of the gravity term `gravity * cos(3 * position)`.
    pub gravity: f64,
    pub position_min: f64,
    pub position_max: f64,
    /// Velocity is clamped to `[-speed_limit, speed_limit]`.
    pub speed_limit: f64,
    /// Crossing this position terminates the episode.
    pub goal_position: f64,
    /// Reward granted once, on the terminating step.
    pub goal_reward: f64,
    /// Optional per-step penalty `-weight * force^2`; zero disables it.
    pub control_cost_weight: f64,
    pub control_min: f64,
    pub control_max: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            power: 0.0015,
            gravity: 0.0025,
            position_min: -1.2,
            position_max: 0.6,
            speed_limit: 0.07,
            goal_position: 0.5,
            goal_reward: 100.0,
            control_cost_weight: 0.0,
            control_min: -1.0,
            control_max: 1.0,
        }
    }
}

/// Dimensions of the switching linear model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_modes: usize,
    pub state_dim: usize,
    pub control_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_modes: 5,
            state_dim: 2,
            control_dim: 1,
        }
    }
}

/// Variational EM settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Full (continuous e-step, discrete e-step, m-step) rounds per fit call.
    pub em_rounds: usize,
    /// Newton ascent iterations for the continuous e-step.
    pub newton_max_iters: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub newton_tol: f64,
    /// Step halvings allowed per Newton iteration before giving up on ascent.
    pub newton_max_halvings: usize,
    /// Isotropic variance of the Gaussian prior on the first latent state,
    /// centered at the first observation.
    pub init_state_var: f64,
    /// Smallest eigenvalue allowed in any estimated covariance.
    pub cov_floor: f64,
    /// A mode whose total responsibility falls below this keeps its previous
    /// dynamics instead of being re-estimated from (almost) no data.
    pub resp_floor: f64,
    /// Matrix-normal column precision of the dynamics prior (times identity).
    pub mniw_col_precision: f64,
    /// Inverse-Wishart degrees of freedom = state_dim + this offset.
    pub iw_dof_extra: f64,
    /// Inverse-Wishart scale matrix = this value times identity.
    pub iw_scale: f64,
    /// Ridge penalty on the gating parameters during the m-step.
    pub recurrence_ridge: f64,
    /// Gradient-ascent iterations for the gating regression.
    pub logistic_max_iters: usize,
    /// Stop the gating regression when the gradient infinity norm is below.
    pub logistic_tol: f64,
    /// Backtracking halvings per gating ascent step.
    pub logistic_max_halvings: usize,
    /// Lloyd iterations for the k-means initializer.
    pub kmeans_iters: usize,
    /// Hard reassignment rounds after k-means: refit per-cluster regressions
    /// and move each transition to the cluster that predicts it best.
    pub init_refine_rounds: usize,
    /// Ridge used by the per-cluster least-squares initializer.
    pub init_ridge: f64,
    /// Emission noise variance per coordinate as a fraction of that
    /// coordinate's observed variance. The emission channel is pinned rather
    /// than re-estimated: with identity observation of the state, a free
    /// emission covariance and a free process covariance race each other
    /// toward zero by warping the state posterior. The fraction keeps the
    /// pin honest per coordinate no matter how differently they are scaled.
    pub emission_var_scale: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            em_rounds: 3,
            newton_max_iters: 50,
            newton_tol: 1e-6,
            newton_max_halvings: 20,
            init_state_var: 1.0,
            cov_floor: 1e-12,
            resp_floor: 1e-3,
            mniw_col_precision: 1e-2,
            iw_dof_extra: 2.0,
            iw_scale: 0.1,
            recurrence_ridge: 1e-2,
            logistic_max_iters: 200,
            logistic_tol: 1e-8,
            logistic_max_halvings: 40,
            kmeans_iters: 100,
            init_refine_rounds: 10,
            init_ridge: 1e-6,
            emission_var_scale: 1e-6,
        }
    }
}

/// Region adjacency test settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    /// Slack added to the LP threshold when declaring two cells adjacent.
    pub adjacency_tol: f64,
    /// Simplex pivot budget before the LP is declared stuck.
    pub simplex_pivot_cap: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            adjacency_tol: 1e-7,
            simplex_pivot_cap: 20_000,
        }
    }
}

/// Region target search settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Ascent stops once the region probability reaches this value.
    pub prob_threshold: f64,
    /// Gradient ascent step size.
    pub step_size: f64,
    pub max_iters: usize,
    /// Isotropic variance reported around the found target state.
    pub target_var: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            prob_threshold: 0.7,
            step_size: 0.1,
            max_iters: 5000,
            target_var: 1e-2,
        }
    }
}

/// Finite-horizon tracking controller settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LqrConfig {
    /// Number of controlled steps per region-to-region maneuver.
    pub horizon: usize,
    /// Control penalty matrix = this value times identity.
    pub control_weight: f64,
    /// States sampled per region when averaging controller cost.
    pub cost_samples: usize,
}

impl LqrConfig {
    /// Terminal state penalty, tied to the sharpness of the region target:
    /// the inverse of the target variance.
    pub fn terminal_weight(&self, priors: &PriorConfig) -> f64 {
        1.0 / priors.target_var
    }
}

impl Default for LqrConfig {
    fn default() -> Self {
        LqrConfig {
            // Longer than the maximum dwell so a maneuver never outlives its
            // gain schedule and coasts on the weak terminal-only gain.
            horizon: 64,
            control_weight: 1.0,
            cost_samples: 32,
        }
    }
}

/// Discrete active-inference planner settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Discrete planning horizon (actions per policy).
    pub horizon: usize,
    /// Enumerate all policies when `num_modes^horizon` is at most this;
    /// otherwise sample this many policies uniformly.
    pub enumeration_cap: usize,
    /// Monte Carlo rollouts per policy.
    pub rollout_samples: usize,
    /// Dirichlet pseudo-count on the commanded successor of a permitted move.
    pub alpha_valid: f64,
    /// Dirichlet pseudo-count on other permitted successors.
    pub alpha_slip: f64,
    /// Pseudo-count on moves the adjacency structure forbids.
    pub alpha_locked: f64,
    /// Preference vector scale on observed per-region reward.
    pub preference_scale: f64,
    /// Weight of controller cost inside the policy prior.
    pub controller_cost_scale: f64,
    /// Weight of the parameter information-gain term (0 disables it).
    pub info_gain_weight: f64,
    /// Weight of the predicted-state entropy bonus.
    pub entropy_weight: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 3,
            enumeration_cap: 4096,
            rollout_samples: 64,
            alpha_valid: 1.0,
            alpha_slip: 0.5,
            alpha_locked: 1e-10,
            preference_scale: 4.0,
            controller_cost_scale: 0.1,
            info_gain_weight: 1.0,
            entropy_weight: 1.0,
        }
    }
}

/// Online agent loop settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Steps between model refits; also the length of the random warmup
    /// before the first fit.
    pub refit_interval: usize,
    /// A new discrete decision is forced after this many steps without a
    /// mode change.
    pub max_dwell: usize,
    /// Spread of fallback samples around a region target when no visited
    /// states are available for controller cost averaging.
    pub fallback_sample_spread: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            refit_interval: 1000,
            max_dwell: 50,
            fallback_sample_spread: 0.05,
        }
    }
}

/// Coverage experiment settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageConfig {
    pub grid_position_bins: usize,
    pub grid_velocity_bins: usize,
    pub steps: usize,
    pub seeds: Vec<u64>,
    /// Steps between recorded points on the coverage curve.
    pub checkpoint_stride: usize,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            grid_position_bins: 32,
            grid_velocity_bins: 32,
            steps: 10_000,
            seeds: vec![0, 1, 2],
            checkpoint_stride: 100,
        }
    }
}

/// Reward experiment settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardsConfig {
    pub episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for RewardsConfig {
    fn default() -> Self {
        RewardsConfig {
            episodes: 20,
            seeds: vec![0, 1, 2, 3, 4, 5],
        }
    }
}

/// Experiment harness settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Episodes are truncated (without reward) after this many steps.
    pub max_episode_steps: usize,
    pub coverage: CoverageConfig,
    pub rewards: RewardsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            max_episode_steps: 200,
            coverage: CoverageConfig::default(),
            rewards: RewardsConfig::default(),
        }
    }
}

/// Top-level configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub fit: FitConfig,
    pub partition: PartitionConfig,
    pub priors: PriorConfig,
    pub lqr: LqrConfig,
    pub planner: PlannerConfig,
    pub agent: AgentConfig,
    pub experiment: ExperimentConfig,
}

impl Config {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Hex digest of the serialized configuration, embedded in artifacts so
    /// outputs can be traced back to the exact settings that produced them.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        }
        fn at_least_one(name: &str, v: usize) -> Result<()> {
            if v >= 1 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be at least 1")))
            }
        }

        if self.env.position_min >= self.env.position_max {
            return Err(Error::Config("position bounds are inverted".into()));
        }
        if self.env.control_min >= self.env.control_max {
            return Err(Error::Config("control bounds are inverted".into()));
        }
        positive("env.speed_limit", self.env.speed_limit)?;
        positive("env.power", self.env.power)?;

        at_least_one("model.num_modes", self.model.num_modes)?;
        at_least_one("model.state_dim", self.model.state_dim)?;
        at_least_one("model.control_dim", self.model.control_dim)?;

        positive("fit.init_state_var", self.fit.init_state_var)?;
        positive("fit.cov_floor", self.fit.cov_floor)?;
        positive("fit.mniw_col_precision", self.fit.mniw_col_precision)?;
        positive("fit.iw_scale", self.fit.iw_scale)?;
        if self.fit.iw_dof_extra <= 1.0 {
            return Err(Error::Config(
                "fit.iw_dof_extra must exceed 1 so the expected noise covariance exists".into(),
            ));
        }

        positive("partition.adjacency_tol", self.partition.adjacency_tol)?;

        if !(0.0 < self.priors.prob_threshold && self.priors.prob_threshold < 1.0) {
            return Err(Error::Config(
                "priors.prob_threshold must lie strictly between 0 and 1".into(),
            ));
        }
        positive("priors.step_size", self.priors.step_size)?;
        positive("priors.target_var", self.priors.target_var)?;

        at_least_one("lqr.horizon", self.lqr.horizon)?;
        positive("lqr.control_weight", self.lqr.control_weight)?;

        at_least_one("planner.horizon", self.planner.horizon)?;
        at_least_one("planner.rollout_samples", self.planner.rollout_samples)?;
        at_least_one("planner.enumeration_cap", self.planner.enumeration_cap)?;
        positive("planner.alpha_valid", self.planner.alpha_valid)?;
        positive("planner.alpha_slip", self.planner.alpha_slip)?;
        positive("planner.alpha_locked", self.planner.alpha_locked)?;
        if self.planner.alpha_locked >= self.planner.alpha_slip {
            return Err(Error::Config(
                "planner.alpha_locked must be far below alpha_slip".into(),
            ));
        }

        at_least_one("agent.refit_interval", self.agent.refit_interval)?;
        at_least_one("agent.max_dwell", self.agent.max_dwell)?;

        at_least_one("experiment.max_episode_steps", self.experiment.max_episode_steps)?;
        at_least_one(
            "experiment.coverage.grid_position_bins",
            self.experiment.coverage.grid_position_bins,
        )?;
        at_least_one(
            "experiment.coverage.grid_velocity_bins",
            self.experiment.coverage.grid_velocity_bins,
        )?;
        at_least_one(
            "experiment.coverage.checkpoint_stride",
            self.experiment.coverage.checkpoint_stride,
        )?;
        if self.experiment.coverage.seeds.is_empty() || self.experiment.rewards.seeds.is_empty() {
            return Err(Error::Config("experiment seed lists must be non-empty".into()));
        }
        Ok(())
    }
}
