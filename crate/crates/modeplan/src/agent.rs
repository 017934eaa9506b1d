//! Online hierarchical agent. Between refits the agent filters observations
//! through the current mode's dynamics, watches the region of its filtered
//! state, and lets the discrete layer pick a new destination region whenever
//! the region changes, a command has been in force too long, or a fresh model
//! was just installed. The chosen maneuver runs on the cached controller for
//! the (source, destination) pair. Every `refit_interval` steps the model is
//! refit on the whole history, warm-started from the previous parameters,
//! and the discrete beliefs are carried over through a region relabeling.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::env::ContinuousEnv;
use crate::error::Result;
use crate::linalg::{cholesky, solve_spd};
use crate::lqr::{build_lqr_cache, LqrCache};
use crate::partition::{AdjacencyMatrix, SoftmaxPartition};
use crate::planner::{policy_distribution, DiscreteMdp};
use crate::priors::{find_all_targets, ControlPrior};
use crate::rslds::init::initialize;
use crate::rslds::learning::{fit, FitReport, MniwPrior};
use crate::rslds::{ModeDynamics, RsldsParams, Sequence, TrajectoryBatch};
use crate::snapshot::{DirichletDto, ParamsDto, RefitSnapshot, SNAPSHOT_VERSION};

/// One-step MAP state estimate: the posterior mean of the next state given
/// the mode's dynamics prediction and the new observation, combined by their
/// respective precisions.
pub fn filter_update(
    mode: &ModeDynamics,
    emission_cov: &DMatrix<f64>,
    x_prev: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let q_inv = cholesky(&mode.noise_cov)?.inverse();
    let s_inv = cholesky(emission_cov)?.inverse();
    let precision = &q_inv + &s_inv;
    let pred = mode.predict(x_prev, u);
    solve_spd(&precision, &(q_inv * pred + s_inv * y))
}

/// What caused a discrete decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// The filtered state's region differs from the previous step's region.
    /// Entering the first region of an episode (or of a freshly installed
    /// model) counts: the region changed from undefined to defined.
    ModeChange,
    /// The active command exceeded the dwell limit without a region change.
    Dwell,
}

/// One discrete decision, serialized into the decision log artifact.
#[derive(Debug, Clone, Serialize)]
pub struct DecisionRecord {
    pub step: usize,
    pub trigger: Trigger,
    pub region: usize,
    pub command: usize,
    pub utility: f64,
    pub info_gain: f64,
    pub entropy: f64,
    pub total_g: f64,
    pub log_prior: f64,
    pub log_posterior: f64,
}

/// Event counters; the planner is invoked exactly once per trigger event, so
/// `planner_calls == mode_change_triggers + dwell_triggers` always.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AgentCounters {
    pub planner_calls: u64,
    pub mode_change_triggers: u64,
    pub dwell_triggers: u64,
    pub refits: u64,
    pub refit_failures: u64,
    pub dirichlet_unlocks: u64,
    pub controller_fallbacks: u64,
}

/// Everything derived from one set of learned parameters.
#[derive(Debug, Clone)]
pub struct ModelStack {
    pub params: RsldsParams,
    pub partition: SoftmaxPartition,
    pub adjacency: AdjacencyMatrix,
    pub priors: Vec<ControlPrior>,
    pub lqr: LqrCache,
    pub mdp: DiscreteMdp,
}

#[derive(Debug, Clone)]
struct ActiveCommand {
    from: usize,
    action: usize,
    step: usize,
}

pub struct Agent {
    cfg: Config,
    seed: u64,
    rng: ChaCha8Rng,
    config_hash: String,
    state_lower: DVector<f64>,
    state_upper: DVector<f64>,
    control_lower: DVector<f64>,
    control_upper: DVector<f64>,

    stack: Option<ModelStack>,
    completed: Vec<Sequence>,
    obs_buf: Vec<DVector<f64>>,
    ctrl_buf: Vec<DVector<f64>>,

    filtered: DVector<f64>,
    last_control: DVector<f64>,
    prev_region: Option<usize>,
    dwell: usize,
    command: Option<ActiveCommand>,

    reward_sum: Vec<f64>,
    region_steps: Vec<u64>,

    total_steps: usize,
    counters: AgentCounters,
    decisions: Vec<DecisionRecord>,
    refit_snapshots: Vec<RefitSnapshot>,
}

impl Agent {
    pub fn new(cfg: Config, env: &dyn ContinuousEnv, seed: u64) -> Result<Agent> {
        cfg.validate()?;
        assert_eq!(
            cfg.model.state_dim,
            env.state_dim(),
            "identity emission requires the model state to match the observation"
        );
        assert_eq!(cfg.model.control_dim, env.control_dim());
        let k = cfg.model.num_modes;
        let config_hash = cfg.hash();
        Ok(Agent {
            state_lower: env.state_lower(),
            state_upper: env.state_upper(),
            control_lower: env.control_lower(),
            control_upper: env.control_upper(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            config_hash,
            stack: None,
            completed: Vec::new(),
            obs_buf: Vec::new(),
            ctrl_buf: Vec::new(),
            filtered: DVector::zeros(cfg.model.state_dim),
            last_control: DVector::zeros(cfg.model.control_dim),
            prev_region: None,
            dwell: 0,
            command: None,
            reward_sum: vec![0.0; k],
            region_steps: vec![0; k],
            total_steps: 0,
            counters: AgentCounters::default(),
            decisions: Vec::new(),
            refit_snapshots: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counters(&self) -> &AgentCounters {
        &self.counters
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn has_model(&self) -> bool {
        self.stack.is_some()
    }

    pub fn model(&self) -> Option<&ModelStack> {
        self.stack.as_ref()
    }

    /// Region of the current filtered state under the current partition.
    pub fn current_region(&self) -> Option<usize> {
        self.stack
            .as_ref()
            .map(|s| s.partition.region_of(&self.filtered, &self.last_control))
    }

    pub fn filtered_state(&self) -> &DVector<f64> {
        &self.filtered
    }

    /// Drains decision records accumulated since the last call.
    pub fn take_decisions(&mut self) -> Vec<DecisionRecord> {
        std::mem::take(&mut self.decisions)
    }

    /// Drains refit snapshots accumulated since the last call.
    pub fn take_refit_snapshots(&mut self) -> Vec<RefitSnapshot> {
        std::mem::take(&mut self.refit_snapshots)
    }

    /// Starts an episode at the given first observation. Any partial episode
    /// still buffered is committed to the training history first.
    pub fn begin_episode(&mut self, obs: &DVector<f64>) {
        self.flush_episode();
        self.obs_buf.push(obs.clone());
        self.filtered = obs.clone();
        self.last_control = DVector::zeros(self.cfg.model.control_dim);
        self.prev_region = None;
        self.dwell = 0;
        self.command = None;
    }

    fn flush_episode(&mut self) {
        if self.obs_buf.len() >= 2 {
            let obs = std::mem::take(&mut self.obs_buf);
            let ctrl = std::mem::take(&mut self.ctrl_buf);
            self.completed.push(Sequence::new(obs, ctrl));
        } else {
            self.obs_buf.clear();
            self.ctrl_buf.clear();
        }
    }

    fn clamp_control(&self, mut u: DVector<f64>) -> DVector<f64> {
        for i in 0..u.len() {
            u[i] = u[i].clamp(self.control_lower[i], self.control_upper[i]);
        }
        u
    }

    fn random_control(&mut self) -> DVector<f64> {
        DVector::from_fn(self.cfg.model.control_dim, |i, _| {
            self.rng
                .random_range(self.control_lower[i]..self.control_upper[i])
        })
    }

    /// Picks the control for the current state. Without a model this is a
    /// uniform draw from the control box; with one, trigger conditions are
    /// checked, the discrete layer is consulted when one fires, and the
    /// active maneuver's controller produces the (clamped) control.
    pub fn decide_control(&mut self) -> DVector<f64> {
        if self.stack.is_none() {
            let u = self.random_control();
            self.last_control = u.clone();
            return u;
        }

        let region = {
            let stack = self.stack.as_ref().unwrap();
            stack.partition.region_of(&self.filtered, &self.last_control)
        };
        let trigger = if self.prev_region != Some(region) {
            Some(Trigger::ModeChange)
        } else if self.dwell >= self.cfg.agent.max_dwell {
            Some(Trigger::Dwell)
        } else {
            None
        };

        if let Some(kind) = trigger {
            self.run_planner(region, kind);
        } else {
            self.dwell += 1;
        }
        self.prev_region = Some(region);

        let stack = self.stack.as_ref().unwrap();
        let cmd = self.command.as_ref().expect("a trigger always sets a command");
        let controller = match stack.lqr.controller(cmd.from, cmd.action) {
            Some(c) => c,
            None => {
                // The planner can command a region with no controller from
                // here (a non-adjacent pick); hold position instead.
                self.counters.controller_fallbacks += 1;
                stack
                    .lqr
                    .controller(region, region)
                    .expect("self controllers always exist")
            }
        };
        let step = cmd.step;
        let u = self.clamp_control(controller.control_at(&self.filtered, step));
        if let Some(cmd) = self.command.as_mut() {
            cmd.step += 1;
        }
        self.last_control = u.clone();
        u
    }

    fn run_planner(&mut self, region: usize, kind: Trigger) {
        // Close out the previous command with its observed outcome before
        // deciding anew.
        let finished = self.command.take();
        let stack = self.stack.as_mut().unwrap();
        if let Some(cmd) = finished {
            if stack.mdp.update_dirichlet(cmd.from, cmd.action, region) {
                self.counters.dirichlet_unlocks += 1;
            }
        }

        let stack = self.stack.as_ref().unwrap();
        let dist = policy_distribution(
            &stack.mdp,
            region,
            &|i, j| stack.lqr.pair_cost(i, j),
            &self.cfg.planner,
            &mut self.rng,
        );
        let best = dist.best();
        let action = best.actions[0];
        self.counters.planner_calls += 1;
        match kind {
            Trigger::ModeChange => self.counters.mode_change_triggers += 1,
            Trigger::Dwell => self.counters.dwell_triggers += 1,
        }
        self.decisions.push(DecisionRecord {
            step: self.total_steps,
            trigger: kind,
            region,
            command: action,
            utility: best.breakdown.utility,
            info_gain: best.breakdown.param_info_gain,
            entropy: best.breakdown.state_entropy,
            total_g: best.breakdown.total_g,
            log_prior: best.log_prior,
            log_posterior: best.log_posterior,
        });
        self.command = Some(ActiveCommand {
            from: region,
            action,
            step: 0,
        });
        self.dwell = 0;
    }

    /// Folds in the outcome of one environment step: extends the history,
    /// advances the filter, credits reward to the landed region, finalizes
    /// the episode on termination, and refits on schedule.
    pub fn record_step(
        &mut self,
        control: &DVector<f64>,
        next_obs: &DVector<f64>,
        reward: f64,
        terminated: bool,
    ) -> Result<()> {
        self.ctrl_buf.push(control.clone());
        self.obs_buf.push(next_obs.clone());
        self.total_steps += 1;

        if let Some(stack) = &self.stack {
            let mode = stack.params.most_likely_mode(&self.filtered, control);
            self.filtered = filter_update(
                &stack.params.modes[mode],
                &stack.params.emission_cov,
                &self.filtered,
                control,
                next_obs,
            )?;
            let landed = stack.partition.region_of(&self.filtered, control);
            self.region_steps[landed] += 1;
            if reward != 0.0 {
                self.reward_sum[landed] += reward;
                self.refresh_preferences();
            }
        } else {
            self.filtered = next_obs.clone();
        }

        if terminated {
            self.flush_episode();
        }
        if self.total_steps % self.cfg.agent.refit_interval == 0 {
            self.refit()?;
        }
        Ok(())
    }

    fn refresh_preferences(&mut self) {
        let k = self.cfg.model.num_modes;
        let scale = self.cfg.planner.preference_scale;
        let prefs = DVector::from_fn(k, |j, _| {
            scale * self.reward_sum[j] / (self.region_steps[j].max(1) as f64)
        });
        if let Some(stack) = self.stack.as_mut() {
            stack.mdp.set_preferences(prefs);
        }
    }

    fn training_batch(&self) -> Option<TrajectoryBatch> {
        let mut sequences = self.completed.clone();
        if self.obs_buf.len() >= 2 {
            sequences.push(Sequence::new(self.obs_buf.clone(), self.ctrl_buf.clone()));
        }
        if sequences.is_empty() {
            None
        } else {
            Some(TrajectoryBatch::new(sequences))
        }
    }

    /// States visited recently, grouped by the region they land in under the
    /// given partition, for controller cost averaging.
    fn recent_region_states(
        &self,
        partition: &SoftmaxPartition,
        batch: &TrajectoryBatch,
    ) -> BTreeMap<usize, Vec<DVector<f64>>> {
        let window = self.cfg.agent.refit_interval;
        let mut flat: Vec<(&DVector<f64>, &DVector<f64>)> = Vec::new();
        for seq in batch.sequences() {
            for t in 0..seq.transitions() {
                flat.push((&seq.obs()[t + 1], &seq.controls()[t]));
            }
        }
        let start = flat.len().saturating_sub(window);
        let mut by_region: BTreeMap<usize, Vec<DVector<f64>>> = BTreeMap::new();
        for (x, u) in &flat[start..] {
            let region = partition.region_of(x, u);
            by_region.entry(region).or_default().push((*x).clone());
        }
        by_region
    }

    /// Greedy maximum-overlap matching between old mode labels (current gate
    /// argmax) and new posterior labels over the batch transitions.
    fn match_modes(
        old_params: &RsldsParams,
        batch: &TrajectoryBatch,
        new_labels: &[Vec<usize>],
        k: usize,
    ) -> Vec<Option<usize>> {
        let mut overlap = vec![vec![0u64; k]; k];
        for (i, seq) in batch.sequences().iter().enumerate() {
            for t in 0..seq.transitions() {
                let old = old_params.most_likely_mode(&seq.obs()[t], &seq.controls()[t]);
                overlap[old][new_labels[i][t]] += 1;
            }
        }
        let mut mapping = vec![None; k];
        let mut used_new = vec![false; k];
        for _ in 0..k {
            let mut best: Option<(u64, usize, usize)> = None;
            for old in 0..k {
                if mapping[old].is_some() {
                    continue;
                }
                for new in 0..k {
                    if used_new[new] {
                        continue;
                    }
                    let score = overlap[old][new];
                    // Strict inequality keeps the lowest-index pair on ties.
                    if best.map(|(s, _, _)| score > s).unwrap_or(true) {
                        best = Some((score, old, new));
                    }
                }
            }
            let (_, old, new) = best.expect("square matching always completes");
            mapping[old] = Some(new);
            used_new[new] = true;
        }
        mapping
    }

    fn refit(&mut self) -> Result<()> {
        let Some(batch) = self.training_batch() else {
            return Ok(());
        };
        let k = self.cfg.model.num_modes;
        let m = self.cfg.model.state_dim;
        let n = self.cfg.model.control_dim;
        if batch.total_transitions() < (m + n + 2) * k {
            log::warn!("refit skipped: not enough transitions yet");
            return Ok(());
        }
        let prior = MniwPrior::scaled_to(&batch, m, n, &self.cfg.fit);
        // EM is local: a model that has painted itself into a corner (one mode
        // swallowing everything) cannot climb back out. Each refit therefore
        // races a fresh initialization against the warm-started previous
        // parameters and keeps whichever ends with the better objective.
        let fresh = initialize(&batch, k, &self.cfg.fit, &mut self.rng)
            .and_then(|init| fit(init.params, &prior, &batch, &self.cfg.fit));
        let result = match (&self.stack, fresh) {
            (Some(stack), fresh) => {
                let warm = fit(stack.params.clone(), &prior, &batch, &self.cfg.fit);
                match (warm, fresh) {
                    (Ok(w), Ok(f)) => {
                        let score = |r: &FitReport| {
                            r.objective_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
                        };
                        log::info!(
                            "refit race: warm {:.1} vs fresh {:.1}",
                            score(&w),
                            score(&f)
                        );
                        if score(&w) >= score(&f) {
                            Ok(w)
                        } else {
                            Ok(f)
                        }
                    }
                    (Ok(w), Err(e)) => {
                        log::warn!("fresh refit candidate failed: {e}");
                        Ok(w)
                    }
                    (Err(e), f) => {
                        log::warn!("warm refit candidate failed: {e}");
                        f
                    }
                }
            }
            (None, fresh) => fresh,
        };
        match result {
            Ok(report) => {
                self.counters.refits += 1;
                self.install(report.params, report.mode_posts, batch, report.objective_trace)
            }
            Err(e) => {
                // The previous model stays in force; the next interval tries
                // again with more data.
                log::warn!("refit failed, keeping the previous model: {e}");
                self.counters.refit_failures += 1;
                Ok(())
            }
        }
    }

    fn install(
        &mut self,
        params: RsldsParams,
        mode_posts: Vec<crate::rslds::ModePosterior>,
        batch: TrajectoryBatch,
        objective_trace: Vec<f64>,
    ) -> Result<()> {
        let k = self.cfg.model.num_modes;
        let partition = SoftmaxPartition::from_params(
            &params,
            &self.state_lower,
            &self.state_upper,
            &self.control_lower,
            &self.control_upper,
        );
        let adjacency = partition.build_adjacency(&self.cfg.partition)?;
        let priors = find_all_targets(&partition, &self.cfg.priors);
        let region_states = self.recent_region_states(&partition, &batch);
        let lqr = build_lqr_cache(
            &params,
            &priors,
            &adjacency,
            &region_states,
            &self.cfg.lqr,
            &self.cfg.priors,
            self.cfg.agent.fallback_sample_spread,
            &mut self.rng,
        )?;

        let new_labels: Vec<Vec<usize>> = mode_posts
            .iter()
            .map(|p| {
                p.probs
                    .iter()
                    .map(|q| {
                        let mut best = 0;
                        for j in 1..q.len() {
                            if q[j] > q[best] {
                                best = j;
                            }
                        }
                        best
                    })
                    .collect()
            })
            .collect();

        let (mdp, mapping) = match &self.stack {
            Some(old) => {
                let mapping = Self::match_modes(&old.params, &batch, &new_labels, k);
                let mdp = DiscreteMdp::lift_with_transfer(
                    &adjacency,
                    &self.cfg.planner,
                    &old.mdp,
                    &mapping,
                );
                // Reward bookkeeping follows the same relabeling.
                let mut reward = vec![0.0; k];
                let mut steps = vec![0u64; k];
                for old_r in 0..k {
                    if let Some(new_r) = mapping[old_r] {
                        reward[new_r] += self.reward_sum[old_r];
                        steps[new_r] += self.region_steps[old_r];
                    }
                }
                self.reward_sum = reward;
                self.region_steps = steps;
                (mdp, mapping)
            }
            None => (
                DiscreteMdp::lift(&adjacency, &self.cfg.planner),
                (0..k).map(Some).collect(),
            ),
        };

        self.stack = Some(ModelStack {
            params,
            partition,
            adjacency,
            priors,
            lqr,
            mdp,
        });
        self.refresh_preferences();

        // The filter restarts from the newest observation, and the next
        // decision is an activation under the new region labels.
        if let Some(last) = self.obs_buf.last() {
            self.filtered = last.clone();
        }
        self.prev_region = None;
        self.command = None;
        self.dwell = 0;

        let stack = self.stack.as_ref().unwrap();
        self.refit_snapshots.push(RefitSnapshot {
            version: SNAPSHOT_VERSION,
            step: self.total_steps,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            num_modes: k,
            params: ParamsDto::from_params(&stack.params),
            dirichlet: DirichletDto::from_mdp(&stack.mdp),
            preferences: stack.mdp.preference().iter().copied().collect(),
            mode_mapping: mapping,
            objective_trace,
        });
        Ok(())
    }
}
