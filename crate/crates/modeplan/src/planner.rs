//! Discrete decision layer over the region graph. Transition beliefs are
//! independent Dirichlet rows per (region, command), seeded from the
//! adjacency structure: the commanded neighbor gets the bulk of the mass,
//! other neighbors a slip share, and non-neighbors a near-zero locked count
//! that observation can override. Policies are ranked by a Monte Carlo
//! estimate of expected free energy (preference utility, parameter
//! information gain, predicted-state surprisal) plus a prior that charges
//! each policy the cached maneuver costs along its nominal region chain.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::digamma;

use crate::config::PlannerConfig;
use crate::linalg::log_softmax;
use crate::par::par_map_slice;
use crate::partition::AdjacencyMatrix;

/// Dense rank-3 array indexed as `[next, current, command]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    k: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(k: usize, fill: f64) -> Tensor3 {
        Tensor3 {
            k,
            data: vec![fill; k * k * k],
        }
    }

    fn idx(&self, next: usize, cur: usize, act: usize) -> usize {
        debug_assert!(next < self.k && cur < self.k && act < self.k);
        (act * self.k + cur) * self.k + next
    }

    pub fn get(&self, next: usize, cur: usize, act: usize) -> f64 {
        self.data[self.idx(next, cur, act)]
    }

    pub fn set(&mut self, next: usize, cur: usize, act: usize, value: f64) {
        let i = self.idx(next, cur, act);
        self.data[i] = value;
    }

    pub fn side(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Expected information gain of one more observation from a Dirichlet row:
/// the predictive-weighted KL divergence between the posterior after seeing
/// each outcome and the current belief.
pub fn dirichlet_expected_info_gain(alpha: &DVector<f64>) -> f64 {
    let total: f64 = alpha.sum();
    assert!(total > 0.0, "concentrations must be positive");
    let mut gain = 0.0;
    for j in 0..alpha.len() {
        let a = alpha[j];
        if a <= 0.0 {
            continue;
        }
        gain += (a / total) * ((total / a).ln() + digamma(a + 1.0) - digamma(total + 1.0));
    }
    gain
}

/// Dirichlet transition beliefs and reward preferences over the region graph.
#[derive(Debug, Clone)]
pub struct DiscreteMdp {
    alpha: Tensor3,
    adjacency: AdjacencyMatrix,
    preferences: DVector<f64>,
    locked_level: f64,
}

impl DiscreteMdp {
    /// Seeds beliefs from the adjacency structure: commanding an adjacent
    /// region concentrates mass there, every other neighbor keeps a slip
    /// share, and structurally forbidden successors get the locked count.
    pub fn lift(adjacency: &AdjacencyMatrix, cfg: &PlannerConfig) -> DiscreteMdp {
        let k = adjacency.num_regions();
        let mut alpha = Tensor3::new(k, cfg.alpha_locked);
        for cur in 0..k {
            for act in 0..k {
                for next in 0..k {
                    if next == act && adjacency.get(cur, act) {
                        alpha.set(next, cur, act, cfg.alpha_valid);
                    } else if adjacency.get(cur, next) {
                        alpha.set(next, cur, act, cfg.alpha_slip);
                    }
                }
            }
        }
        DiscreteMdp {
            alpha,
            adjacency: adjacency.clone(),
            preferences: DVector::zeros(k),
            locked_level: cfg.alpha_locked,
        }
    }

    /// Fresh lift onto a new region graph that keeps the observation excess
    /// (counts above the seed values) of every belief whose three regions
    /// survive the relabeling. `old_to_new[r]` is the new label of old
    /// region `r`, or None when it disappeared.
    pub fn lift_with_transfer(
        adjacency: &AdjacencyMatrix,
        cfg: &PlannerConfig,
        old: &DiscreteMdp,
        old_to_new: &[Option<usize>],
    ) -> DiscreteMdp {
        let old_k = old.num_states();
        assert_eq!(old_to_new.len(), old_k);
        let mut fresh = DiscreteMdp::lift(adjacency, cfg);
        let old_seed = DiscreteMdp::lift(&old.adjacency, cfg);
        for act in 0..old_k {
            for cur in 0..old_k {
                for next in 0..old_k {
                    let excess = old.alpha.get(next, cur, act) - old_seed.alpha.get(next, cur, act);
                    if excess <= 0.0 {
                        continue;
                    }
                    if let (Some(n2), Some(c2), Some(a2)) =
                        (old_to_new[next], old_to_new[cur], old_to_new[act])
                    {
                        let base = fresh.alpha.get(n2, c2, a2);
                        fresh.alpha.set(n2, c2, a2, base + excess);
                    }
                }
            }
        }
        fresh
    }

    pub fn num_states(&self) -> usize {
        self.alpha.side()
    }

    pub fn adjacency(&self) -> &AdjacencyMatrix {
        &self.adjacency
    }

    pub fn alpha(&self) -> &Tensor3 {
        &self.alpha
    }

    fn alpha_column(&self, cur: usize, act: usize) -> DVector<f64> {
        DVector::from_fn(self.num_states(), |next, _| self.alpha.get(next, cur, act))
    }

    /// Posterior predictive distribution over successors.
    pub fn predictive(&self, cur: usize, act: usize) -> DVector<f64> {
        let col = self.alpha_column(cur, act);
        let total = col.sum();
        col / total
    }

    /// Expected KL gain on the (cur, act) belief from one more observation.
    pub fn expected_info_gain(&self, cur: usize, act: usize) -> f64 {
        dirichlet_expected_info_gain(&self.alpha_column(cur, act))
    }

    pub fn preference(&self) -> &DVector<f64> {
        &self.preferences
    }

    pub fn set_preferences(&mut self, preferences: DVector<f64>) {
        assert_eq!(preferences.len(), self.num_states());
        self.preferences = preferences;
    }

    /// Records an observed region transition. A locked belief entry is
    /// replaced by a unit count instead of incremented, since observation
    /// overrules the structural prior; returns true when that happened.
    pub fn update_dirichlet(&mut self, cur: usize, act: usize, next: usize) -> bool {
        let current = self.alpha.get(next, cur, act);
        if current <= self.locked_level + 1e-12 {
            log::debug!(
                "observed a structurally forbidden move {cur} -> {next} under command {act}; unlocking"
            );
            self.alpha.set(next, cur, act, 1.0);
            true
        } else {
            self.alpha.set(next, cur, act, current + 1.0);
            false
        }
    }
}

/// Per-policy expected free energy estimate. The component fields hold the
/// unweighted per-rollout means; `total_g` applies the configured weights,
/// and lower is better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfeBreakdown {
    pub utility: f64,
    pub param_info_gain: f64,
    pub state_entropy: f64,
    pub total_g: f64,
}

fn sample_categorical<R: Rng>(probs: &DVector<f64>, rng: &mut R) -> usize {
    let mut draw = rng.random::<f64>();
    for i in 0..probs.len() {
        draw -= probs[i];
        if draw <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Monte Carlo expected free energy of an action sequence from `start`.
/// Each rollout samples a region chain from the predictive model and
/// accumulates landed-state preference, per-step expected information gain,
/// and landed-state surprisal (whose mean is the predictive entropy).
pub fn evaluate_policy<R: Rng>(
    mdp: &DiscreteMdp,
    start: usize,
    policy: &[usize],
    cfg: &PlannerConfig,
    rng: &mut R,
) -> EfeBreakdown {
    assert!(!policy.is_empty(), "policy must contain at least one action");
    let samples = cfg.rollout_samples.max(1);
    let mut utility = 0.0;
    let mut info_gain = 0.0;
    let mut entropy = 0.0;
    for _ in 0..samples {
        let mut s = start;
        for &a in policy {
            let p = mdp.predictive(s, a);
            info_gain += mdp.expected_info_gain(s, a);
            let next = sample_categorical(&p, rng);
            utility += mdp.preference()[next];
            entropy += -p[next].ln();
            s = next;
        }
    }
    let norm = samples as f64;
    let utility = utility / norm;
    let info_gain = info_gain / norm;
    let entropy = entropy / norm;
    EfeBreakdown {
        utility,
        param_info_gain: info_gain,
        state_entropy: entropy,
        total_g: -(utility + cfg.info_gain_weight * info_gain + cfg.entropy_weight * entropy),
    }
}

/// Log prior over policies from cached maneuver costs: each step charges the
/// cost of the commanded move from the nominal chain state, falling back to
/// the stay-in-place cost when the move has no controller. The chain only
/// advances on moves that have one.
pub fn log_policy_prior(
    policy: &[usize],
    start: usize,
    pair_cost: &dyn Fn(usize, usize) -> Option<f64>,
    cost_scale: f64,
) -> f64 {
    let mut s = start;
    let mut total = 0.0;
    for &a in policy {
        match pair_cost(s, a) {
            Some(c) => {
                total += c;
                s = a;
            }
            None => total += pair_cost(s, s).unwrap_or(0.0),
        }
    }
    -cost_scale * total
}

/// One candidate policy with its scores; `log_posterior` is normalized over
/// the candidate set.
#[derive(Debug, Clone)]
pub struct ScoredPolicy {
    pub actions: Vec<usize>,
    pub breakdown: EfeBreakdown,
    pub log_prior: f64,
    pub log_posterior: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyDistribution {
    pub policies: Vec<ScoredPolicy>,
}

impl PolicyDistribution {
    /// Highest-posterior policy; ties keep the earliest, which under
    /// enumeration is the lexicographically smallest.
    pub fn best(&self) -> &ScoredPolicy {
        let mut best = 0;
        for i in 1..self.policies.len() {
            if self.policies[i].log_posterior > self.policies[best].log_posterior {
                best = i;
            }
        }
        &self.policies[best]
    }

    pub fn selected_action(&self) -> usize {
        self.best().actions[0]
    }
}

fn candidate_policies<R: Rng>(
    k: usize,
    cfg: &PlannerConfig,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let h = cfg.horizon;
    assert!(h >= 1 && k >= 1);
    let total = k.checked_pow(h as u32);
    match total {
        Some(n) if n <= cfg.enumeration_cap => (0..n)
            .map(|p| {
                (0..h)
                    .map(|t| (p / k.pow((h - 1 - t) as u32)) % k)
                    .collect()
            })
            .collect(),
        _ => (0..cfg.enumeration_cap)
            .map(|_| (0..h).map(|_| rng.random_range(0..k)).collect())
            .collect(),
    }
}

/// Scores the candidate policy set from `start` and normalizes a softmax
/// posterior over negative free energy plus the maneuver-cost prior.
/// Each policy is evaluated on its own seeded generator, so the result is
/// reproducible and independent of evaluation order.
pub fn policy_distribution<R: Rng>(
    mdp: &DiscreteMdp,
    start: usize,
    pair_cost: &(dyn Fn(usize, usize) -> Option<f64> + Sync),
    cfg: &PlannerConfig,
    rng: &mut R,
) -> PolicyDistribution {
    let actions = candidate_policies(mdp.num_states(), cfg, rng);
    let seeds: Vec<u64> = actions.iter().map(|_| rng.random()).collect();
    let jobs: Vec<(Vec<usize>, u64)> = actions.into_iter().zip(seeds).collect();
    let scored = par_map_slice(&jobs, |(policy, seed)| {
        let mut child = ChaCha8Rng::seed_from_u64(*seed);
        let breakdown = evaluate_policy(mdp, start, policy, cfg, &mut child);
        let log_prior = log_policy_prior(policy, start, pair_cost, cfg.controller_cost_scale);
        (breakdown, log_prior)
    });
    let logits = DVector::from_iterator(
        jobs.len(),
        scored.iter().map(|(b, lp)| -b.total_g + lp),
    );
    let log_posterior = log_softmax(&logits);
    let policies = jobs
        .into_iter()
        .zip(scored)
        .enumerate()
        .map(|(i, ((actions, _), (breakdown, log_prior)))| ScoredPolicy {
            actions,
            breakdown,
            log_prior,
            log_posterior: log_posterior[i],
        })
        .collect();
    PolicyDistribution { policies }
}
