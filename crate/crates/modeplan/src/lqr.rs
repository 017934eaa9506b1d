//! Finite-horizon tracking controllers for region-to-region maneuvers. Each
//! controller steers one mode's linear dynamics toward a destination region's
//! target point under a quadratic effort penalty, with the target deviation
//! charged only at the end of the horizon. The tracking error and the
//! constant drift toward the target are folded into one augmented state, so
//! the backward pass is a plain Riccati difference recursion.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{LqrConfig, PriorConfig};
use crate::error::Result;
use crate::linalg::{cholesky, symmetrize};
use crate::par::par_map_slice;
use crate::partition::AdjacencyMatrix;
use crate::priors::ControlPrior;
use crate::rslds::{ModeDynamics, RsldsParams};

/// Time-varying affine feedback law on the tracking error, plus the quadratic
/// cost-to-go from the start of the horizon.
#[derive(Debug, Clone)]
pub struct LqrController {
    /// One `control_dim x (state_dim + 1)` gain per step, acting on the
    /// augmented error `[x - target; 1]`.
    gains: Vec<DMatrix<f64>>,
    /// Cost-to-go matrix at time zero on the augmented error.
    initial_value: DMatrix<f64>,
    pub target_state: DVector<f64>,
    pub target_control: DVector<f64>,
}

impl LqrController {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    /// Feedback gains, one `control_dim x (state_dim + 1)` block per step.
    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    /// Quadratic cost-to-go matrix at time zero on the augmented error.
    pub fn initial_value(&self) -> &DMatrix<f64> {
        &self.initial_value
    }

    fn augmented_error(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.target_state.len();
        let mut z = DVector::zeros(m + 1);
        z.rows_mut(0, m).copy_from(&(x - &self.target_state));
        z[m] = 1.0;
        z
    }

    /// Unclamped control for step `t` of the maneuver; past the horizon the
    /// final gain keeps regulating.
    pub fn control_at(&self, x: &DVector<f64>, t: usize) -> DVector<f64> {
        let idx = t.min(self.gains.len() - 1);
        &self.target_control + &self.gains[idx] * self.augmented_error(x)
    }

    /// Optimal maneuver cost from a start state.
    pub fn cost_from(&self, x: &DVector<f64>) -> f64 {
        let z = self.augmented_error(x);
        (z.dot(&(&self.initial_value * &z))).max(0.0)
    }
}

/// Backward Riccati pass with an explicit running state cost. The maneuver
/// cache uses the terminal-only variant below; the running cost is exposed so
/// long horizons can be compared against the stationary solution.
pub fn solve_tracking_full(
    dynamics: &ModeDynamics,
    target_state: &DVector<f64>,
    target_control: &DVector<f64>,
    horizon: usize,
    control_weight: f64,
    running_state_cost: &DMatrix<f64>,
    terminal_weight: f64,
) -> Result<LqrController> {
    assert!(horizon >= 1, "horizon must be positive");
    let m = dynamics.state_dim();
    let n = dynamics.control_dim();
    assert_eq!(target_state.len(), m);
    assert_eq!(target_control.len(), n);
    assert!(control_weight > 0.0, "effort penalty must be positive");

    // Error dynamics e' = A e + B w + drift, with w the control deviation.
    let drift = &dynamics.transition * target_state
        + &dynamics.control * target_control
        + &dynamics.offset
        - target_state;
    let mut a_aug = DMatrix::zeros(m + 1, m + 1);
    a_aug.view_mut((0, 0), (m, m)).copy_from(&dynamics.transition);
    a_aug.view_mut((0, m), (m, 1)).copy_from(&drift);
    a_aug[(m, m)] = 1.0;
    let mut b_aug = DMatrix::zeros(m + 1, n);
    b_aug.view_mut((0, 0), (m, n)).copy_from(&dynamics.control);

    let mut q_run = DMatrix::zeros(m + 1, m + 1);
    q_run
        .view_mut((0, 0), (m, m))
        .copy_from(running_state_cost);
    let mut s = DMatrix::zeros(m + 1, m + 1);
    s.view_mut((0, 0), (m, m))
        .copy_from(&(DMatrix::identity(m, m) * terminal_weight));

    let effort = DMatrix::identity(n, n) * control_weight;
    let mut gains = vec![DMatrix::zeros(n, m + 1); horizon];
    for t in (0..horizon).rev() {
        let g = &effort + b_aug.transpose() * &s * &b_aug;
        let coupling = b_aug.transpose() * &s * &a_aug;
        let chol = cholesky(&symmetrize(&g))?;
        gains[t] = -chol.solve(&coupling);
        s = symmetrize(
            &(&q_run + a_aug.transpose() * &s * &a_aug
                - coupling.transpose() * chol.solve(&coupling)),
        );
    }
    Ok(LqrController {
        gains,
        initial_value: s,
        target_state: target_state.clone(),
        target_control: target_control.clone(),
    })
}

/// Tracking controller with effort and terminal penalties only.
pub fn solve_tracking(
    dynamics: &ModeDynamics,
    target_state: &DVector<f64>,
    target_control: &DVector<f64>,
    horizon: usize,
    control_weight: f64,
    terminal_weight: f64,
) -> Result<LqrController> {
    let m = dynamics.state_dim();
    solve_tracking_full(
        dynamics,
        target_state,
        target_control,
        horizon,
        control_weight,
        &DMatrix::zeros(m, m),
        terminal_weight,
    )
}

/// All maneuver controllers for the current region graph, keyed by
/// (source region, destination region), plus a representative maneuver cost
/// per pair for the discrete layer's policy prior.
#[derive(Debug, Clone)]
pub struct LqrCache {
    controllers: BTreeMap<(usize, usize), LqrController>,
    pair_costs: BTreeMap<(usize, usize), f64>,
}

impl LqrCache {
    pub fn controller(&self, from: usize, to: usize) -> Option<&LqrController> {
        self.controllers.get(&(from, to))
    }

    pub fn pair_cost(&self, from: usize, to: usize) -> Option<f64> {
        self.pair_costs.get(&(from, to)).copied()
    }

    pub fn len(&self) -> usize {
        self.controllers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controllers.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.controllers.keys()
    }
}

/// Builds controllers for every adjacent ordered pair and every self pair.
/// The maneuver from `i` to `j` uses mode `i`'s dynamics (the dynamics in
/// force where the maneuver starts) and targets region `j`'s prior point.
/// Pair costs average the cost-to-go over recently visited states of the
/// source region; regions with no visits fall back to jittered samples
/// around their own target.
pub fn build_lqr_cache<R: Rng>(
    params: &RsldsParams,
    priors: &[ControlPrior],
    adjacency: &AdjacencyMatrix,
    region_states: &BTreeMap<usize, Vec<DVector<f64>>>,
    cfg: &LqrConfig,
    prior_cfg: &PriorConfig,
    fallback_spread: f64,
    rng: &mut R,
) -> Result<LqrCache> {
    let k = params.num_modes();
    assert_eq!(priors.len(), k);
    assert_eq!(adjacency.num_regions(), k);
    let m = params.state_dim();
    let terminal = cfg.terminal_weight(prior_cfg);

    // Representative start states per region, chosen before the parallel
    // stage so the random fallback draws stay in a fixed order.
    let mut reps: Vec<Vec<DVector<f64>>> = Vec::with_capacity(k);
    for region in 0..k {
        let visited = region_states.get(&region).map(Vec::as_slice).unwrap_or(&[]);
        if visited.is_empty() {
            let target = &priors[region].target_state;
            reps.push(
                (0..cfg.cost_samples)
                    .map(|_| {
                        target
                            + DVector::from_fn(m, |_, _| {
                                rng.sample::<f64, _>(StandardNormal) * fallback_spread
                            })
                    })
                    .collect(),
            );
        } else {
            let take = visited.len().min(cfg.cost_samples);
            reps.push(visited[visited.len() - take..].to_vec());
        }
    }

    let mut keys = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if i == j || adjacency.get(i, j) {
                keys.push((i, j));
            }
        }
    }
    let solved = par_map_slice(&keys, |&(i, j)| {
        solve_tracking(
            &params.modes[i],
            &priors[j].target_state,
            &priors[j].target_control,
            cfg.horizon,
            cfg.control_weight,
            terminal,
        )
    });

    let mut controllers = BTreeMap::new();
    let mut pair_costs = BTreeMap::new();
    for (&(i, j), solved) in keys.iter().zip(solved) {
        let controller = solved?;
        let starts = &reps[i];
        let cost = starts.iter().map(|x| controller.cost_from(x)).sum::<f64>()
            / starts.len().max(1) as f64;
        pair_costs.insert((i, j), cost);
        controllers.insert((i, j), controller);
    }
    Ok(LqrCache {
        controllers,
        pair_costs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::dare_fixed_point;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn double_integrator() -> ModeDynamics {
        ModeDynamics {
            transition: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            control: DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
            offset: DVector::zeros(2),
            noise_cov: DMatrix::identity(2, 2) * 1e-6,
        }
    }

    fn rollout_cost(
        dynamics: &ModeDynamics,
        controller: &LqrController,
        start: &DVector<f64>,
        horizon: usize,
        control_weight: f64,
        terminal_weight: f64,
        controls: Option<&[f64]>,
    ) -> f64 {
        let mut x = start.clone();
        let mut cost = 0.0;
        for t in 0..horizon {
            let u = match controls {
                Some(seq) => DVector::from_element(1, seq[t]),
                None => controller.control_at(&x, t),
            };
            let w = &u - &controller.target_control;
            cost += control_weight * w.norm_squared();
            x = &dynamics.transition * &x + &dynamics.control * &u + &dynamics.offset;
        }
        let e = &x - &controller.target_state;
        cost + terminal_weight * e.norm_squared()
    }

    #[test]
    fn closed_loop_cost_matches_predicted_value() {
        // With deterministic dynamics the quadratic value function is exact,
        // so the realized closed-loop cost must equal cost_from.
        let dynamics = double_integrator();
        let target = DVector::from_row_slice(&[1.0, 0.0]);
        let u_star = DVector::from_element(1, 0.0);
        let controller =
            solve_tracking(&dynamics, &target, &u_star, 30, 0.5, 100.0).unwrap();
        for start in [
            DVector::from_row_slice(&[0.0, 0.0]),
            DVector::from_row_slice(&[-1.0, 0.5]),
            DVector::from_row_slice(&[2.0, -0.3]),
        ] {
            let realized =
                rollout_cost(&dynamics, &controller, &start, 30, 0.5, 100.0, None);
            let predicted = controller.cost_from(&start);
            assert!(
                (realized - predicted).abs() < 1e-8 * (1.0 + predicted),
                "realized {realized} vs predicted {predicted}"
            );
        }
    }

    #[test]
    fn feedback_beats_sampled_open_loop_sequences() {
        let dynamics = double_integrator();
        let target = DVector::from_row_slice(&[0.5, 0.0]);
        let u_star = DVector::from_element(1, 0.0);
        let horizon = 20;
        let controller =
            solve_tracking(&dynamics, &target, &u_star, horizon, 1.0, 50.0).unwrap();
        let start = DVector::from_row_slice(&[-0.5, 0.0]);
        let optimal = controller.cost_from(&start);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let seq: Vec<f64> = (0..horizon).map(|_| rng.random_range(-2.0..2.0)).collect();
            let cost = rollout_cost(&dynamics, &controller, &start, horizon, 1.0, 50.0, Some(&seq));
            assert!(cost + 1e-9 >= optimal);
        }
        let zeros = vec![0.0; horizon];
        assert!(
            rollout_cost(&dynamics, &controller, &start, horizon, 1.0, 50.0, Some(&zeros))
                > optimal
        );
    }

    #[test]
    fn one_step_horizon_matches_grid_search() {
        let dynamics = double_integrator();
        let target = DVector::from_row_slice(&[0.3, -0.1]);
        let u_star = DVector::from_element(1, 0.2);
        let controller = solve_tracking(&dynamics, &target, &u_star, 1, 2.0, 40.0).unwrap();
        let start = DVector::from_row_slice(&[-0.4, 0.6]);
        // Coarse-to-fine scalar search over the only control.
        let mut best = f64::INFINITY;
        let mut center = 0.0;
        let mut width = 10.0;
        for _ in 0..40 {
            let mut best_u = center;
            for i in 0..=400 {
                let u = center - width + (2.0 * width) * i as f64 / 400.0;
                let c = rollout_cost(&dynamics, &controller, &start, 1, 2.0, 40.0, Some(&[u]));
                if c < best {
                    best = c;
                    best_u = u;
                }
            }
            center = best_u;
            width *= 0.25;
        }
        assert!((controller.cost_from(&start) - best).abs() < 1e-6);
    }

    #[test]
    fn long_horizon_value_approaches_stationary_solution() {
        // With a running state cost the Riccati difference recursion settles
        // at the fixed point of the algebraic equation.
        let dynamics = double_integrator();
        let target = DVector::zeros(2);
        let u_star = DVector::from_element(1, 0.0);
        let q_run = DMatrix::identity(2, 2);
        let controller = solve_tracking_full(
            &dynamics, &target, &u_star, 400, 1.0, &q_run, 1.0,
        )
        .unwrap();
        let stationary = dare_fixed_point(
            &dynamics.transition,
            &dynamics.control,
            &q_run,
            &DMatrix::identity(1, 1),
        );
        let top = controller.initial_value.view((0, 0), (2, 2)).into_owned();
        assert!((&top - &stationary).abs().max() < 1e-6);
    }

    #[test]
    fn cost_is_zero_at_a_self_consistent_target() {
        // The origin is a fixed point of the double integrator under zero
        // control, so tracking it from itself costs nothing.
        let dynamics = double_integrator();
        let controller = solve_tracking(
            &dynamics,
            &DVector::zeros(2),
            &DVector::zeros(1),
            15,
            1.0,
            100.0,
        )
        .unwrap();
        assert!(controller.cost_from(&DVector::zeros(2)) < 1e-12);
        let u = controller.control_at(&DVector::zeros(2), 0);
        assert!(u.abs().max() < 1e-12);
    }

    #[test]
    fn cache_covers_adjacent_and_self_pairs() {
        use crate::config::PartitionConfig;
        use crate::partition::SoftmaxPartition;
        use crate::priors::find_all_targets;
        use crate::rslds::synthetic::two_mode_system;

        let params = two_mode_system();
        let partition = SoftmaxPartition::from_params(
            &params,
            &DVector::from_element(2, -2.0),
            &DVector::from_element(2, 2.0),
            &DVector::from_element(1, -1.0),
            &DVector::from_element(1, 1.0),
        );
        let adjacency = partition.build_adjacency(&PartitionConfig::default()).unwrap();
        let prior_cfg = PriorConfig::default();
        let priors = find_all_targets(&partition, &prior_cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut region_states = BTreeMap::new();
        region_states.insert(0usize, vec![DVector::from_row_slice(&[-0.5, 0.1])]);
        let cache = build_lqr_cache(
            &params,
            &priors,
            &adjacency,
            &region_states,
            &LqrConfig::default(),
            &prior_cfg,
            0.05,
            &mut rng,
        )
        .unwrap();
        assert!(cache.controller(0, 0).is_some());
        assert!(cache.controller(1, 1).is_some());
        assert!(cache.controller(0, 1).is_some());
        assert!(cache.controller(1, 0).is_some());
        for key in cache.pairs() {
            assert!(cache.pair_cost(key.0, key.1).unwrap().is_finite());
        }
    }
}
