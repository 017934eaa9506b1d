//! Recurrent switching linear dynamical system.
//!
//! The latent continuous state `x` evolves under one of `K` linear modes:
//!
//! ```text
//! x' = A_k x + B_k u + b_k + noise,    noise ~ N(0, Q_k)
//! y  = x + v,                          v ~ N(0, S)
//! ```
//!
//! The active mode is chosen by a softmax gate over the current state and
//! control (`recurrent-only` switching: the previous mode does not enter):
//!
//! ```text
//! p(mode = k | x, u) = softmax_k(W_x x + W_u u + r)
//! ```
//!
//! Learning is variational EM with a Gaussian (Laplace) posterior over the
//! state path and an independent categorical posterior per transition; see
//! [`inference`] and [`learning`]. [`init`] builds a first model by
//! clustering transitions, and [`synthetic`] provides ground-truth systems
//! for recovery tests.

pub mod inference;
pub mod init;
pub mod learning;
pub mod synthetic;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{log_softmax, softmax};

/// One linear mode of the switching system.
#[derive(Debug, Clone)]
pub struct ModeDynamics {
    /// State transition matrix `A` (M x M).
    pub transition: DMatrix<f64>,
    /// Control matrix `B` (M x N).
    pub control: DMatrix<f64>,
    /// Drift vector `b` (M).
    pub offset: DVector<f64>,
    /// Process noise covariance `Q` (M x M, positive definite).
    pub noise_cov: DMatrix<f64>,
}

impl ModeDynamics {
    pub fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.control.ncols()
    }

    /// Noise-free successor state `A x + B u + b`.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.transition * x + &self.control * u + &self.offset
    }
}

/// Softmax gating parameters.
#[derive(Debug, Clone)]
pub struct Recurrence {
    /// Per-mode weights on the state (K x M).
    pub state_weights: DMatrix<f64>,
    /// Per-mode weights on the control (K x N).
    pub control_weights: DMatrix<f64>,
    /// Per-mode bias (K).
    pub bias: DVector<f64>,
}

impl Recurrence {
    pub fn logits(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.state_weights * x + &self.control_weights * u + &self.bias
    }
}

/// Full parameter set of the switching model.
#[derive(Debug, Clone)]
pub struct RsldsParams {
    pub modes: Vec<ModeDynamics>,
    pub recurrence: Recurrence,
    /// Shared emission noise covariance `S` (M x M, positive definite).
    pub emission_cov: DMatrix<f64>,
}

impl RsldsParams {
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn state_dim(&self) -> usize {
        self.emission_cov.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.recurrence.control_weights.ncols()
    }

    /// Gate probabilities `p(mode | x, u)`.
    pub fn transition_probs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        softmax(&self.recurrence.logits(x, u))
    }

    pub fn transition_log_probs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        log_softmax(&self.recurrence.logits(x, u))
    }

    /// Most likely mode at a state-control point; ties resolve to the lowest
    /// index.
    pub fn most_likely_mode(&self, x: &DVector<f64>, u: &DVector<f64>) -> usize {
        let logits = self.recurrence.logits(x, u);
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        best
    }

    /// Checks internal shape consistency and positive definiteness of every
    /// covariance.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_modes();
        let m = self.state_dim();
        let n = self.control_dim();
        if k == 0 {
            return Err(Error::fit("params validation", "no modes"));
        }
        for (i, mode) in self.modes.iter().enumerate() {
            if mode.transition.shape() != (m, m)
                || mode.control.shape() != (m, n)
                || mode.offset.len() != m
                || mode.noise_cov.shape() != (m, m)
            {
                return Err(Error::fit("params validation", format!("mode {i} shape mismatch")));
            }
            if nalgebra::Cholesky::new(mode.noise_cov.clone()).is_none() {
                return Err(Error::fit(
                    "params validation",
                    format!("mode {i} noise covariance not positive definite"),
                ));
            }
            if mode.transition.iter().any(|v| !v.is_finite())
                || mode.control.iter().any(|v| !v.is_finite())
                || mode.offset.iter().any(|v| !v.is_finite())
            {
                return Err(Error::fit("params validation", format!("mode {i} has non-finite entries")));
            }
        }
        if self.recurrence.state_weights.shape() != (k, m)
            || self.recurrence.control_weights.shape() != (k, n)
            || self.recurrence.bias.len() != k
        {
            return Err(Error::fit("params validation", "recurrence shape mismatch"));
        }
        if nalgebra::Cholesky::new(self.emission_cov.clone()).is_none() {
            return Err(Error::fit(
                "params validation",
                "emission covariance not positive definite",
            ));
        }
        Ok(())
    }
}

/// Draws from `N(mean, cov)` given a positive definite covariance.
pub fn sample_gaussian<R: Rng>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let chol = nalgebra::Cholesky::new(cov.clone()).expect("covariance is positive definite");
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + chol.l() * z
}

/// One generative step: advances the state under mode `z` with control `u`,
/// emits a noisy observation, and samples the next mode from the gate
/// evaluated at the new state (the control argument is the one just applied,
/// standing in for the not-yet-chosen next control).
pub fn sample_step<R: Rng>(
    params: &RsldsParams,
    z: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    rng: &mut R,
) -> (usize, DVector<f64>, DVector<f64>) {
    assert!(z < params.num_modes(), "mode index out of range");
    let mode = &params.modes[z];
    let x_next = sample_gaussian(&mode.predict(x, u), &mode.noise_cov, rng);
    let y_next = sample_gaussian(&x_next, &params.emission_cov, rng);
    let probs = params.transition_probs(&x_next, u);
    let draw: f64 = rng.random();
    let mut cum = 0.0;
    let mut z_next = params.num_modes() - 1;
    for k in 0..params.num_modes() {
        cum += probs[k];
        if draw < cum {
            z_next = k;
            break;
        }
    }
    (z_next, x_next, y_next)
}

/// Simulated trajectory with ground truth latents, for tests and recovery
/// experiments.
#[derive(Debug, Clone)]
pub struct SimulatedTrajectory {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    /// `modes[t]` drove the transition from step t to t+1.
    pub modes: Vec<usize>,
}

/// Rolls the generative model forward under a fixed control sequence. The
/// mode driving each transition is drawn from the gate at the transition's
/// source state and applied control.
pub fn simulate<R: Rng>(
    params: &RsldsParams,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
    rng: &mut R,
) -> SimulatedTrajectory {
    let mut states = vec![x0.clone()];
    let mut observations = vec![sample_gaussian(x0, &params.emission_cov, rng)];
    let mut modes = Vec::with_capacity(controls.len());
    for u in controls {
        let x = states.last().unwrap().clone();
        let probs = params.transition_probs(&x, u);
        let draw: f64 = rng.random();
        let mut cum = 0.0;
        let mut z = params.num_modes() - 1;
        for k in 0..params.num_modes() {
            cum += probs[k];
            if draw < cum {
                z = k;
                break;
            }
        }
        let mode = &params.modes[z];
        let x_next = sample_gaussian(&mode.predict(&x, u), &mode.noise_cov, rng);
        observations.push(sample_gaussian(&x_next, &params.emission_cov, rng));
        states.push(x_next);
        modes.push(z);
    }
    SimulatedTrajectory {
        states,
        observations,
        modes,
    }
}

/// One observed trajectory: `obs.len() == controls.len() + 1`, with
/// `controls[t]` applied between `obs[t]` and `obs[t + 1]`.
#[derive(Debug, Clone)]
pub struct Sequence {
    obs: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
}

impl Sequence {
    pub fn new(obs: Vec<DVector<f64>>, controls: Vec<DVector<f64>>) -> Self {
        assert!(obs.len() >= 2, "a sequence needs at least two observations");
        assert_eq!(
            controls.len() + 1,
            obs.len(),
            "need exactly one control per transition"
        );
        let m = obs[0].len();
        let n = controls[0].len();
        assert!(obs.iter().all(|y| y.len() == m), "inconsistent observation dims");
        assert!(controls.iter().all(|u| u.len() == n), "inconsistent control dims");
        Sequence { obs, controls }
    }

    pub fn obs(&self) -> &[DVector<f64>] {
        &self.obs
    }

    pub fn controls(&self) -> &[DVector<f64>] {
        &self.controls
    }

    /// Number of observations.
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of transitions (one less than observations).
    pub fn transitions(&self) -> usize {
        self.obs.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.obs[0].len()
    }

    pub fn control_dim(&self) -> usize {
        self.controls[0].len()
    }
}

/// A collection of sequences sharing dimensions.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    sequences: Vec<Sequence>,
}

impl TrajectoryBatch {
    pub fn new(sequences: Vec<Sequence>) -> Self {
        assert!(!sequences.is_empty(), "batch must hold at least one sequence");
        let m = sequences[0].state_dim();
        let n = sequences[0].control_dim();
        assert!(
            sequences.iter().all(|s| s.state_dim() == m && s.control_dim() == n),
            "sequences disagree on dimensions"
        );
        TrajectoryBatch { sequences }
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn state_dim(&self) -> usize {
        self.sequences[0].state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.sequences[0].control_dim()
    }

    pub fn total_transitions(&self) -> usize {
        self.sequences.iter().map(Sequence::transitions).sum()
    }
}

/// Gaussian posterior over one sequence's state path: marginal means and
/// covariances plus the covariance between adjacent steps.
#[derive(Debug, Clone)]
pub struct StatePosterior {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `cross[t] = cov(x_t, x_{t+1})`.
    pub cross: Vec<DMatrix<f64>>,
    /// Log determinant of the posterior precision (for entropy bookkeeping).
    pub log_det_precision: f64,
    /// Value of the smoothing objective at the returned means.
    pub objective: f64,
    /// Whether the optimizer hit its gradient tolerance (as opposed to the
    /// iteration cap).
    pub converged: bool,
}

/// Categorical posterior over one sequence's transition modes.
#[derive(Debug, Clone)]
pub struct ModePosterior {
    /// `probs[t][k] = q(mode_t = k)`, one row per transition.
    pub probs: Vec<DVector<f64>>,
    /// Joint marginals over adjacent transitions (independent here, kept for
    /// chain-shaped consumers).
    pub pairs: Vec<DMatrix<f64>>,
}
