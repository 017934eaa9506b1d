//! Ground-truth recovery harness: simulate a known two-mode system, fit a
//! fresh model to the trajectory, and measure how well the segmentation and
//! the per-mode dynamics were recovered (up to mode relabeling).

use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::error::Result;
use crate::rslds::init::initialize;
use crate::rslds::learning::{fit, MniwPrior};
use crate::rslds::synthetic::{excitation_controls, two_mode_system};
use crate::rslds::{simulate, Sequence, TrajectoryBatch};
use crate::snapshot::ParamsDto;

/// Recovery metrics plus both parameter sets for inspection.
#[derive(Debug, Clone, Serialize)]
pub struct SyntheticReport {
    pub seed: u64,
    pub steps: usize,
    /// Fraction of transitions whose posterior mode matches the simulated
    /// one, under the best relabeling.
    pub segmentation_accuracy: f64,
    /// `truth mode -> fitted mode` relabeling that achieves it.
    pub permutation: Vec<usize>,
    /// Frobenius error of each true mode's transition matrix.
    pub transition_errors: Vec<f64>,
    /// Frobenius error of each true mode's control matrix.
    pub control_errors: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub fit_warnings: Vec<String>,
    pub truth: ParamsDto,
    pub fitted: ParamsDto,
}

fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Simulates `steps` transitions of the two-mode ground truth and fits a
/// two-mode model from scratch (k-means initialization, then EM).
pub fn fit_synthetic(cfg: &Config, seed: u64, steps: usize) -> Result<SyntheticReport> {
    assert!(steps >= 10, "too short a trajectory to fit anything");
    let truth = two_mode_system();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let controls = excitation_controls(steps, &mut rng);
    let traj = simulate(&truth, &DVector::zeros(2), &controls, &mut rng);
    let batch = TrajectoryBatch::new(vec![Sequence::new(traj.observations.clone(), controls)]);

    let init = initialize(&batch, 2, &cfg.fit, &mut rng)?;
    let prior = MniwPrior::scaled_to(&batch, 2, 1, &cfg.fit);
    let report = fit(init.params, &prior, &batch, &cfg.fit)?;

    let labels: Vec<usize> = report.mode_posts[0].probs.iter().map(argmax).collect();
    let mut best_perm = vec![0usize, 1];
    let mut best_acc = -1.0;
    for perm in [[0usize, 1], [1usize, 0]] {
        let hits = traj
            .modes
            .iter()
            .zip(&labels)
            .filter(|(&truth_mode, &fitted)| perm[truth_mode] == fitted)
            .count();
        let acc = hits as f64 / labels.len() as f64;
        if acc > best_acc {
            best_acc = acc;
            best_perm = perm.to_vec();
        }
    }

    let mut transition_errors = Vec::new();
    let mut control_errors = Vec::new();
    for (true_mode, dynamics) in truth.modes.iter().enumerate() {
        let fitted = &report.params.modes[best_perm[true_mode]];
        transition_errors.push((&fitted.transition - &dynamics.transition).norm());
        control_errors.push((&fitted.control - &dynamics.control).norm());
    }

    Ok(SyntheticReport {
        seed,
        steps,
        segmentation_accuracy: best_acc,
        permutation: best_perm,
        transition_errors,
        control_errors,
        objective_trace: report.objective_trace,
        fit_warnings: report.warnings,
        truth: ParamsDto::from_params(&truth),
        fitted: ParamsDto::from_params(&report.params),
    })
}
