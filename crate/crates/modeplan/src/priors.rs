//! Region targets: for each cell of the partition, a joint state-control
//! point that the gating network assigns to that cell with high confidence.
//! Targets are found by projected gradient ascent on the cell's softmax
//! probability over the box, always keeping the best iterate seen, so the
//! result is never worse than the starting point.

use nalgebra::{DMatrix, DVector};

use crate::config::PriorConfig;
use crate::par::par_map_range;
use crate::partition::SoftmaxPartition;

/// A confident interior point of one region, used as the tracking target for
/// maneuvers into that region.
#[derive(Debug, Clone)]
pub struct ControlPrior {
    pub region: usize,
    pub target_state: DVector<f64>,
    pub target_control: DVector<f64>,
    /// Softmax probability of the region at the target point.
    pub achieved_prob: f64,
    /// True when ascent stopped below the confidence threshold; the region
    /// is then effectively empty or razor thin inside the box.
    pub below_threshold: bool,
}

/// Softmax class probability and its gradient with respect to the input.
pub fn softmax_prob_grad(
    weights: &DMatrix<f64>,
    bias: &DVector<f64>,
    v: &DVector<f64>,
    class: usize,
) -> (f64, DVector<f64>) {
    let probs = crate::linalg::softmax(&(weights * v + bias));
    let mut delta = -probs.clone();
    delta[class] += 1.0;
    let grad = weights.transpose() * delta * probs[class];
    (probs[class], grad)
}

fn clamp_box(v: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..v.len() {
        v[i] = v[i].clamp(lower[i], upper[i]);
    }
}

/// Ascends the probability of `region` over the partition box, starting from
/// the box center. The ascent runs in box-normalized coordinates (each step
/// scaled by the coordinate's squared half-width relative to the widest), so
/// narrow coordinates are not raced to their extremes just because the gate
/// weights on them are numerically large; for a box with equal widths this is
/// the plain gradient step.
pub fn find_region_target(
    partition: &SoftmaxPartition,
    region: usize,
    cfg: &PriorConfig,
) -> ControlPrior {
    let lower = partition.lower();
    let upper = partition.upper();
    let mut v = (lower + upper) * 0.5;
    let (mut best_prob, _) = softmax_prob_grad(partition.weights(), partition.bias(), &v, region);
    let mut best_v = v.clone();
    let half_width = (upper - lower) * 0.5;
    let widest = half_width.max();
    let precond = half_width.map(|w| {
        let r = if widest > 0.0 { w / widest } else { 1.0 };
        r * r
    });

    for _ in 0..cfg.max_iters {
        let (prob, grad) = softmax_prob_grad(partition.weights(), partition.bias(), &v, region);
        if prob > best_prob {
            best_prob = prob;
            best_v = v.clone();
        }
        if best_prob >= cfg.prob_threshold {
            break;
        }
        v += grad.component_mul(&precond) * cfg.step_size;
        clamp_box(&mut v, lower, upper);
    }
    let m = partition.state_dim();
    let n = partition.control_dim();
    ControlPrior {
        region,
        target_state: best_v.rows(0, m).into_owned(),
        target_control: best_v.rows(m, n).into_owned(),
        achieved_prob: best_prob,
        below_threshold: best_prob < cfg.prob_threshold,
    }
}

/// Targets for every region, solved in parallel.
pub fn find_all_targets(partition: &SoftmaxPartition, cfg: &PriorConfig) -> Vec<ControlPrior> {
    par_map_range(partition.num_regions(), |region| {
        find_region_target(partition, region, cfg)
    })
}
