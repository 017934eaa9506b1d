//! Model initialization from raw trajectories: transitions are clustered by
//! k-means on standardized `[state; state delta]` features (the control's
//! effect is already inside the delta; clustering on the raw control would
//! split identical dynamics by input sign), each cluster gets a ridge
//! least-squares linear fit, and the gate is fit to the cluster labels.
//! Clusters too small to regress on inherit the largest healthy cluster's
//! dynamics with a small jitter, so the requested mode count is always
//! honored (with a warning).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::FitConfig;
use crate::error::{Error, Result};
use crate::linalg::spd_floor;

use super::learning::{fit_recurrence, pinned_emission};
use super::{ModeDynamics, Recurrence, RsldsParams, TrajectoryBatch};

/// Initialization output: parameters plus the cluster labels per sequence
/// (one label per transition) that produced them.
#[derive(Debug, Clone)]
pub struct InitReport {
    pub params: RsldsParams,
    pub labels: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

struct Flattened {
    features: Vec<DVector<f64>>,
    /// (sequence index, transition index) per feature row.
    origin: Vec<(usize, usize)>,
}

fn transition_features(batch: &TrajectoryBatch) -> Flattened {
    let m = batch.state_dim();
    let mut features = Vec::with_capacity(batch.total_transitions());
    let mut origin = Vec::with_capacity(batch.total_transitions());
    for (i, seq) in batch.sequences().iter().enumerate() {
        for t in 0..seq.transitions() {
            let mut f = DVector::zeros(m + m);
            f.rows_mut(0, m).copy_from(&seq.obs()[t]);
            f.rows_mut(m, m).copy_from(&(&seq.obs()[t + 1] - &seq.obs()[t]));
            features.push(f);
            origin.push((i, t));
        }
    }
    Flattened { features, origin }
}

fn standardize(features: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let dim = features[0].len();
    let count = features.len() as f64;
    let mut mean = DVector::zeros(dim);
    for f in features {
        mean += f;
    }
    mean /= count;
    let mut var = DVector::zeros(dim);
    for f in features {
        let d = f - &mean;
        var += d.component_mul(&d);
    }
    var /= count;
    let std = var.map(|v| v.sqrt().max(1e-9));
    features
        .iter()
        .map(|f| (f - &mean).component_div(&std))
        .collect()
}

fn kmeans<R: Rng>(points: &[DVector<f64>], k: usize, iters: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    assert!(n >= 1 && k >= 1);

    // Seeding: spread initial centroids by squared-distance sampling.
    let mut centroids: Vec<DVector<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| (p - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centroids.push(points[rng.random_range(0..n)].clone());
            continue;
        }
        let mut draw = rng.random::<f64>() * total;
        let mut chosen = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            draw -= w;
            if draw <= 0.0 {
                chosen = i;
                break;
            }
        }
        centroids.push(points[chosen].clone());
    }

    let mut labels = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = (p - centroid).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }

        let dim = points[0].len();
        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            sums[labels[i]] += p;
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Restart an empty cluster at the point farthest from its
                // current centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (&points[a] - &centroids[labels[a]]).norm_squared();
                        let db = (&points[b] - &centroids[labels[b]]).norm_squared();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                changed = true;
            } else {
                centroids[c] = &sums[c] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

#[derive(Clone)]
struct ClusterFit {
    coeffs: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
}

fn ridge_fit(
    batch: &TrajectoryBatch,
    members: &[(usize, usize)],
    cfg: &FitConfig,
) -> ClusterFit {
    let m = batch.state_dim();
    let n = batch.control_dim();
    let d = m + n + 1;
    let mut xtx = DMatrix::identity(d, d) * cfg.init_ridge;
    let mut xty = DMatrix::zeros(d, m);
    for &(i, t) in members {
        let seq = &batch.sequences()[i];
        let mut phi = DVector::zeros(d);
        phi.rows_mut(0, m).copy_from(&seq.obs()[t]);
        phi.rows_mut(m, n).copy_from(&seq.controls()[t]);
        phi[d - 1] = 1.0;
        xtx += &phi * phi.transpose();
        xty += &phi * seq.obs()[t + 1].transpose();
    }
    let coeffs = xtx
        .lu()
        .solve(&xty)
        .expect("ridge-regularized normal equations are invertible")
        .transpose();

    let mut resid = DMatrix::zeros(m, m);
    for &(i, t) in members {
        let seq = &batch.sequences()[i];
        let mut phi = DVector::zeros(d);
        phi.rows_mut(0, m).copy_from(&seq.obs()[t]);
        phi.rows_mut(m, n).copy_from(&seq.controls()[t]);
        phi[d - 1] = 1.0;
        let e = &seq.obs()[t + 1] - &coeffs * phi;
        resid += &e * e.transpose();
    }
    let denom = members.len().max(1) as f64;
    ClusterFit {
        coeffs,
        noise_cov: spd_floor(&(resid / denom), cfg.cov_floor),
    }
}

/// Hard reassignment rounds on top of the k-means labels: refit every
/// cluster's regression, then move each transition to the cluster whose
/// prediction explains it best under a covariance pooled across clusters.
/// The shared metric keeps a tightly overfit cluster's small determinant
/// from vacuuming up everyone else's members. Stops on a fixed point or as
/// soon as a cluster falls below the regression member floor, keeping the
/// last healthy labeling.
fn refine_labels(
    batch: &TrajectoryBatch,
    flat: &Flattened,
    labels: &mut [usize],
    k: usize,
    cfg: &FitConfig,
) {
    let m = batch.state_dim();
    let n = batch.control_dim();
    let d = m + n + 1;
    let min_members = d + 1;
    for _ in 0..cfg.init_refine_rounds {
        let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); k];
        for (row, &(i, t)) in flat.origin.iter().enumerate() {
            members[labels[row]].push((i, t));
        }
        if members.iter().any(|ms| ms.len() < min_members) {
            return;
        }
        let fits: Vec<ClusterFit> = members
            .iter()
            .map(|ms| ridge_fit(batch, ms, cfg))
            .collect();
        let mut pooled = DMatrix::zeros(m, m);
        for (fit, ms) in fits.iter().zip(&members) {
            pooled += &fit.noise_cov * ms.len() as f64;
        }
        pooled /= flat.origin.len() as f64;
        let pooled_inv = spd_floor(&pooled, cfg.cov_floor)
            .cholesky()
            .expect("floored covariance is positive definite")
            .inverse();
        let mut changed = false;
        for (row, &(i, t)) in flat.origin.iter().enumerate() {
            let seq = &batch.sequences()[i];
            let mut phi = DVector::zeros(d);
            phi.rows_mut(0, m).copy_from(&seq.obs()[t]);
            phi.rows_mut(m, n).copy_from(&seq.controls()[t]);
            phi[d - 1] = 1.0;
            let mut best = labels[row];
            let mut best_score = f64::NEG_INFINITY;
            for (c, fit) in fits.iter().enumerate() {
                let e = &seq.obs()[t + 1] - &fit.coeffs * &phi;
                let score = -e.dot(&(&pooled_inv * &e));
                if score > best_score {
                    best_score = score;
                    best = c;
                }
            }
            if best != labels[row] {
                labels[row] = best;
                changed = true;
            }
        }
        if !changed {
            return;
        }
    }
}

fn mode_from_fit(fit: &ClusterFit, m: usize, n: usize) -> ModeDynamics {
    ModeDynamics {
        transition: fit.coeffs.view((0, 0), (m, m)).into_owned(),
        control: fit.coeffs.view((0, m), (m, n)).into_owned(),
        offset: fit.coeffs.column(m + n).into_owned(),
        noise_cov: fit.noise_cov.clone(),
    }
}

/// Builds initial parameters with `k` modes from raw trajectories.
pub fn initialize<R: Rng>(
    batch: &TrajectoryBatch,
    k: usize,
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<InitReport> {
    assert!(k >= 1, "need at least one mode");
    let m = batch.state_dim();
    let n = batch.control_dim();
    let d = m + n + 1;
    let flat = transition_features(batch);
    if flat.features.is_empty() {
        return Err(Error::fit("initialization", "batch holds no transitions"));
    }

    let standardized = standardize(&flat.features);
    let mut labels_flat = if k == 1 {
        vec![0usize; standardized.len()]
    } else {
        kmeans(&standardized, k, cfg.kmeans_iters, rng)
    };
    if k > 1 {
        refine_labels(batch, &flat, &mut labels_flat, k, cfg);
    }

    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); k];
    for (row, &(i, t)) in flat.origin.iter().enumerate() {
        members[labels_flat[row]].push((i, t));
    }

    let mut warnings = Vec::new();
    let min_members = d + 1;
    let healthy: Vec<usize> = (0..k).filter(|&c| members[c].len() >= min_members).collect();
    let fallback_members: Vec<(usize, usize)> = flat.origin.clone();

    let mut fits: Vec<Option<ClusterFit>> = vec![None; k];
    for &c in &healthy {
        fits[c] = Some(ridge_fit(batch, &members[c], cfg));
    }
    let donor: Option<ClusterFit> = if healthy.is_empty() {
        warnings.push(format!(
            "fewer than {min_members} transitions in every cluster; all modes start from the global fit"
        ));
        Some(ridge_fit(batch, &fallback_members, cfg))
    } else {
        None
    };

    let largest_healthy = healthy
        .iter()
        .copied()
        .max_by_key(|&c| members[c].len());
    let mut modes = Vec::with_capacity(k);
    for c in 0..k {
        if let Some(fit) = &fits[c] {
            modes.push(mode_from_fit(fit, m, n));
        } else {
            let source = match (&donor, largest_healthy) {
                (Some(global), _) => global.clone(),
                (None, Some(big)) => fits[big].as_ref().unwrap().clone(),
                _ => unreachable!("either a donor or a healthy cluster exists"),
            };
            if donor.is_none() {
                warnings.push(format!(
                    "cluster {c} too small to fit; copied the largest cluster with jitter"
                ));
            }
            let mut mode = mode_from_fit(&source, m, n);
            // Jitter breaks the tie so duplicated modes can specialize.
            mode.transition += DMatrix::from_fn(m, m, |_, _| {
                rng.sample::<f64, _>(StandardNormal) * 1e-3
            });
            mode.offset += DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal) * 1e-3);
            modes.push(mode);
        }
    }

    // Gate fit against one-hot cluster labels.
    let features: Vec<(DVector<f64>, DVector<f64>)> = flat
        .origin
        .iter()
        .map(|&(i, t)| {
            let seq = &batch.sequences()[i];
            (seq.obs()[t].clone(), seq.controls()[t].clone())
        })
        .collect();
    let targets: Vec<DVector<f64>> = labels_flat
        .iter()
        .map(|&c| {
            let mut one_hot = DVector::zeros(k);
            one_hot[c] = 1.0;
            one_hot
        })
        .collect();
    let recurrence = fit_recurrence(
        &Recurrence {
            state_weights: DMatrix::zeros(k, m),
            control_weights: DMatrix::zeros(k, n),
            bias: DVector::zeros(k),
        },
        &features,
        &targets,
        cfg,
    );

    let params = RsldsParams {
        modes,
        recurrence,
        emission_cov: pinned_emission(batch, cfg),
    };
    params.validate()?;

    let mut labels: Vec<Vec<usize>> = batch
        .sequences()
        .iter()
        .map(|s| vec![0usize; s.transitions()])
        .collect();
    for (row, &(i, t)) in flat.origin.iter().enumerate() {
        labels[i][t] = labels_flat[row];
    }

    for w in &warnings {
        log::warn!("initialization: {w}");
    }
    Ok(InitReport {
        params,
        labels,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rslds::synthetic::{excitation_controls, two_mode_system};
    use crate::rslds::{simulate, Sequence};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_mode_init_recovers_linear_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.05, -0.1, 0.85]);
        let b = DMatrix::from_row_slice(2, 1, &[0.3, -0.1]);
        let mut x = DVector::from_row_slice(&[0.5, -0.5]);
        let mut obs = vec![x.clone()];
        let mut controls = Vec::new();
        for t in 0..200 {
            let u = DVector::from_element(1, ((t as f64) * 0.13).sin());
            x = &a * &x + &b * &u;
            obs.push(x.clone());
            controls.push(u);
        }
        let batch = TrajectoryBatch::new(vec![Sequence::new(obs, controls)]);
        let report = initialize(&batch, 1, &FitConfig::default(), &mut rng).unwrap();
        assert!(report.warnings.is_empty());
        assert!((&report.params.modes[0].transition - &a).abs().max() < 1e-3);
        assert!((&report.params.modes[0].control - &b).abs().max() < 1e-3);
    }

    #[test]
    fn two_mode_init_labels_match_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let truth = two_mode_system();
        let controls = excitation_controls(800, &mut rng);
        let traj = simulate(&truth, &DVector::zeros(2), &controls, &mut rng);
        let batch = TrajectoryBatch::new(vec![Sequence::new(traj.observations, controls)]);
        let report = initialize(&batch, 2, &FitConfig::default(), &mut rng).unwrap();

        let flat_truth: Vec<usize> = traj.modes.clone();
        let flat_init: Vec<usize> = report.labels[0].clone();
        let total = flat_truth.len() as f64;
        let direct = flat_truth
            .iter()
            .zip(&flat_init)
            .filter(|(a, b)| a == b)
            .count() as f64;
        let swapped = flat_truth
            .iter()
            .zip(&flat_init)
            .filter(|(a, b)| **a != **b)
            .count() as f64;
        let accuracy = direct.max(swapped) / total;
        assert!(accuracy >= 0.7, "initial label accuracy {accuracy}");
    }

    #[test]
    fn oversized_mode_count_pads_with_warning() {
        // Three transitions cannot support three regressions (each needs at
        // least dim + 1 = 5 members), so initialization falls back globally.
        let obs = vec![
            DVector::from_row_slice(&[0.0, 0.0]),
            DVector::from_row_slice(&[0.1, 0.05]),
            DVector::from_row_slice(&[0.2, 0.03]),
            DVector::from_row_slice(&[0.15, -0.02]),
        ];
        let controls = vec![DVector::from_element(1, 0.3); 3];
        let batch = TrajectoryBatch::new(vec![Sequence::new(obs, controls)]);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let report = initialize(&batch, 3, &FitConfig::default(), &mut rng).unwrap();
        assert!(!report.warnings.is_empty());
        assert_eq!(report.params.num_modes(), 3);
        report.params.validate().unwrap();
        // Jitter keeps the padded modes distinct.
        assert_ne!(
            report.params.modes[0].transition,
            report.params.modes[1].transition
        );
    }
}
