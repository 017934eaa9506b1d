//! Parameter learning. Each mode's dynamics get a conjugate matrix-normal
//! inverse-Wishart update from posterior-weighted sufficient statistics; the
//! shared emission covariance is the posterior-expected residual moment; the
//! softmax gate is refit by ridge-regularized gradient ascent against the
//! transition responsibilities. `fit` alternates the two smoothing steps with
//! this m-step and reports a per-round progress trace.

use nalgebra::{DMatrix, DVector};

use crate::config::FitConfig;
use crate::error::{Error, Result};
use crate::linalg::{log_softmax, softmax, spd_floor, symmetrize};
use crate::par::par_map;

use super::inference::{
    bootstrap_state_posterior, e_step_continuous, e_step_discrete, expected_joint_with_covs,
};
use super::{ModeDynamics, ModePosterior, Recurrence, RsldsParams, StatePosterior, TrajectoryBatch};

/// Matrix-normal inverse-Wishart prior over one mode's stacked coefficient
/// matrix `[A B b]` and noise covariance.
#[derive(Debug, Clone)]
pub struct MniwPrior {
    /// Prior mean of `[A B b]` (M x D with D = M + N + 1).
    pub mean: DMatrix<f64>,
    /// Column precision (D x D).
    pub col_precision: DMatrix<f64>,
    /// Inverse-Wishart scale (M x M).
    pub iw_scale: DMatrix<f64>,
    /// Inverse-Wishart degrees of freedom.
    pub iw_dof: f64,
}

impl MniwPrior {
    /// Default prior: dynamics centered on "state persists" (`A = I`,
    /// `B = 0`, `b = 0`) with weak column precision.
    pub fn default_for(m: usize, n: usize, cfg: &FitConfig) -> MniwPrior {
        let d = m + n + 1;
        let mut mean = DMatrix::zeros(m, d);
        mean.view_mut((0, 0), (m, m)).copy_from(&DMatrix::identity(m, m));
        MniwPrior {
            mean,
            col_precision: DMatrix::identity(d, d) * cfg.mniw_col_precision,
            iw_scale: DMatrix::identity(m, m) * cfg.iw_scale,
            iw_dof: m as f64 + cfg.iw_dof_extra,
        }
    }

    /// Default prior with the inverse-Wishart scale matched to the data: each
    /// diagonal entry is `iw_scale` times the variance of that coordinate's
    /// one-step observation differences. A fixed unit-scale prior would drown
    /// the likelihood on systems whose per-step changes are orders of
    /// magnitude smaller than 1, leaving every mode equally plausible.
    pub fn scaled_to(batch: &TrajectoryBatch, m: usize, n: usize, cfg: &FitConfig) -> MniwPrior {
        let mut prior = Self::default_for(m, n, cfg);
        let mut sum = DVector::zeros(m);
        let mut sum_sq = DVector::zeros(m);
        let mut count = 0.0f64;
        for seq in batch.sequences() {
            for pair in seq.obs().windows(2) {
                let diff = &pair[1] - &pair[0];
                sum += &diff;
                sum_sq += diff.component_mul(&diff);
                count += 1.0;
            }
        }
        if count > 0.0 {
            for d in 0..m {
                let mean = sum[d] / count;
                let var = (sum_sq[d] / count - mean * mean).max(cfg.cov_floor);
                prior.iw_scale[(d, d)] = cfg.iw_scale * var;
            }
        }
        prior
    }
}

/// The pinned emission covariance for a batch: per-coordinate variance of
/// the observations themselves, scaled down by `emission_var_scale` and
/// floored. Diagonal by construction.
pub fn pinned_emission(batch: &TrajectoryBatch, cfg: &FitConfig) -> DMatrix<f64> {
    let m = batch.state_dim();
    let mut sum = DVector::zeros(m);
    let mut sum_sq = DVector::zeros(m);
    let mut count = 0.0f64;
    for seq in batch.sequences() {
        for y in seq.obs() {
            sum += y;
            sum_sq += y.component_mul(y);
            count += 1.0;
        }
    }
    let mut cov = DMatrix::identity(m, m);
    for d in 0..m {
        let mean = sum[d] / count;
        let var = (sum_sq[d] / count - mean * mean).max(0.0);
        cov[(d, d)] = (cfg.emission_var_scale * var).max(cfg.cov_floor);
    }
    cov
}

/// Responsibility-weighted expected sufficient statistics for one mode,
/// using the full Gaussian moments (means, covariances, adjacent cross
/// covariances) of the state posterior. The regressor is `phi = [x; u; 1]`.
#[derive(Debug, Clone)]
pub struct ModeStats {
    pub weight: f64,
    /// `sum w E[phi phi^T]` (D x D).
    pub phi_phi: DMatrix<f64>,
    /// `sum w E[x_next phi^T]` (M x D).
    pub next_phi: DMatrix<f64>,
    /// `sum w E[x_next x_next^T]` (M x M).
    pub next_next: DMatrix<f64>,
}

impl ModeStats {
    fn zeros(m: usize, d: usize) -> ModeStats {
        ModeStats {
            weight: 0.0,
            phi_phi: DMatrix::zeros(d, d),
            next_phi: DMatrix::zeros(m, d),
            next_next: DMatrix::zeros(m, m),
        }
    }

    fn add(&mut self, other: &ModeStats) {
        self.weight += other.weight;
        self.phi_phi += &other.phi_phi;
        self.next_phi += &other.next_phi;
        self.next_next += &other.next_next;
    }
}

fn sequence_mode_stats(
    seq_post: &StatePosterior,
    mode_post: &ModePosterior,
    controls: &[DVector<f64>],
    mode: usize,
    m: usize,
    n: usize,
) -> ModeStats {
    let d = m + n + 1;
    let mut stats = ModeStats::zeros(m, d);
    for t in 0..controls.len() {
        let w = mode_post.probs[t][mode];
        if w == 0.0 {
            continue;
        }
        let mut phi = DVector::zeros(d);
        phi.rows_mut(0, m).copy_from(&seq_post.means[t]);
        phi.rows_mut(m, n).copy_from(&controls[t]);
        phi[d - 1] = 1.0;

        let mut phi_phi = &phi * phi.transpose();
        phi_phi
            .view_mut((0, 0), (m, m))
            .zip_apply(&seq_post.covs[t], |acc, c| *acc += c);

        let mut next_phi = &seq_post.means[t + 1] * phi.transpose();
        // cross[t] = cov(x_t, x_next); the x_next-by-x_t block is its
        // transpose.
        next_phi
            .view_mut((0, 0), (m, m))
            .zip_apply(&seq_post.cross[t].transpose(), |acc, c| *acc += c);

        let next_next = &seq_post.means[t + 1] * seq_post.means[t + 1].transpose()
            + &seq_post.covs[t + 1];

        stats.weight += w;
        stats.phi_phi += phi_phi * w;
        stats.next_phi += next_phi * w;
        stats.next_next += next_next * w;
    }
    stats
}

/// Batch-level sufficient statistics for one mode: the sum of per-sequence
/// statistics, so concatenating identical batches scales the result exactly.
pub fn mode_sufficient_stats(
    batch: &TrajectoryBatch,
    state_posts: &[StatePosterior],
    mode_posts: &[ModePosterior],
    mode: usize,
) -> ModeStats {
    let m = batch.state_dim();
    let n = batch.control_dim();
    let mut total = ModeStats::zeros(m, m + n + 1);
    for (i, seq) in batch.sequences().iter().enumerate() {
        let per_seq = sequence_mode_stats(&state_posts[i], &mode_posts[i], seq.controls(), mode, m, n);
        total.add(&per_seq);
    }
    total
}

fn mniw_mode_update(
    stats: &ModeStats,
    prior: &MniwPrior,
    m: usize,
    n: usize,
    cov_floor: f64,
) -> Result<ModeDynamics> {
    let v_n = symmetrize(&(&prior.col_precision + &stats.phi_phi));
    let chol = nalgebra::Cholesky::new(v_n.clone())
        .ok_or_else(|| Error::numerical("dynamics update", "column precision not positive definite"))?;
    let rhs = &prior.mean * &prior.col_precision + &stats.next_phi;
    // coeffs = rhs V_n^-1, via solving V_n X^T = rhs^T.
    let coeffs = chol.solve(&rhs.transpose()).transpose();

    let psi_n = &prior.iw_scale
        + &stats.next_next
        + &prior.mean * &prior.col_precision * prior.mean.transpose()
        - &coeffs * &v_n * coeffs.transpose();
    let dof_n = prior.iw_dof + stats.weight;
    let denom = dof_n - m as f64 - 1.0;
    if denom <= 0.0 {
        return Err(Error::numerical("dynamics update", "degenerate degrees of freedom"));
    }
    let noise_cov = spd_floor(&(symmetrize(&psi_n) / denom), cov_floor);

    Ok(ModeDynamics {
        transition: coeffs.view((0, 0), (m, m)).into_owned(),
        control: coeffs.view((0, m), (m, n)).into_owned(),
        offset: coeffs.column(m + n).into_owned(),
        noise_cov,
    })
}

/// Gate regression objective: mean responsibility-weighted log gate
/// probability minus a ridge penalty.
fn gate_objective(
    recurrence: &Recurrence,
    features: &[(DVector<f64>, DVector<f64>)],
    targets: &[DVector<f64>],
    ridge: f64,
) -> f64 {
    let mut j = 0.0;
    for ((x, u), q) in features.iter().zip(targets) {
        let ls = log_softmax(&recurrence.logits(x, u));
        j += q.dot(&ls);
    }
    j /= features.len() as f64;
    j -= 0.5
        * ridge
        * (recurrence.state_weights.norm_squared()
            + recurrence.control_weights.norm_squared()
            + recurrence.bias.norm_squared());
    j
}

fn gate_gradient(
    recurrence: &Recurrence,
    features: &[(DVector<f64>, DVector<f64>)],
    targets: &[DVector<f64>],
    ridge: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let k = recurrence.bias.len();
    let m = recurrence.state_weights.ncols();
    let n = recurrence.control_weights.ncols();
    let mut g_state = DMatrix::zeros(k, m);
    let mut g_control = DMatrix::zeros(k, n);
    let mut g_bias = DVector::zeros(k);
    for ((x, u), q) in features.iter().zip(targets) {
        let probs = softmax(&recurrence.logits(x, u));
        let diff = q - probs;
        g_state += &diff * x.transpose();
        g_control += &diff * u.transpose();
        g_bias += diff;
    }
    let t = features.len() as f64;
    g_state = g_state / t - &recurrence.state_weights * ridge;
    g_control = g_control / t - &recurrence.control_weights * ridge;
    g_bias = g_bias / t - &recurrence.bias * ridge;
    (g_state, g_control, g_bias)
}

/// Per-coordinate mean and scale of the gate features. Scales carry a floor
/// relative to the widest coordinate so near-constant coordinates cannot blow
/// up the back-mapping of the fitted weights.
fn gate_feature_moments(
    features: &[(DVector<f64>, DVector<f64>)],
) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    let m = features[0].0.len();
    let n = features[0].1.len();
    let count = features.len() as f64;
    let mut mean_x = DVector::zeros(m);
    let mut mean_u = DVector::zeros(n);
    for (x, u) in features {
        mean_x += x;
        mean_u += u;
    }
    mean_x /= count;
    mean_u /= count;
    let mut var_x = DVector::zeros(m);
    let mut var_u = DVector::zeros(n);
    for (x, u) in features {
        let dx = x - &mean_x;
        let du = u - &mean_u;
        var_x += dx.component_mul(&dx);
        var_u += du.component_mul(&du);
    }
    let mut scale_x = (var_x / count).map(f64::sqrt);
    let mut scale_u = (var_u / count).map(f64::sqrt);
    let widest = scale_x
        .iter()
        .chain(scale_u.iter())
        .fold(0.0f64, |acc, &s| acc.max(s));
    let floor = (widest * 1e-2).max(1e-12);
    scale_x = scale_x.map(|s| s.max(floor));
    scale_u = scale_u.map(|s| s.max(floor));
    (mean_x, scale_x, mean_u, scale_u)
}

/// Refits the gate by gradient ascent with backtracking, starting from the
/// current parameters. Targets are soft (posterior responsibilities); the
/// features are the posterior state means paired with the applied controls.
/// The ascent runs on standardized features so coordinates on very different
/// scales condition equally well, and the result is mapped back to raw
/// coordinates.
pub(crate) fn fit_recurrence(
    start: &Recurrence,
    features: &[(DVector<f64>, DVector<f64>)],
    targets: &[DVector<f64>],
    cfg: &FitConfig,
) -> Recurrence {
    assert!(!features.is_empty(), "gate regression needs data");
    assert_eq!(features.len(), targets.len());
    let (mean_x, scale_x, mean_u, scale_u) = gate_feature_moments(features);
    let scaled: Vec<(DVector<f64>, DVector<f64>)> = features
        .iter()
        .map(|(x, u)| {
            (
                (x - &mean_x).component_div(&scale_x),
                (u - &mean_u).component_div(&scale_u),
            )
        })
        .collect();

    // Same logits in scaled coordinates: multiply columns by the scale and
    // fold the means into the bias.
    let mut scaled_start = start.clone();
    for d in 0..scale_x.len() {
        scaled_start.state_weights.column_mut(d).scale_mut(scale_x[d]);
    }
    for e in 0..scale_u.len() {
        scaled_start
            .control_weights
            .column_mut(e)
            .scale_mut(scale_u[e]);
    }
    scaled_start.bias += &start.state_weights * &mean_x + &start.control_weights * &mean_u;

    let mut fitted = ascend_gate(&scaled_start, &scaled, targets, cfg);

    for d in 0..scale_x.len() {
        fitted.state_weights.column_mut(d).scale_mut(1.0 / scale_x[d]);
    }
    for e in 0..scale_u.len() {
        fitted
            .control_weights
            .column_mut(e)
            .scale_mut(1.0 / scale_u[e]);
    }
    fitted.bias -= &fitted.state_weights * &mean_x + &fitted.control_weights * &mean_u;
    fitted
}

fn ascend_gate(
    start: &Recurrence,
    features: &[(DVector<f64>, DVector<f64>)],
    targets: &[DVector<f64>],
    cfg: &FitConfig,
) -> Recurrence {
    let ridge = cfg.recurrence_ridge;
    let mut current = start.clone();
    let mut j = gate_objective(&current, features, targets, ridge);
    let mut lr = 1.0;

    for _ in 0..cfg.logistic_max_iters {
        let (gs, gc, gb) = gate_gradient(&current, features, targets, ridge);
        let gnorm = gs
            .iter()
            .chain(gc.iter())
            .chain(gb.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
        if gnorm < cfg.logistic_tol {
            break;
        }

        let mut step = lr;
        let mut accepted = false;
        for _ in 0..=cfg.logistic_max_halvings {
            let trial = Recurrence {
                state_weights: &current.state_weights + &gs * step,
                control_weights: &current.control_weights + &gc * step,
                bias: &current.bias + &gb * step,
            };
            let j_trial = gate_objective(&trial, features, targets, ridge);
            if j_trial.is_finite() && j_trial > j {
                current = trial;
                j = j_trial;
                lr = (step * 2.0).min(64.0);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    current
}

/// One m-step. Modes whose total responsibility falls below the floor keep
/// their previous parameters (no data, no update); everything else is the
/// conjugate posterior mean. Returns the updated parameters and any
/// update-skip warnings.
pub fn m_step(
    params: &RsldsParams,
    prior: &MniwPrior,
    batch: &TrajectoryBatch,
    state_posts: &[StatePosterior],
    mode_posts: &[ModePosterior],
    cfg: &FitConfig,
) -> Result<(RsldsParams, Vec<String>)> {
    let k = params.num_modes();
    let m = batch.state_dim();
    let n = batch.control_dim();
    assert_eq!(state_posts.len(), batch.sequences().len());
    assert_eq!(mode_posts.len(), batch.sequences().len());

    let mode_results = par_map((0..k).collect::<Vec<_>>(), |kk| {
        let stats = mode_sufficient_stats(batch, state_posts, mode_posts, kk);
        if stats.weight < cfg.resp_floor {
            (params.modes[kk].clone(), Some(kk))
        } else {
            match mniw_mode_update(&stats, prior, m, n, cfg.cov_floor) {
                Ok(mode) => (mode, None),
                Err(_) => (params.modes[kk].clone(), Some(kk)),
            }
        }
    });
    let mut warnings = Vec::new();
    let mut modes = Vec::with_capacity(k);
    for (mode, skipped) in mode_results {
        if let Some(kk) = skipped {
            warnings.push(format!("mode {kk} kept previous dynamics (insufficient responsibility)"));
            log::warn!("m-step: mode {kk} kept previous dynamics");
        }
        modes.push(mode);
    }

    // The emission channel is pinned, never re-estimated. Observations enter
    // the state directly here, and letting this covariance float invites an
    // EM race where the state posterior warps to shrink both noise channels
    // at once instead of explaining the dynamics.
    let emission_cov = pinned_emission(batch, cfg);

    // Gate regression over all transitions.
    let mut features = Vec::with_capacity(batch.total_transitions());
    let mut targets = Vec::with_capacity(batch.total_transitions());
    for (i, seq) in batch.sequences().iter().enumerate() {
        for t in 0..seq.transitions() {
            features.push((state_posts[i].means[t].clone(), seq.controls()[t].clone()));
            targets.push(mode_posts[i].probs[t].clone());
        }
    }
    let recurrence = fit_recurrence(&params.recurrence, &features, &targets, cfg);

    let updated = RsldsParams {
        modes,
        recurrence,
        emission_cov,
    };
    updated.validate()?;
    Ok((updated, warnings))
}

/// Learning progress surrogate: expected log joint under the Gaussian
/// moments plus both posterior entropies.
pub fn surrogate_objective(
    params: &RsldsParams,
    batch: &TrajectoryBatch,
    state_posts: &[StatePosterior],
    mode_posts: &[ModePosterior],
    cfg: &FitConfig,
) -> f64 {
    let m = batch.state_dim() as f64;
    let mut total = 0.0;
    for (i, seq) in batch.sequences().iter().enumerate() {
        total += expected_joint_with_covs(params, seq, &mode_posts[i].probs, &state_posts[i], cfg.init_state_var);
        let dims = seq.len() as f64 * m;
        total += 0.5 * (dims * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
            - state_posts[i].log_det_precision);
        for q in &mode_posts[i].probs {
            total -= q.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
        }
    }
    total
}

/// Everything a fit call produces: updated parameters, the final posteriors,
/// the per-round progress trace, and non-fatal warnings.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: RsldsParams,
    pub state_posts: Vec<StatePosterior>,
    pub mode_posts: Vec<ModePosterior>,
    pub objective_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Runs `cfg.em_rounds` rounds of (continuous smoothing, discrete smoothing,
/// parameter update) from the given starting parameters. With zero rounds the
/// parameters pass through unchanged (posteriors are still computed so the
/// caller has something consistent to hold).
pub fn fit(
    params: RsldsParams,
    prior: &MniwPrior,
    batch: &TrajectoryBatch,
    cfg: &FitConfig,
) -> Result<FitReport> {
    params.validate()?;
    assert_eq!(params.state_dim(), batch.state_dim(), "state dims disagree");
    assert_eq!(params.control_dim(), batch.control_dim(), "control dims disagree");

    let bootstrap = bootstrap_state_posterior(batch);
    let mut mode_posts = e_step_discrete(&params, batch, &bootstrap, cfg)
        .map_err(|e| Error::fit("bootstrap discrete step", e.to_string()))?;
    let mut state_posts = bootstrap;
    let mut current = params;
    let mut trace = Vec::with_capacity(cfg.em_rounds);
    let mut warnings = Vec::new();

    for round in 0..cfg.em_rounds {
        state_posts = e_step_continuous(&current, batch, &mode_posts, cfg)
            .map_err(|e| Error::fit(format!("continuous step, round {round}"), e.to_string()))?;
        mode_posts = e_step_discrete(&current, batch, &state_posts, cfg)
            .map_err(|e| Error::fit(format!("discrete step, round {round}"), e.to_string()))?;
        let (updated, mut warn) = m_step(&current, prior, batch, &state_posts, &mode_posts, cfg)
            .map_err(|e| Error::fit(format!("m-step, round {round}"), e.to_string()))?;
        warnings.append(&mut warn);
        current = updated;
        trace.push(surrogate_objective(&current, batch, &state_posts, &mode_posts, cfg));
    }

    if cfg.em_rounds == 0 {
        // Provide a usable continuous posterior even without updates.
        state_posts = e_step_continuous(&current, batch, &mode_posts, cfg)
            .map_err(|e| Error::fit("continuous step", e.to_string()))?;
    }

    Ok(FitReport {
        params: current,
        state_posts,
        mode_posts,
        objective_trace: trace,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::fd_gradient;
    use crate::rslds::synthetic::two_mode_system;
    use crate::rslds::{simulate, Sequence};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn delta_posterior(batch: &TrajectoryBatch) -> Vec<StatePosterior> {
        super::super::inference::bootstrap_state_posterior(batch)
    }

    fn uniform_mode_posts(batch: &TrajectoryBatch, k: usize) -> Vec<ModePosterior> {
        batch
            .sequences()
            .iter()
            .map(|s| ModePosterior {
                probs: vec![DVector::from_element(k, 1.0 / k as f64); s.transitions()],
                pairs: vec![DMatrix::from_element(k, k, 1.0 / (k * k) as f64); s.transitions() - 1],
            })
            .collect()
    }

    fn linear_batch(rng: &mut ChaCha8Rng, len: usize) -> (TrajectoryBatch, DMatrix<f64>) {
        // One noisy linear system: x' = A x + B u + b + small noise.
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.05, 0.8]);
        let b = DMatrix::from_row_slice(2, 1, &[0.2, 0.05]);
        let offset = DVector::from_row_slice(&[0.01, -0.02]);
        let mut x = DVector::from_row_slice(&[0.3, -0.2]);
        let mut obs = vec![x.clone()];
        let mut controls = Vec::new();
        for _ in 0..len - 1 {
            let u = DVector::from_element(1, rng.random_range(-1.0..1.0));
            x = &a * &x + &b * &u + &offset
                + DVector::from_fn(2, |_, _| rng.random_range(-0.01..0.01));
            obs.push(x.clone());
            controls.push(u);
        }
        (TrajectoryBatch::new(vec![Sequence::new(obs, controls)]), a)
    }

    #[test]
    fn sufficient_stats_double_with_duplicated_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (batch, _) = linear_batch(&mut rng, 40);
        let single_posts = delta_posterior(&batch);
        let single_modes = uniform_mode_posts(&batch, 2);

        let doubled = TrajectoryBatch::new(
            batch
                .sequences()
                .iter()
                .chain(batch.sequences())
                .cloned()
                .collect(),
        );
        let double_posts = delta_posterior(&doubled);
        let double_modes = uniform_mode_posts(&doubled, 2);

        let s1 = mode_sufficient_stats(&batch, &single_posts, &single_modes, 0);
        let s2 = mode_sufficient_stats(&doubled, &double_posts, &double_modes, 0);
        assert_eq!(s2.weight, 2.0 * s1.weight);
        assert_eq!(s2.phi_phi, &s1.phi_phi * 2.0);
        assert_eq!(s2.next_phi, &s1.next_phi * 2.0);
        assert_eq!(s2.next_next, &s1.next_next * 2.0);
    }

    #[test]
    fn m_step_recovers_linear_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (batch, a_true) = linear_batch(&mut rng, 400);
        let cfg = FitConfig::default();
        let prior = MniwPrior::default_for(2, 1, &cfg);
        let start = crate::rslds::init::initialize(&batch, 1, &cfg, &mut rng).unwrap();
        let posts = delta_posterior(&batch);
        let modes = uniform_mode_posts(&batch, 1);
        let (updated, warnings) = m_step(&start.params, &prior, &batch, &posts, &modes, &cfg).unwrap();
        assert!(warnings.is_empty());
        assert!(
            (&updated.modes[0].transition - &a_true).abs().max() < 0.05,
            "recovered {} vs {}",
            updated.modes[0].transition,
            a_true
        );
    }

    #[test]
    fn starved_mode_keeps_previous_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (batch, _) = linear_batch(&mut rng, 30);
        let cfg = FitConfig::default();
        let prior = MniwPrior::default_for(2, 1, &cfg);
        let params = crate::rslds::tests::small_params(2, 2, 1);
        let posts = delta_posterior(&batch);
        // All responsibility on mode 0; mode 1 gets exactly zero.
        let mode_posts: Vec<ModePosterior> = batch
            .sequences()
            .iter()
            .map(|s| ModePosterior {
                probs: vec![DVector::from_row_slice(&[1.0, 0.0]); s.transitions()],
                pairs: vec![],
            })
            .collect();
        let (updated, warnings) = m_step(&params, &prior, &batch, &posts, &mode_posts, &cfg).unwrap();
        assert_eq!(updated.modes[1].transition, params.modes[1].transition);
        assert_eq!(updated.modes[1].noise_cov, params.modes[1].noise_cov);
        assert_eq!(warnings.len(), 1);
        assert_ne!(updated.modes[0].transition, params.modes[0].transition);
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let (k, m, n) = (3, 2, 1);
        let features: Vec<(DVector<f64>, DVector<f64>)> = (0..20)
            .map(|_| {
                (
                    DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
                    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
                )
            })
            .collect();
        let targets: Vec<DVector<f64>> = (0..20)
            .map(|_| {
                let raw = DVector::from_fn(k, |_, _| rng.random_range(0.1..1.0));
                let s = raw.sum();
                raw / s
            })
            .collect();
        let rec = Recurrence {
            state_weights: DMatrix::from_fn(k, m, |_, _| rng.random_range(-0.5..0.5)),
            control_weights: DMatrix::from_fn(k, n, |_, _| rng.random_range(-0.5..0.5)),
            bias: DVector::from_fn(k, |_, _| rng.random_range(-0.5..0.5)),
        };
        let ridge = 0.01;
        let (gs, gc, gb) = gate_gradient(&rec, &features, &targets, ridge);

        let dim = k * (m + n + 1);
        let pack = |r: &Recurrence| {
            let mut v = DVector::zeros(dim);
            let mut idx = 0;
            for val in r.state_weights.iter().chain(r.control_weights.iter()).chain(r.bias.iter()) {
                v[idx] = *val;
                idx += 1;
            }
            v
        };
        let unpack = |v: &DVector<f64>| {
            let mut it = v.iter().cloned();
            let state_weights = DMatrix::from_fn(k, m, |_, _| 0.0).map(|_| 0.0);
            // nalgebra iterates column-major; rebuild in the same order as pack.
            let mut sw = state_weights;
            for val in sw.iter_mut() {
                *val = it.next().unwrap();
            }
            let mut cw = DMatrix::zeros(k, n);
            for val in cw.iter_mut() {
                *val = it.next().unwrap();
            }
            let mut bias = DVector::zeros(k);
            for val in bias.iter_mut() {
                *val = it.next().unwrap();
            }
            Recurrence { state_weights: sw, control_weights: cw, bias }
        };
        let f = |v: &DVector<f64>| gate_objective(&unpack(v), &features, &targets, ridge);
        let fd = fd_gradient(&f, &pack(&rec), 1e-6);
        let analytic = pack(&Recurrence {
            state_weights: gs,
            control_weights: gc,
            bias: gb,
        });
        assert!((analytic - fd).abs().max() < 1e-6);
    }

    #[test]
    fn gate_refit_improves_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let truth = crate::rslds::tests::small_params(3, 2, 1);
        let features: Vec<(DVector<f64>, DVector<f64>)> = (0..200)
            .map(|_| {
                (
                    DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)),
                    DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0)),
                )
            })
            .collect();
        let targets: Vec<DVector<f64>> = features
            .iter()
            .map(|(x, u)| truth.transition_probs(x, u))
            .collect();
        let cfg = FitConfig::default();
        let start = Recurrence {
            state_weights: DMatrix::zeros(3, 2),
            control_weights: DMatrix::zeros(3, 1),
            bias: DVector::zeros(3),
        };
        let before = gate_objective(&start, &features, &targets, cfg.recurrence_ridge);
        let fitted = fit_recurrence(&start, &features, &targets, &cfg);
        let after = gate_objective(&fitted, &features, &targets, cfg.recurrence_ridge);
        assert!(after > before + 0.01, "no meaningful progress: {before} -> {after}");
    }

    #[test]
    fn fit_with_zero_rounds_passes_params_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let (batch, _) = linear_batch(&mut rng, 25);
        let params = crate::rslds::tests::small_params(2, 2, 1);
        let mut cfg = FitConfig::default();
        cfg.em_rounds = 0;
        let prior = MniwPrior::default_for(2, 1, &cfg);
        let report = fit(params.clone(), &prior, &batch, &cfg).unwrap();
        assert_eq!(report.params.modes[0].transition, params.modes[0].transition);
        assert_eq!(report.params.recurrence.bias, params.recurrence.bias);
        assert!(report.objective_trace.is_empty());
        assert_eq!(report.state_posts.len(), 1);
    }

    #[test]
    fn fit_improves_surrogate_on_synthetic_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let truth = two_mode_system();
        let controls: Vec<DVector<f64>> = (0..300)
            .map(|t| DVector::from_element(1, if (t / 25) % 2 == 0 { 0.8 } else { -0.8 }))
            .collect();
        let traj = simulate(&truth, &DVector::zeros(2), &controls, &mut rng);
        let batch = TrajectoryBatch::new(vec![Sequence::new(traj.observations, controls)]);
        let mut cfg = FitConfig::default();
        cfg.em_rounds = 4;
        let prior = MniwPrior::default_for(2, 1, &cfg);
        let start = crate::rslds::init::initialize(&batch, 2, &cfg, &mut rng).unwrap();
        let report = fit(start.params, &prior, &batch, &cfg).unwrap();
        assert_eq!(report.objective_trace.len(), 4);
        let first = report.objective_trace.first().unwrap();
        let last = report.objective_trace.last().unwrap();
        assert!(last >= first, "surrogate regressed: {first} -> {last}");
    }
}
