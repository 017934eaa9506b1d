//! Variational smoothing for the switching model. The posterior is factored
//! into a Gaussian over each sequence's state path and an independent
//! categorical per transition.
//!
//! Continuous step: damped Newton ascent on the expected log joint, which is
//! concave in the state path (Gaussian terms plus a softmax log likelihood
//! whose Hessian is negative semidefinite). The negative Hessian is block
//! tridiagonal, so each iteration is linear in sequence length. The Gaussian
//! covariance is the inverse negative Hessian at the optimum.
//!
//! Discrete step: per-transition log potentials rebuilt from the Gaussian
//! moments, normalized by a chain forward-backward pass (the pairwise
//! potentials are zero here because switching depends only on the continuous
//! state, not the previous mode; the chain code is shared with consumers
//! that do have coupled potentials).

use nalgebra::{DMatrix, DVector};

use crate::chain::forward_backward;
use crate::config::FitConfig;
use crate::error::{Error, Result};
use crate::linalg::{BlockTridiag, log_softmax, softmax};
use crate::par::par_map;

use super::{ModePosterior, RsldsParams, Sequence, StatePosterior, TrajectoryBatch};

/// Per-mode matrices reused across timesteps and iterations.
struct Precomp {
    q_inv: Vec<DMatrix<f64>>,
    q_log_det: Vec<f64>,
    /// `A_k^T Q_k^-1`
    atq: Vec<DMatrix<f64>>,
    /// `A_k^T Q_k^-1 A_k`
    atqa: Vec<DMatrix<f64>>,
    s_inv: DMatrix<f64>,
    s_log_det: f64,
}

impl Precomp {
    fn new(params: &RsldsParams) -> Result<Precomp> {
        let mut q_inv = Vec::new();
        let mut q_log_det = Vec::new();
        let mut atq = Vec::new();
        let mut atqa = Vec::new();
        for (k, mode) in params.modes.iter().enumerate() {
            let chol = nalgebra::Cholesky::new(mode.noise_cov.clone()).ok_or_else(|| {
                Error::numerical("e-step precompute", format!("mode {k} noise covariance"))
            })?;
            let inv = chol.inverse();
            q_log_det.push(crate::linalg::log_det_cholesky(&chol));
            atq.push(mode.transition.transpose() * &inv);
            atqa.push(mode.transition.transpose() * &inv * &mode.transition);
            q_inv.push(inv);
        }
        let s_chol = nalgebra::Cholesky::new(params.emission_cov.clone())
            .ok_or_else(|| Error::numerical("e-step precompute", "emission covariance"))?;
        let s_log_det = crate::linalg::log_det_cholesky(&s_chol);
        Ok(Precomp {
            q_inv,
            q_log_det,
            atq,
            atqa,
            s_inv: s_chol.inverse(),
            s_log_det,
        })
    }
}

fn log_gaussian(diff: &DVector<f64>, inv: &DMatrix<f64>, log_det: f64) -> f64 {
    let d = diff.len() as f64;
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + diff.dot(&(inv * diff)))
}

/// The smoothing objective: log joint density of the state path with the
/// discrete modes replaced by their posterior expectation. Gate terms are
/// evaluated at the path itself.
pub fn expected_log_joint(
    params: &RsldsParams,
    seq: &Sequence,
    mode_probs: &[DVector<f64>],
    path: &[DVector<f64>],
    init_state_var: f64,
) -> f64 {
    let pre = Precomp::new(params).expect("params validated before smoothing");
    expected_log_joint_pre(params, &pre, seq, mode_probs, path, init_state_var)
}

fn expected_log_joint_pre(
    params: &RsldsParams,
    pre: &Precomp,
    seq: &Sequence,
    mode_probs: &[DVector<f64>],
    path: &[DVector<f64>],
    init_state_var: f64,
) -> f64 {
    let obs = seq.obs();
    let controls = seq.controls();
    let len = obs.len();
    let m = seq.state_dim() as f64;
    assert_eq!(path.len(), len);
    assert_eq!(mode_probs.len(), len - 1);

    // Initial state prior, anchored at the first observation.
    let d0 = &path[0] - &obs[0];
    let mut f = -0.5
        * (m * (2.0 * std::f64::consts::PI * init_state_var).ln()
            + d0.dot(&d0) / init_state_var);

    for t in 0..len {
        let diff = &obs[t] - &path[t];
        f += log_gaussian(&diff, &pre.s_inv, pre.s_log_det);
    }

    for t in 0..len - 1 {
        let gate = params.transition_log_probs(&path[t], &controls[t]);
        for (k, mode) in params.modes.iter().enumerate() {
            let w = mode_probs[t][k];
            if w == 0.0 {
                continue;
            }
            let resid = &path[t + 1] - mode.predict(&path[t], &controls[t]);
            f += w * (log_gaussian(&resid, &pre.q_inv[k], pre.q_log_det[k]) + gate[k]);
        }
    }
    f
}

/// Gradient of the objective and its negative Hessian (block tridiagonal,
/// positive definite).
fn gradient_and_precision(
    params: &RsldsParams,
    pre: &Precomp,
    seq: &Sequence,
    mode_probs: &[DVector<f64>],
    path: &[DVector<f64>],
    init_state_var: f64,
) -> (Vec<DVector<f64>>, BlockTridiag) {
    let obs = seq.obs();
    let controls = seq.controls();
    let len = obs.len();
    let m = seq.state_dim();
    let k = params.num_modes();
    let wx = &params.recurrence.state_weights;

    let mut grad = vec![DVector::zeros(m); len];
    let mut diag = vec![DMatrix::zeros(m, m); len];
    let mut off = vec![DMatrix::zeros(m, m); len - 1];

    grad[0] -= (&path[0] - &obs[0]) / init_state_var;
    diag[0] += DMatrix::identity(m, m) / init_state_var;

    for t in 0..len {
        grad[t] += &pre.s_inv * (&obs[t] - &path[t]);
        diag[t] += &pre.s_inv;
    }

    for t in 0..len - 1 {
        let probs = softmax(&params.recurrence.logits(&path[t], &controls[t]));
        // Gate terms: gradient lifts the responsibility-minus-probability
        // residual through the state weights; curvature is the softmax
        // covariance, which is positive semidefinite.
        grad[t] += wx.transpose() * (&mode_probs[t] - &probs);
        let curvature = DMatrix::from_diagonal(&probs) - &probs * probs.transpose();
        diag[t] += wx.transpose() * curvature * wx;

        for kk in 0..k {
            let w = mode_probs[t][kk];
            if w == 0.0 {
                continue;
            }
            let mode = &params.modes[kk];
            let resid = &path[t + 1] - mode.predict(&path[t], &controls[t]);
            grad[t] += &pre.atq[kk] * &resid * w;
            grad[t + 1] -= &pre.q_inv[kk] * &resid * w;
            diag[t] += &pre.atqa[kk] * w;
            diag[t + 1] += &pre.q_inv[kk] * w;
            off[t] -= &pre.atq[kk] * w;
        }
    }

    (grad, BlockTridiag { diag, off })
}

/// Newton ascent with step halving for one sequence.
fn smooth_sequence(
    params: &RsldsParams,
    pre: &Precomp,
    seq: &Sequence,
    mode_probs: &[DVector<f64>],
    cfg: &FitConfig,
) -> Result<StatePosterior> {
    let mut path: Vec<DVector<f64>> = seq.obs().to_vec();
    let mut f = expected_log_joint_pre(params, pre, seq, mode_probs, &path, cfg.init_state_var);
    if !f.is_finite() {
        return Err(Error::numerical("smoothing", "objective non-finite at start"));
    }

    let mut converged = false;
    for _ in 0..cfg.newton_max_iters {
        let (grad, prec) = gradient_and_precision(params, pre, seq, mode_probs, &path, cfg.init_state_var);
        let grad_norm = grad
            .iter()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
        if grad_norm < cfg.newton_tol {
            converged = true;
            break;
        }
        let factor = prec.factor()?;
        let direction = factor.solve(&grad);

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.newton_max_halvings {
            let trial: Vec<DVector<f64>> = path
                .iter()
                .zip(&direction)
                .map(|(x, d)| x + d * step)
                .collect();
            let f_trial = expected_log_joint_pre(params, pre, seq, mode_probs, &trial, cfg.init_state_var);
            if f_trial.is_finite() && f_trial >= f {
                path = trial;
                f = f_trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent step found: the current point is numerically optimal.
            break;
        }
    }

    let (grad, prec) = gradient_and_precision(params, pre, seq, mode_probs, &path, cfg.init_state_var);
    let grad_norm = grad
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if grad_norm < cfg.newton_tol {
        converged = true;
    }
    let factor = prec.factor()?;
    let (covs, cross) = factor.marginals();
    Ok(StatePosterior {
        means: path,
        covs,
        cross,
        log_det_precision: factor.log_det(),
        objective: f,
        converged,
    })
}

/// Continuous e-step over a batch: one Gaussian posterior per sequence,
/// computed independently (and in parallel).
pub fn e_step_continuous(
    params: &RsldsParams,
    batch: &TrajectoryBatch,
    mode_posts: &[ModePosterior],
    cfg: &FitConfig,
) -> Result<Vec<StatePosterior>> {
    assert_eq!(mode_posts.len(), batch.sequences().len());
    let pre = Precomp::new(params)?;
    let jobs: Vec<usize> = (0..batch.sequences().len()).collect();
    let results = par_map(jobs, |i| {
        smooth_sequence(params, &pre, &batch.sequences()[i], &mode_posts[i].probs, cfg)
    });
    results.into_iter().collect()
}

/// Expected transition covariance correction
/// `tr(Q_k^-1 cov(x_next - A_k x))` from the Gaussian moments.
fn transition_cov_correction(
    q_inv: &DMatrix<f64>,
    a: &DMatrix<f64>,
    cov_t: &DMatrix<f64>,
    cov_next: &DMatrix<f64>,
    cross: &DMatrix<f64>,
) -> f64 {
    let cov_resid = cov_next + a * cov_t * a.transpose() - cross.transpose() * a.transpose() - a * cross;
    (q_inv * cov_resid).trace()
}

/// Discrete e-step: per-transition posteriors from the gate evaluated at the
/// posterior means plus the expected mode-conditional transition likelihood.
pub fn e_step_discrete(
    params: &RsldsParams,
    batch: &TrajectoryBatch,
    state_posts: &[StatePosterior],
    _cfg: &FitConfig,
) -> Result<Vec<ModePosterior>> {
    assert_eq!(state_posts.len(), batch.sequences().len());
    let pre = Precomp::new(params)?;
    let k = params.num_modes();
    let m = batch.state_dim() as f64;
    let two_pi_term = m * (2.0 * std::f64::consts::PI).ln();

    let jobs: Vec<usize> = (0..batch.sequences().len()).collect();
    let results = par_map(jobs, |i| -> Result<ModePosterior> {
        let seq = &batch.sequences()[i];
        let post = &state_posts[i];
        let len = seq.len();
        let mut unary: Vec<DVector<f64>> = Vec::with_capacity(len - 1);
        for t in 0..len - 1 {
            let gate = log_softmax(&params.recurrence.logits(&post.means[t], &seq.controls()[t]));
            let mut row = DVector::zeros(k);
            for kk in 0..k {
                let mode = &params.modes[kk];
                let resid = &post.means[t + 1] - mode.predict(&post.means[t], &seq.controls()[t]);
                let correction = transition_cov_correction(
                    &pre.q_inv[kk],
                    &mode.transition,
                    &post.covs[t],
                    &post.covs[t + 1],
                    &post.cross[t],
                );
                let quad = resid.dot(&(&pre.q_inv[kk] * &resid)) + correction;
                row[kk] = gate[kk] - 0.5 * (two_pi_term + pre.q_log_det[kk] + quad);
            }
            unary.push(row);
        }
        let pairwise = vec![DMatrix::zeros(k, k); len.saturating_sub(2)];
        let marginals = forward_backward(&unary, &pairwise)?;
        Ok(ModePosterior {
            probs: marginals.unary,
            pairs: marginals.pairwise,
        })
    });
    results.into_iter().collect()
}

/// Deterministic posterior pinned to the observations, used to bootstrap the
/// first discrete step before any Gaussian smoothing has run.
pub fn bootstrap_state_posterior(batch: &TrajectoryBatch) -> Vec<StatePosterior> {
    let m = batch.state_dim();
    batch
        .sequences()
        .iter()
        .map(|seq| StatePosterior {
            means: seq.obs().to_vec(),
            covs: vec![DMatrix::zeros(m, m); seq.len()],
            cross: vec![DMatrix::zeros(m, m); seq.len() - 1],
            log_det_precision: 0.0,
            objective: 0.0,
            converged: true,
        })
        .collect()
}

/// Expected log joint including the Gaussian covariance corrections on every
/// quadratic term (gate terms stay evaluated at the means). Used for the
/// learning progress trace.
pub fn expected_joint_with_covs(
    params: &RsldsParams,
    seq: &Sequence,
    mode_probs: &[DVector<f64>],
    post: &StatePosterior,
    init_state_var: f64,
) -> f64 {
    let pre = Precomp::new(params).expect("params validated before scoring");
    let mut f = expected_log_joint_pre(params, &pre, seq, mode_probs, &post.means, init_state_var);
    let len = seq.len();
    f -= 0.5 * post.covs[0].trace() / init_state_var;
    for t in 0..len {
        f -= 0.5 * (&pre.s_inv * &post.covs[t]).trace();
    }
    for t in 0..len - 1 {
        for (kk, mode) in params.modes.iter().enumerate() {
            let w = mode_probs[t][kk];
            if w == 0.0 {
                continue;
            }
            f -= 0.5
                * w
                * transition_cov_correction(
                    &pre.q_inv[kk],
                    &mode.transition,
                    &post.covs[t],
                    &post.covs[t + 1],
                    &post.cross[t],
                );
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{fd_gradient, fd_hessian, rts_smoother, LinearGaussian};
    use crate::rslds::{ModeDynamics, Recurrence, Sequence, TrajectoryBatch};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, k: usize, m: usize, n: usize) -> RsldsParams {
        let modes = (0..k)
            .map(|_| {
                let raw = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.5..0.5));
                ModeDynamics {
                    transition: raw * 0.8,
                    control: DMatrix::from_fn(m, n, |_, _| rng.random_range(-0.5..0.5)),
                    offset: DVector::from_fn(m, |_, _| rng.random_range(-0.2..0.2)),
                    noise_cov: {
                        let w = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.3..0.3));
                        &w * w.transpose() + DMatrix::identity(m, m) * 0.2
                    },
                }
            })
            .collect();
        RsldsParams {
            modes,
            recurrence: Recurrence {
                state_weights: DMatrix::from_fn(k, m, |_, _| rng.random_range(-1.0..1.0)),
                control_weights: DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0)),
                bias: DVector::from_fn(k, |_, _| rng.random_range(-0.5..0.5)),
            },
            emission_cov: DMatrix::identity(m, m) * 0.05,
        }
    }

    fn random_sequence(rng: &mut ChaCha8Rng, len: usize, m: usize, n: usize) -> Sequence {
        let obs = (0..len)
            .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let controls = (0..len - 1)
            .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        Sequence::new(obs, controls)
    }

    fn random_mode_probs(rng: &mut ChaCha8Rng, transitions: usize, k: usize) -> Vec<DVector<f64>> {
        (0..transitions)
            .map(|_| {
                let raw = DVector::from_fn(k, |_, _| rng.random_range(0.1..1.0));
                let sum = raw.sum();
                raw / sum
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (k, m, n, len) = (3, 2, 1, 4);
        let params = random_params(&mut rng, k, m, n);
        let seq = random_sequence(&mut rng, len, m, n);
        let probs = random_mode_probs(&mut rng, len - 1, k);
        let path: Vec<DVector<f64>> = (0..len)
            .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)))
            .collect();

        let pre = Precomp::new(&params).unwrap();
        let (grad, prec) = gradient_and_precision(&params, &pre, &seq, &probs, &path, 1.0);

        let flat = |p: &[DVector<f64>]| {
            DVector::from_iterator(len * m, p.iter().flat_map(|v| v.iter().cloned()))
        };
        let unflat = |v: &DVector<f64>| -> Vec<DVector<f64>> {
            (0..len).map(|t| v.rows(t * m, m).into_owned()).collect()
        };
        let f = |v: &DVector<f64>| expected_log_joint(&params, &seq, &probs, &unflat(v), 1.0);

        let fd = fd_gradient(&f, &flat(&path), 1e-5);
        for t in 0..len {
            for i in 0..m {
                assert!(
                    (grad[t][i] - fd[t * m + i]).abs() < 1e-6,
                    "grad mismatch at ({t}, {i})"
                );
            }
        }

        // The precision must equal the negative Hessian.
        let hess = fd_hessian(&f, &flat(&path), 1e-4);
        for t in 0..len {
            for s in 0..len {
                for i in 0..m {
                    for j in 0..m {
                        let want = -hess[(t * m + i, s * m + j)];
                        let got = if t == s {
                            prec.diag[t][(i, j)]
                        } else if s == t + 1 {
                            prec.off[t][(i, j)]
                        } else if t == s + 1 {
                            prec.off[s][(j, i)]
                        } else {
                            0.0
                        };
                        assert!(
                            (got - want).abs() < 1e-4,
                            "precision mismatch at blocks ({t},{s}) entry ({i},{j}): {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn newton_ascends_and_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (k, m, n, len) = (3, 2, 1, 12);
        let params = random_params(&mut rng, k, m, n);
        let seq = random_sequence(&mut rng, len, m, n);
        let probs = random_mode_probs(&mut rng, len - 1, k);
        let cfg = FitConfig::default();
        let pre = Precomp::new(&params).unwrap();

        let start_obj = expected_log_joint(&params, &seq, &probs, &seq.obs().to_vec(), cfg.init_state_var);
        let post = smooth_sequence(&params, &pre, &seq, &probs, &cfg).unwrap();
        assert!(post.converged, "Newton should hit tolerance on a smooth problem");
        assert!(post.objective >= start_obj, "ascent must not decrease the objective");
        // At the optimum the gradient vanishes.
        let (grad, _) = gradient_and_precision(&params, &pre, &seq, &probs, &post.means, cfg.init_state_var);
        let gnorm = grad.iter().flat_map(|g| g.iter()).fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(gnorm < 1e-5, "gradient norm {gnorm}");
    }

    #[test]
    fn single_mode_posterior_matches_rts_smoother() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (m, n, len) = (2, 1, 30);
        let params = random_params(&mut rng, 1, m, n);
        let seq = random_sequence(&mut rng, len, m, n);
        let probs = vec![DVector::from_element(1, 1.0); len - 1];
        let cfg = FitConfig::default();

        let batch = TrajectoryBatch::new(vec![seq.clone()]);
        let posts = e_step_continuous(&params, &batch, &[ModePosterior { probs, pairs: vec![] }], &cfg).unwrap();
        let post = &posts[0];

        let model = LinearGaussian {
            a: params.modes[0].transition.clone(),
            b: params.modes[0].control.clone(),
            offset: params.modes[0].offset.clone(),
            process_cov: params.modes[0].noise_cov.clone(),
            emission_cov: params.emission_cov.clone(),
            init_mean: seq.obs()[0].clone(),
            init_cov: DMatrix::identity(m, m) * cfg.init_state_var,
        };
        let reference = rts_smoother(&model, seq.obs(), seq.controls());
        for t in 0..len {
            assert!(
                (&post.means[t] - &reference.means[t]).abs().max() < 1e-6,
                "mean mismatch at {t}"
            );
            assert!(
                (&post.covs[t] - &reference.covs[t]).abs().max() < 1e-6,
                "cov mismatch at {t}"
            );
        }
    }

    #[test]
    fn discrete_step_prefers_matching_mode() {
        // Mode 0 predicts the observed drift exactly; mode 1 predicts the
        // opposite drift. Responsibilities should favor mode 0 strongly.
        let m = 1;
        let mk = |drift: f64| ModeDynamics {
            transition: DMatrix::identity(m, m),
            control: DMatrix::zeros(m, 1),
            offset: DVector::from_element(m, drift),
            noise_cov: DMatrix::identity(m, m) * 0.01,
        };
        let params = RsldsParams {
            modes: vec![mk(0.5), mk(-0.5)],
            recurrence: Recurrence {
                state_weights: DMatrix::zeros(2, m),
                control_weights: DMatrix::zeros(2, 1),
                bias: DVector::zeros(2),
            },
            emission_cov: DMatrix::identity(m, m) * 0.01,
        };
        let obs: Vec<DVector<f64>> = (0..6).map(|t| DVector::from_element(1, 0.5 * t as f64)).collect();
        let controls = vec![DVector::zeros(1); 5];
        let batch = TrajectoryBatch::new(vec![Sequence::new(obs, controls)]);
        let cfg = FitConfig::default();
        let bootstrap = bootstrap_state_posterior(&batch);
        let mode_posts = e_step_discrete(&params, &batch, &bootstrap, &cfg).unwrap();
        for row in &mode_posts[0].probs {
            assert!(row[0] > 0.99, "mode 0 should dominate, got {row}");
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn covariance_corrections_lower_the_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (k, m, n, len) = (2, 2, 1, 8);
        let params = random_params(&mut rng, k, m, n);
        let seq = random_sequence(&mut rng, len, m, n);
        let probs = random_mode_probs(&mut rng, len - 1, k);
        let cfg = FitConfig::default();
        let batch = TrajectoryBatch::new(vec![seq.clone()]);
        let posts = e_step_continuous(
            &params,
            &batch,
            &[ModePosterior { probs: probs.clone(), pairs: vec![] }],
            &cfg,
        )
        .unwrap();
        let plug_in = expected_log_joint(&params, &seq, &probs, &posts[0].means, cfg.init_state_var);
        let corrected = expected_joint_with_covs(&params, &seq, &probs, &posts[0], cfg.init_state_var);
        assert!(corrected < plug_in, "corrections subtract positive traces");
    }
}
