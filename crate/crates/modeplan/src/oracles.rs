//! Independent reference implementations used to validate the fast paths:
//! brute-force chain enumeration, a classical RTS smoother, Riccati fixed
//! points, grid-based region adjacency, quadrature for Dirichlet information
//! gain, exact one-step policy scores, and finite differences. Each oracle
//! takes a different computational route than the code it checks.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::chain::ChainMarginals;
use crate::planner::DiscreteMdp;

/// Exact chain marginals by enumerating all `K^T` assignments. Only viable
/// for tiny instances; the point is that it shares no code with the
/// forward-backward recursion.
pub fn enumerate_chain(log_unary: &[DVector<f64>], log_pairwise: &[DMatrix<f64>]) -> ChainMarginals {
    let t_len = log_unary.len();
    let k = log_unary[0].len();
    let total = k.pow(t_len as u32);
    assert!(total <= 2_000_000, "enumeration oracle given too large an instance");

    let mut assignment = vec![0usize; t_len];
    let mut logs: Vec<f64> = Vec::with_capacity(total);
    let mut assigns: Vec<Vec<usize>> = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        for slot in assignment.iter_mut() {
            *slot = rem % k;
            rem /= k;
        }
        let mut lw = 0.0;
        for (t, &z) in assignment.iter().enumerate() {
            lw += log_unary[t][z];
        }
        for t in 0..t_len - 1 {
            lw += log_pairwise[t][(assignment[t], assignment[t + 1])];
        }
        logs.push(lw);
        assigns.push(assignment.clone());
    }

    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let log_partition = max + z.ln();

    let mut unary = vec![DVector::zeros(k); t_len];
    let mut pairwise = vec![DMatrix::zeros(k, k); t_len - 1];
    for (w, a) in weights.iter().zip(&assigns) {
        let p = w / z;
        for (t, &zt) in a.iter().enumerate() {
            unary[t][zt] += p;
        }
        for t in 0..t_len - 1 {
            pairwise[t][(a[t], a[t + 1])] += p;
        }
    }
    ChainMarginals {
        unary,
        pairwise,
        log_partition,
    }
}

/// A single-mode linear Gaussian state space model with identity emission.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub process_cov: DMatrix<f64>,
    pub emission_cov: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SmootherResult {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

/// Classical Kalman filter plus Rauch-Tung-Striebel smoother. The first
/// observation is incorporated through the emission model on top of the
/// initial state prior, matching the joint density the variational step
/// optimizes.
pub fn rts_smoother(
    model: &LinearGaussian,
    obs: &[DVector<f64>],
    controls: &[DVector<f64>],
) -> SmootherResult {
    let t_len = obs.len();
    assert!(t_len >= 1);
    assert_eq!(controls.len(), t_len - 1, "one control per transition");
    let dim = model.init_mean.len();

    let mut filt_means: Vec<DVector<f64>> = Vec::with_capacity(t_len);
    let mut filt_covs: Vec<DMatrix<f64>> = Vec::with_capacity(t_len);
    let mut pred_means: Vec<DVector<f64>> = Vec::with_capacity(t_len);
    let mut pred_covs: Vec<DMatrix<f64>> = Vec::with_capacity(t_len);

    let mut m_pred = model.init_mean.clone();
    let mut p_pred = model.init_cov.clone();
    for t in 0..t_len {
        pred_means.push(m_pred.clone());
        pred_covs.push(p_pred.clone());

        let innovation_cov = &p_pred + &model.emission_cov;
        let gain = &p_pred
            * innovation_cov
                .clone()
                .try_inverse()
                .expect("innovation covariance invertible");
        let m_filt = &m_pred + &gain * (&obs[t] - &m_pred);
        let p_filt = (DMatrix::identity(dim, dim) - &gain) * &p_pred;
        filt_means.push(m_filt.clone());
        filt_covs.push(p_filt.clone());

        if t + 1 < t_len {
            m_pred = &model.a * &m_filt + &model.b * &controls[t] + &model.offset;
            p_pred = &model.a * &p_filt * model.a.transpose() + &model.process_cov;
        }
    }

    let mut means = vec![DVector::zeros(dim); t_len];
    let mut covs = vec![DMatrix::zeros(dim, dim); t_len];
    means[t_len - 1] = filt_means[t_len - 1].clone();
    covs[t_len - 1] = filt_covs[t_len - 1].clone();
    for t in (0..t_len - 1).rev() {
        let smoother_gain = &filt_covs[t]
            * model.a.transpose()
            * pred_covs[t + 1]
                .clone()
                .try_inverse()
                .expect("predicted covariance invertible");
        means[t] = &filt_means[t] + &smoother_gain * (&means[t + 1] - &pred_means[t + 1]);
        covs[t] = &filt_covs[t]
            + &smoother_gain * (&covs[t + 1] - &pred_covs[t + 1]) * smoother_gain.transpose();
    }
    SmootherResult { means, covs }
}

/// Discrete algebraic Riccati fixed point by plain iteration from `q`.
/// Converges for stabilizable systems; iteration count is capped.
pub fn dare_fixed_point(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut s = q.clone();
    for _ in 0..1_000_000 {
        let gain_denom = r + b.transpose() * &s * b;
        let inv = gain_denom.try_inverse().expect("gain denominator invertible");
        let next = q + a.transpose() * &s * a
            - a.transpose() * &s * b * &inv * b.transpose() * &s * a;
        let delta = (&next - &s).abs().max();
        s = next;
        if delta < 1e-14 * (1.0 + s.abs().max()) {
            break;
        }
    }
    s
}

/// Infinite-horizon gain for the fixed point `s` of the Riccati equation.
pub fn dare_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> DMatrix<f64> {
    let denom = (r + b.transpose() * s * b)
        .try_inverse()
        .expect("gain denominator invertible");
    -(denom * b.transpose() * s * a)
}

/// Region structure read off a dense lattice over the box: every lattice
/// point is labeled with its argmax logit region, and two regions count as
/// adjacent when some lattice edge joins them. `edge_counts` (number of
/// lattice edges per pair) and `near_pairs` (label pairs within Chebyshev
/// radius two of each other) let callers identify knife-edge geometry that a
/// finite lattice cannot classify reliably.
#[derive(Debug)]
pub struct GridPartitionOracle {
    pub dims: Vec<usize>,
    pub labels: Vec<usize>,
    pub present: Vec<bool>,
    pub adjacent_pairs: BTreeSet<(usize, usize)>,
    pub edge_counts: BTreeMap<(usize, usize), usize>,
    pub near_pairs: BTreeSet<(usize, usize)>,
}

impl GridPartitionOracle {
    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        i == j || self.adjacent_pairs.contains(&(i.min(j), i.max(j)))
    }

    pub fn is_near(&self, i: usize, j: usize) -> bool {
        i == j || self.near_pairs.contains(&(i.min(j), i.max(j)))
    }
}

pub fn grid_partition_oracle(
    weights: &DMatrix<f64>,
    bias: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    resolution: usize,
) -> GridPartitionOracle {
    let k = weights.nrows();
    let dim = weights.ncols();
    assert!(resolution >= 2);
    assert_eq!(bias.len(), k);
    assert_eq!(lower.len(), dim);
    assert_eq!(upper.len(), dim);

    let dims = vec![resolution; dim];
    let total: usize = dims.iter().product();
    let coord = |flat: usize| -> Vec<usize> {
        let mut rem = flat;
        let mut c = vec![0usize; dim];
        for d in 0..dim {
            c[d] = rem % resolution;
            rem /= resolution;
        }
        c
    };
    let point = |c: &[usize]| -> DVector<f64> {
        DVector::from_fn(dim, |d, _| {
            lower[d] + (upper[d] - lower[d]) * c[d] as f64 / (resolution - 1) as f64
        })
    };

    let mut labels = vec![0usize; total];
    let mut present = vec![false; k];
    for flat in 0..total {
        let x = point(&coord(flat));
        let logits = weights * &x + bias;
        let mut best = 0usize;
        for j in 1..k {
            if logits[j] > logits[best] {
                best = j;
            }
        }
        labels[flat] = best;
        present[best] = true;
    }

    let mut edge_counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for flat in 0..total {
        let c = coord(flat);
        for d in 0..dim {
            if c[d] + 1 < resolution {
                let neighbor = flat + resolution.pow(d as u32);
                let (a, b) = (labels[flat], labels[neighbor]);
                if a != b {
                    let key = (a.min(b), a.max(b));
                    *edge_counts.entry(key).or_insert(0) += 1;
                }
            }
        }
    }
    let adjacent_pairs: BTreeSet<(usize, usize)> = edge_counts.keys().cloned().collect();

    // Label pairs that come within Chebyshev distance two anywhere; such
    // pairs may or may not touch and a lattice cannot tell.
    let mut near_pairs = BTreeSet::new();
    let radius = 2isize;
    let side = (2 * radius + 1) as usize;
    let offset_total = side.pow(dim as u32);
    for flat in 0..total {
        let c = coord(flat);
        for off_flat in 0..offset_total {
            let mut rem = off_flat;
            let mut neighbor = Vec::with_capacity(dim);
            let mut valid = true;
            for d in 0..dim {
                let offset = (rem % side) as isize - radius;
                rem /= side;
                let v = c[d] as isize + offset;
                if v < 0 || v >= resolution as isize {
                    valid = false;
                    break;
                }
                neighbor.push(v as usize);
            }
            if !valid {
                continue;
            }
            let mut nflat = 0usize;
            for d in (0..dim).rev() {
                nflat = nflat * resolution + neighbor[d];
            }
            let (a, b) = (labels[flat], labels[nflat]);
            if a != b {
                near_pairs.insert((a.min(b), a.max(b)));
            }
        }
    }

    GridPartitionOracle {
        dims,
        labels,
        present,
        adjacent_pairs,
        edge_counts,
        near_pairs,
    }
}

/// `E[ln x]` under `Beta(a, b)` by composite Simpson quadrature after the
/// substitution `x = sin^2(theta)`, which removes both endpoint
/// singularities. The normalizer is integrated the same way, so no gamma
/// function evaluations are involved.
pub fn beta_log_moment_quadrature(a: f64, b: f64, intervals: usize) -> f64 {
    assert!(a > 0.5 && b > 0.25, "quadrature assumes mild exponents");
    assert!(intervals >= 2 && intervals % 2 == 0);
    let h = std::f64::consts::FRAC_PI_2 / intervals as f64;
    let mut numer = 0.0;
    let mut denom = 0.0;
    for i in 0..=intervals {
        let theta = h * i as f64;
        let (sin, cos) = theta.sin_cos();
        let weight = if i == 0 || i == intervals {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        // density kernel under the substitution: sin^(2a-1) cos^(2b-1) * 2
        let kernel = sin.powf(2.0 * a - 1.0) * cos.powf(2.0 * b - 1.0) * 2.0;
        if kernel.is_finite() && kernel > 0.0 {
            let log_x = 2.0 * sin.ln();
            denom += weight * kernel;
            if log_x.is_finite() {
                numer += weight * kernel * log_x;
            }
        }
    }
    numer / denom
}

/// KL divergence `KL(Dir(alpha + e_j) || Dir(alpha))` via quadrature: the
/// only non-algebraic piece is `E[ln p_j]` under the updated Dirichlet, whose
/// marginal is `Beta(alpha_j + 1, alpha_0 - alpha_j)`.
pub fn dirichlet_update_kl_quadrature(alpha: &DVector<f64>, j: usize) -> f64 {
    let total: f64 = alpha.sum();
    let a = alpha[j] + 1.0;
    let b = total - alpha[j];
    (total / alpha[j]).ln() + beta_log_moment_quadrature(a, b, 20_000)
}

/// Exact mean and variance of the single-step policy score that the Monte
/// Carlo evaluator estimates: enumerate the successor distribution of
/// (state, action) and accumulate the per-rollout statistic exactly.
pub fn exact_one_step_score(
    mdp: &DiscreteMdp,
    state: usize,
    action: usize,
    info_gain_weight: f64,
    entropy_weight: f64,
) -> (f64, f64) {
    let p = mdp.predictive(state, action);
    let ig = mdp.expected_info_gain(state, action);
    let pref = mdp.preference();
    let mut mean = 0.0;
    let mut second = 0.0;
    for s_next in 0..p.len() {
        let prob = p[s_next];
        if prob <= 0.0 {
            continue;
        }
        let g = -(pref[s_next] + info_gain_weight * ig + entropy_weight * (-prob.ln()));
        mean += prob * g;
        second += prob * g * g;
    }
    (mean, (second - mean * mean).max(0.0))
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[i] += h;
        lo[i] -= h;
        (f(&hi) - f(&lo)) / (2.0 * h)
    })
}

/// Central finite-difference Hessian of a scalar function.
pub fn fd_hessian(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut pp = x.clone();
            let mut pm = x.clone();
            let mut mp = x.clone();
            let mut mm = x.clone();
            pp[i] += h;
            pp[j] += h;
            pm[i] += h;
            pm[j] -= h;
            mp[i] -= h;
            mp[j] += h;
            mm[i] -= h;
            mm[j] -= h;
            hess[(i, j)] = (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * h * h);
        }
    }
    hess
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dare_matches_scalar_closed_form() {
        // Scalar fixed point of s = q + a^2 s r / (r + s) with a=0.9, q=r=1:
        // s^2 - 0.81 s - 1 = 0.
        let a = DMatrix::from_row_slice(1, 1, &[0.9]);
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        let q = DMatrix::from_row_slice(1, 1, &[1.0]);
        let r = DMatrix::from_row_slice(1, 1, &[1.0]);
        let s = dare_fixed_point(&a, &b, &q, &r);
        let want = (0.81 + (0.81f64 * 0.81 + 4.0).sqrt()) / 2.0;
        assert!((s[(0, 0)] - want).abs() < 1e-10);
    }

    #[test]
    fn smoother_tracks_exact_observations() {
        // Nearly noiseless model: smoothed means sit on the observations.
        let dim = 2;
        let model = LinearGaussian {
            a: DMatrix::identity(dim, dim),
            b: DMatrix::zeros(dim, 1),
            offset: DVector::zeros(dim),
            process_cov: DMatrix::identity(dim, dim) * 1e-4,
            emission_cov: DMatrix::identity(dim, dim) * 1e-10,
            init_mean: DVector::zeros(dim),
            init_cov: DMatrix::identity(dim, dim),
        };
        let obs: Vec<DVector<f64>> = (0..5)
            .map(|t| DVector::from_row_slice(&[t as f64 * 0.01, -(t as f64) * 0.02]))
            .collect();
        let controls = vec![DVector::zeros(1); 4];
        let out = rts_smoother(&model, &obs, &controls);
        for (m, y) in out.means.iter().zip(&obs) {
            assert!((m - y).abs().max() < 1e-6);
        }
    }

    #[test]
    fn grid_oracle_labels_three_slabs() {
        // Three vertical slabs on [-3, 3]: boundaries at -1 and +1.
        let weights = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let bias = DVector::from_row_slice(&[-1.0, 0.0, -1.0]);
        let lower = DVector::from_row_slice(&[-3.0]);
        let upper = DVector::from_row_slice(&[3.0]);
        let oracle = grid_partition_oracle(&weights, &bias, &lower, &upper, 301);
        assert!(oracle.present.iter().all(|&p| p));
        assert!(oracle.adjacent_pairs.contains(&(0, 1)));
        assert!(oracle.adjacent_pairs.contains(&(1, 2)));
        assert!(!oracle.adjacent_pairs.contains(&(0, 2)));
    }

    #[test]
    fn beta_quadrature_matches_uniform_case() {
        // Beta(1, 1) is uniform: E[ln x] = -1 exactly.
        let got = beta_log_moment_quadrature(1.0, 1.0, 20_000);
        assert!((got + 1.0).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn beta_quadrature_matches_integer_case() {
        // Beta(2, 1): density 2x, E[ln x] = -1/2.
        let got = beta_log_moment_quadrature(2.0, 1.0, 20_000);
        assert!((got + 0.5).abs() < 1e-7, "got {got}");
    }

    #[test]
    fn fd_gradient_matches_quadratic() {
        let f = |x: &DVector<f64>| x[0] * x[0] + 3.0 * x[0] * x[1];
        let x = DVector::from_row_slice(&[0.7, -0.2]);
        let g = fd_gradient(&f, &x, 1e-5);
        assert!((g[0] - (2.0 * 0.7 - 0.6)).abs() < 1e-8);
        assert!((g[1] - 3.0 * 0.7).abs() < 1e-8);
    }
}
