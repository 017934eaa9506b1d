//! Exact marginal inference on a discrete chain with unary and pairwise
//! log potentials, via the forward-backward (sum-product) recursion in log
//! space. Used by the discrete smoothing step, where it runs over mode
//! sequences with data-dependent unary terms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;

/// Posterior marginals of a chain-structured categorical distribution.
#[derive(Debug, Clone)]
pub struct ChainMarginals {
    /// `unary[t][k] = p(z_t = k | potentials)`.
    pub unary: Vec<DVector<f64>>,
    /// `pairwise[t][(k, l)] = p(z_t = k, z_{t+1} = l | potentials)`.
    pub pairwise: Vec<DMatrix<f64>>,
    /// Log normalizing constant of the unnormalized chain distribution.
    pub log_partition: f64,
}

/// Runs forward-backward over `T = log_unary.len()` steps with `K` states.
/// `log_pairwise` has length `T - 1`; entry `t` couples `z_t` (row) with
/// `z_{t+1}` (column). Potentials may be `-inf` (forbidden assignments); the
/// call fails only if every full assignment is forbidden or a potential is
/// NaN.
pub fn forward_backward(
    log_unary: &[DVector<f64>],
    log_pairwise: &[DMatrix<f64>],
) -> Result<ChainMarginals> {
    let t_len = log_unary.len();
    assert!(t_len >= 1, "chain must have at least one step");
    assert_eq!(log_pairwise.len(), t_len - 1, "pairwise count must be T - 1");
    let k = log_unary[0].len();
    assert!(k >= 1, "chain needs at least one state");
    for (t, u) in log_unary.iter().enumerate() {
        assert_eq!(u.len(), k, "unary {t} dimension");
        if u.iter().any(|v| v.is_nan()) {
            return Err(Error::numerical("forward_backward", format!("NaN unary at step {t}")));
        }
    }
    for (t, p) in log_pairwise.iter().enumerate() {
        assert_eq!((p.nrows(), p.ncols()), (k, k), "pairwise {t} shape");
        if p.iter().any(|v| v.is_nan()) {
            return Err(Error::numerical("forward_backward", format!("NaN pairwise at step {t}")));
        }
    }

    let mut alpha: Vec<DVector<f64>> = Vec::with_capacity(t_len);
    alpha.push(log_unary[0].clone());
    for t in 0..t_len - 1 {
        let prev = &alpha[t];
        let next = DVector::from_fn(k, |l, _| {
            let terms: Vec<f64> = (0..k).map(|j| prev[j] + log_pairwise[t][(j, l)]).collect();
            log_unary[t + 1][l] + log_sum_exp(&terms)
        });
        alpha.push(next);
    }

    let mut beta: Vec<DVector<f64>> = vec![DVector::zeros(k); t_len];
    for t in (0..t_len - 1).rev() {
        beta[t] = DVector::from_fn(k, |j, _| {
            let terms: Vec<f64> = (0..k)
                .map(|l| log_pairwise[t][(j, l)] + log_unary[t + 1][l] + beta[t + 1][l])
                .collect();
            log_sum_exp(&terms)
        });
    }

    let last: Vec<f64> = alpha[t_len - 1].iter().cloned().collect();
    let log_partition = log_sum_exp(&last);
    if log_partition == f64::NEG_INFINITY {
        return Err(Error::numerical(
            "forward_backward",
            "all assignments have zero probability",
        ));
    }

    let mut unary = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let log_marg: Vec<f64> = (0..k).map(|j| alpha[t][j] + beta[t][j] - log_partition).collect();
        let norm = log_sum_exp(&log_marg);
        unary.push(DVector::from_fn(k, |j, _| (log_marg[j] - norm).exp()));
    }

    let mut pairwise = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len - 1 {
        let mut logs = DMatrix::zeros(k, k);
        for j in 0..k {
            for l in 0..k {
                logs[(j, l)] = alpha[t][j]
                    + log_pairwise[t][(j, l)]
                    + log_unary[t + 1][l]
                    + beta[t + 1][l]
                    - log_partition;
            }
        }
        let flat: Vec<f64> = logs.iter().cloned().collect();
        let norm = log_sum_exp(&flat);
        pairwise.push(logs.map(|v| (v - norm).exp()));
    }

    Ok(ChainMarginals {
        unary,
        pairwise,
        log_partition,
    })
}
