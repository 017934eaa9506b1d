//! Dense linear algebra helpers shared across the crate: stable softmax and
//! log-sum-exp, eigenvalue flooring for covariance estimates, and a block
//! tridiagonal symmetric positive definite factorization used by the Gaussian
//! smoothing step (solve, marginal covariances, adjacent cross covariances,
//! log determinant).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(m.nrows(), m.ncols(), "symmetrize needs a square matrix");
    (m + m.transpose()) * 0.5
}

/// Clamps the eigenvalues of a symmetric matrix to at least `floor`,
/// guaranteeing a usable covariance even from degenerate estimates.
pub fn spd_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    assert!(floor > 0.0, "spd floor must be positive");
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn log_softmax(logits: &DVector<f64>) -> DVector<f64> {
    let lse = log_sum_exp(logits.as_slice());
    logits.map(|v| v - lse)
}

pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    log_softmax(logits).map(f64::exp)
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(a.clone())
        .ok_or_else(|| Error::numerical("solve_spd", "matrix is not positive definite"))?;
    Ok(chol.solve(b))
}

pub fn cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone())
        .ok_or_else(|| Error::numerical("cholesky", "matrix is not positive definite"))
}

pub fn log_det_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Symmetric positive definite block tridiagonal matrix. `diag[t]` is the
/// t-th diagonal block; `off[t]` is the block coupling t and t+1 (the block
/// at position (t, t+1); position (t+1, t) holds its transpose).
pub struct BlockTridiag {
    pub diag: Vec<DMatrix<f64>>,
    pub off: Vec<DMatrix<f64>>,
}

impl BlockTridiag {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Forward block elimination. Fails if any Schur complement loses
    /// positive definiteness.
    pub fn factor(&self) -> Result<BlockFactor> {
        assert!(!self.diag.is_empty(), "empty block tridiagonal matrix");
        assert_eq!(
            self.off.len() + 1,
            self.diag.len(),
            "off-diagonal count must be one less than diagonal count"
        );
        let len = self.diag.len();
        let dim = self.diag[0].nrows();
        for (t, d) in self.diag.iter().enumerate() {
            assert_eq!((d.nrows(), d.ncols()), (dim, dim), "diag block {t} shape");
        }
        for (t, o) in self.off.iter().enumerate() {
            assert_eq!((o.nrows(), o.ncols()), (dim, dim), "off block {t} shape");
        }

        let mut factors: Vec<Cholesky<f64, Dyn>> = Vec::with_capacity(len);
        for t in 0..len {
            let schur = if t == 0 {
                self.diag[0].clone()
            } else {
                let solved = factors[t - 1].solve(&self.off[t - 1]);
                &self.diag[t] - self.off[t - 1].transpose() * solved
            };
            let chol = Cholesky::new(symmetrize(&schur)).ok_or_else(|| {
                Error::numerical(
                    "block tridiagonal factor",
                    format!("Schur complement at block {t} is not positive definite"),
                )
            })?;
            factors.push(chol);
        }
        Ok(BlockFactor {
            factors,
            off: self.off.clone(),
        })
    }
}

/// Result of factoring a [`BlockTridiag`]: per-block Cholesky factors of the
/// Schur complements plus the original off-diagonal blocks.
pub struct BlockFactor {
    factors: Vec<Cholesky<f64, Dyn>>,
    off: Vec<DMatrix<f64>>,
}

impl BlockFactor {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Solves `P x = rhs` by forward then backward substitution.
    pub fn solve(&self, rhs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let len = self.factors.len();
        assert_eq!(rhs.len(), len, "rhs block count mismatch");

        let mut forward: Vec<DVector<f64>> = Vec::with_capacity(len);
        for t in 0..len {
            let c = if t == 0 {
                rhs[0].clone()
            } else {
                &rhs[t] - self.off[t - 1].transpose() * self.factors[t - 1].solve(&forward[t - 1])
            };
            forward.push(c);
        }

        let mut x = vec![DVector::zeros(0); len];
        x[len - 1] = self.factors[len - 1].solve(&forward[len - 1]);
        for t in (0..len - 1).rev() {
            let adjusted = &forward[t] - &self.off[t] * &x[t + 1];
            x[t] = self.factors[t].solve(&adjusted);
        }
        x
    }

    /// Log determinant of the full matrix: sum of the Schur complement log
    /// determinants.
    pub fn log_det(&self) -> f64 {
        self.factors.iter().map(log_det_cholesky).sum()
    }

    /// Diagonal blocks of the inverse and the cross blocks
    /// `cov(t, t+1)` adjacent to the diagonal, via the backward recursion on
    /// the forward elimination factors.
    pub fn marginals(&self) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let len = self.factors.len();
        let mut covs = vec![DMatrix::zeros(0, 0); len];
        let mut cross = vec![DMatrix::zeros(0, 0); len.saturating_sub(1)];

        covs[len - 1] = symmetrize(&self.factors[len - 1].inverse());
        for t in (0..len - 1).rev() {
            let u = self.factors[t].solve(&self.off[t]);
            let inv = self.factors[t].inverse();
            covs[t] = symmetrize(&(&inv + &u * &covs[t + 1] * u.transpose()));
            cross[t] = -(&u * &covs[t + 1]);
        }
        (covs, cross)
    }
}
