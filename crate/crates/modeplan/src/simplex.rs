//! Self-contained dense two-phase simplex for small box-constrained linear
//! programs:
//!
//! ```text
//! minimize    c . x
//! subject to  a_i . x <= b_i   (i = 1..m)
//!             lower <= x <= upper
//! ```
//!
//! Bland's rule is used for both the entering and leaving choices, so the
//! method terminates without cycling; a pivot cap guards against numerical
//! stalls regardless. The finite box means a well-posed problem is never
//! unbounded. Problems of this shape (a handful of variables, tens of rows)
//! arise when testing whether two softmax regions share a boundary.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A box-constrained linear program; see the module docs for the form.
#[derive(Debug, Clone)]
pub struct BoxedLp {
    pub objective: DVector<f64>,
    /// Inequality rows `a_i . x <= rhs_i`.
    pub rows: Vec<DVector<f64>>,
    pub rhs: Vec<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpSolution {
    Optimal { value: f64, point: DVector<f64> },
    Infeasible,
}

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;

struct Tableau {
    a: DMatrix<f64>,
    rhs: DVector<f64>,
    basis: Vec<usize>,
    n_struct: usize,
    n_art: usize,
}

impl Tableau {
    fn n_cols(&self) -> usize {
        self.a.ncols()
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let pivot = self.a[(row, col)];
        let mut prow = self.a.row(row) / pivot;
        let prhs = self.rhs[row] / pivot;
        self.a.row_mut(row).copy_from(&prow);
        self.rhs[row] = prhs;
        prow = self.a.row(row).into_owned();
        for i in 0..self.a.nrows() {
            if i == row {
                continue;
            }
            let factor = self.a[(i, col)];
            if factor != 0.0 {
                let updated = self.a.row(i) - &prow * factor;
                self.a.row_mut(i).copy_from(&updated);
                self.rhs[i] -= factor * prhs;
            }
        }
        self.basis[row] = col;
    }

    /// Runs simplex with the given cost vector over the allowed columns.
    /// Returns the number of pivots spent.
    fn run_phase(
        &mut self,
        cost: &DVector<f64>,
        col_allowed: impl Fn(usize) -> bool,
        pivot_budget: usize,
    ) -> Result<usize> {
        let mut spent = 0usize;
        loop {
            // Reduced costs r = c - c_B . B^-1 A, computed fresh each pass to
            // avoid drift from incremental objective-row updates.
            let mut reduced = cost.clone();
            for (row, &b) in self.basis.iter().enumerate() {
                let cb = cost[b];
                if cb != 0.0 {
                    let arow = self.a.row(row);
                    for j in 0..self.n_cols() {
                        reduced[j] -= cb * arow[j];
                    }
                }
            }

            let entering = (0..self.n_cols())
                .find(|&j| col_allowed(j) && !self.basis.contains(&j) && reduced[j] < -PIVOT_TOL);
            let Some(col) = entering else {
                return Ok(spent);
            };

            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.a.nrows() {
                let aij = self.a[(i, col)];
                if aij > PIVOT_TOL {
                    let ratio = self.rhs[i] / aij;
                    let better = match leave {
                        None => true,
                        Some((best_row, best_ratio)) => {
                            ratio < best_ratio - PIVOT_TOL
                                || (ratio < best_ratio + PIVOT_TOL
                                    && self.basis[i] < self.basis[best_row])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((row, _)) = leave else {
                return Err(Error::LinearProgram(
                    "unbounded direction in a box-constrained program".into(),
                ));
            };

            self.pivot(row, col);
            spent += 1;
            if spent > pivot_budget {
                return Err(Error::LinearProgram("pivot budget exhausted".into()));
            }
        }
    }
}

/// Solves the program. `pivot_cap` bounds total pivots across both phases.
pub fn solve_boxed(lp: &BoxedLp, pivot_cap: usize) -> Result<LpSolution> {
    let n = lp.objective.len();
    assert!(n >= 1, "program needs at least one variable");
    assert_eq!(lp.lower.len(), n, "lower bound dimension");
    assert_eq!(lp.upper.len(), n, "upper bound dimension");
    assert_eq!(lp.rows.len(), lp.rhs.len(), "row/rhs count mismatch");
    for (i, row) in lp.rows.iter().enumerate() {
        assert_eq!(row.len(), n, "row {i} dimension");
    }
    for d in 0..n {
        if lp.lower[d] > lp.upper[d] {
            return Ok(LpSolution::Infeasible);
        }
    }

    // Shift to s = x - lower >= 0; append the upper bounds as ordinary rows.
    let range = &lp.upper - &lp.lower;
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(lp.rows.len() + n);
    let mut rhs: Vec<f64> = Vec::with_capacity(lp.rows.len() + n);
    for (row, &b) in lp.rows.iter().zip(&lp.rhs) {
        rows.push(row.clone());
        rhs.push(b - row.dot(&lp.lower));
    }
    for d in 0..n {
        let mut e = DVector::zeros(n);
        e[d] = 1.0;
        rows.push(e);
        rhs.push(range[d]);
    }

    let m = rows.len();
    let n_art = rhs.iter().filter(|&&b| b < 0.0).count();
    let mut a = DMatrix::zeros(m, n + m + n_art);
    let mut brhs = DVector::zeros(m);
    let mut basis = vec![0usize; m];
    let mut art_next = 0usize;
    for i in 0..m {
        let (sign, b) = if rhs[i] < 0.0 { (-1.0, -rhs[i]) } else { (1.0, rhs[i]) };
        for j in 0..n {
            a[(i, j)] = sign * rows[i][j];
        }
        a[(i, n + i)] = sign;
        brhs[i] = b;
        if sign < 0.0 {
            let art_col = n + m + art_next;
            a[(i, art_col)] = 1.0;
            basis[i] = art_col;
            art_next += 1;
        } else {
            basis[i] = n + i;
        }
    }

    let mut tab = Tableau {
        a,
        rhs: brhs,
        basis,
        n_struct: n,
        n_art,
    };

    let total_cols = tab.n_cols();
    let mut budget = pivot_cap;

    if n_art > 0 {
        let mut phase1_cost = DVector::zeros(total_cols);
        for j in (total_cols - n_art)..total_cols {
            phase1_cost[j] = 1.0;
        }
        let spent = tab.run_phase(&phase1_cost, |_| true, budget)?;
        budget = budget.saturating_sub(spent);
        let infeasibility: f64 = tab
            .basis
            .iter()
            .enumerate()
            .filter(|(_, &b)| b >= total_cols - n_art)
            .map(|(i, _)| tab.rhs[i])
            .sum();
        if infeasibility > FEAS_TOL {
            return Ok(LpSolution::Infeasible);
        }
    }

    let mut phase2_cost = DVector::zeros(total_cols);
    for j in 0..n {
        phase2_cost[j] = lp.objective[j];
    }
    let art_start = total_cols - tab.n_art;
    tab.run_phase(&phase2_cost, |j| j < art_start, budget)?;

    let mut x = lp.lower.clone();
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < tab.n_struct {
            x[b] += tab.rhs[i];
        }
    }
    let value = lp.objective.dot(&x);
    Ok(LpSolution::Optimal { value, point: x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_row_slice(&[a, b])
    }

    #[test]
    fn box_only_minimum_is_corner() {
        let lp = BoxedLp {
            objective: DVector::from_row_slice(&[1.0]),
            rows: vec![],
            rhs: vec![],
            lower: DVector::from_row_slice(&[-2.0]),
            upper: DVector::from_row_slice(&[3.0]),
        };
        match solve_boxed(&lp, 100).unwrap() {
            LpSolution::Optimal { value, point } => {
                assert!((value + 2.0).abs() < 1e-9);
                assert!((point[0] + 2.0).abs() < 1e-9);
            }
            LpSolution::Infeasible => panic!("feasible program reported infeasible"),
        }
    }

    #[test]
    fn simple_two_variable_program() {
        // min -x - y subject to x + y <= 1 over [0, 5]^2: optimum -1.
        let lp = BoxedLp {
            objective: vec2(-1.0, -1.0),
            rows: vec![vec2(1.0, 1.0)],
            rhs: vec![1.0],
            lower: vec2(0.0, 0.0),
            upper: vec2(5.0, 5.0),
        };
        match solve_boxed(&lp, 100).unwrap() {
            LpSolution::Optimal { value, point } => {
                assert!((value + 1.0).abs() < 1e-9);
                assert!((point[0] + point[1] - 1.0).abs() < 1e-9);
            }
            LpSolution::Infeasible => panic!("feasible program reported infeasible"),
        }
    }

    #[test]
    fn negative_rhs_goes_through_phase_one() {
        // x >= 0.5 encoded as -x <= -0.5; minimize x.
        let lp = BoxedLp {
            objective: DVector::from_row_slice(&[1.0]),
            rows: vec![DVector::from_row_slice(&[-1.0])],
            rhs: vec![-0.5],
            lower: DVector::from_row_slice(&[0.0]),
            upper: DVector::from_row_slice(&[1.0]),
        };
        match solve_boxed(&lp, 100).unwrap() {
            LpSolution::Optimal { value, .. } => assert!((value - 0.5).abs() < 1e-9),
            LpSolution::Infeasible => panic!("feasible program reported infeasible"),
        }
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let lp = BoxedLp {
            objective: DVector::from_row_slice(&[1.0]),
            rows: vec![DVector::from_row_slice(&[1.0])],
            rhs: vec![-1.0],
            lower: DVector::from_row_slice(&[0.0]),
            upper: DVector::from_row_slice(&[1.0]),
        };
        assert_eq!(solve_boxed(&lp, 100).unwrap(), LpSolution::Infeasible);
    }

    #[test]
    fn redundant_rows_are_harmless() {
        let lp = BoxedLp {
            objective: vec2(-1.0, 0.0),
            rows: vec![vec2(1.0, 0.0), vec2(1.0, 0.0), vec2(2.0, 0.0)],
            rhs: vec![0.5, 0.5, 1.0],
            lower: vec2(0.0, 0.0),
            upper: vec2(1.0, 1.0),
        };
        match solve_boxed(&lp, 100).unwrap() {
            LpSolution::Optimal { value, .. } => assert!((value + 0.5).abs() < 1e-9),
            LpSolution::Infeasible => panic!("feasible program reported infeasible"),
        }
    }

    #[test]
    fn zero_width_box_dimension() {
        let lp = BoxedLp {
            objective: vec2(1.0, 1.0),
            rows: vec![],
            rhs: vec![],
            lower: vec2(0.3, -1.0),
            upper: vec2(0.3, 1.0),
        };
        match solve_boxed(&lp, 100).unwrap() {
            LpSolution::Optimal { value, point } => {
                assert!((point[0] - 0.3).abs() < 1e-9);
                assert!((value - (0.3 - 1.0)).abs() < 1e-9);
            }
            LpSolution::Infeasible => panic!("feasible program reported infeasible"),
        }
    }

    #[test]
    fn random_programs_agree_with_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let grid = 201usize;
        for _case in 0..60 {
            let n_rows = rng.random_range(0..5);
            let rows: Vec<DVector<f64>> = (0..n_rows)
                .map(|_| vec2(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let rhs: Vec<f64> = (0..n_rows).map(|_| rng.random_range(-0.5..1.0)).collect();
            let lp = BoxedLp {
                objective: vec2(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                rows: rows.clone(),
                rhs: rhs.clone(),
                lower: vec2(-1.0, -1.0),
                upper: vec2(1.0, 1.0),
            };

            let mut grid_best: Option<f64> = None;
            for gi in 0..grid {
                for gj in 0..grid {
                    let x = -1.0 + 2.0 * gi as f64 / (grid - 1) as f64;
                    let y = -1.0 + 2.0 * gj as f64 / (grid - 1) as f64;
                    let feasible = rows
                        .iter()
                        .zip(&rhs)
                        .all(|(a, &b)| a[0] * x + a[1] * y <= b + 1e-12);
                    if feasible {
                        let v = lp.objective[0] * x + lp.objective[1] * y;
                        grid_best = Some(grid_best.map_or(v, |g: f64| g.min(v)));
                    }
                }
            }

            match solve_boxed(&lp, 10_000).unwrap() {
                LpSolution::Optimal { value, point } => {
                    // The solution must satisfy every constraint and beat the
                    // grid (up to grid resolution).
                    for (a, &b) in rows.iter().zip(&rhs) {
                        assert!(a.dot(&point) <= b + 1e-8);
                    }
                    assert!(point[0] >= -1.0 - 1e-9 && point[0] <= 1.0 + 1e-9);
                    assert!(point[1] >= -1.0 - 1e-9 && point[1] <= 1.0 + 1e-9);
                    if let Some(g) = grid_best {
                        assert!(value <= g + 1e-6, "simplex {value} worse than grid {g}");
                    }
                }
                LpSolution::Infeasible => {
                    assert!(grid_best.is_none(), "grid found a feasible point");
                }
            }
        }
    }
}
