//! Polyhedral decomposition of the joint state-control box induced by the
//! gating network: cell `k` is where logit `k` is the maximum. Cell adjacency
//! is decided exactly (up to a small tolerance) with a linear program per
//! ordered pair, so the discrete layer only ever proposes moves between
//! regions that genuinely share a boundary inside the box.

use nalgebra::{DMatrix, DVector};

use crate::config::PartitionConfig;
use crate::error::Result;
use crate::par::par_map_slice;
use crate::rslds::RsldsParams;
use crate::simplex::{solve_boxed, BoxedLp, LpSolution};

/// Linear multi-class partition of the box `[lower, upper]` in the joint
/// `[state; control]` coordinates.
#[derive(Debug, Clone)]
pub struct SoftmaxPartition {
    /// `num_regions x (state_dim + control_dim)` joint weight rows.
    weights: DMatrix<f64>,
    bias: DVector<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    state_dim: usize,
    control_dim: usize,
}

/// Symmetric adjacency flags with a true diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    regions: usize,
    flags: Vec<bool>,
}

impl AdjacencyMatrix {
    /// Builds the symmetric closure of the given unordered pairs; the
    /// diagonal is always true.
    pub fn from_pairs(regions: usize, pairs: &[(usize, usize)]) -> AdjacencyMatrix {
        let mut flags = vec![false; regions * regions];
        for i in 0..regions {
            flags[i * regions + i] = true;
        }
        for &(i, j) in pairs {
            assert!(i < regions && j < regions);
            flags[i * regions + j] = true;
            flags[j * regions + i] = true;
        }
        AdjacencyMatrix { regions, flags }
    }

    pub fn num_regions(&self) -> usize {
        self.regions
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.flags[i * self.regions + j]
    }

    /// Distinct unordered adjacent pairs, `i < j`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.regions {
            for j in (i + 1)..self.regions {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Regions reachable from `i` in one move, including `i` itself.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.regions).filter(|&j| self.get(i, j)).collect()
    }
}

impl SoftmaxPartition {
    /// Builds the partition from gating parameters and per-coordinate bounds
    /// on states and controls.
    pub fn from_params(
        params: &RsldsParams,
        state_lower: &DVector<f64>,
        state_upper: &DVector<f64>,
        control_lower: &DVector<f64>,
        control_upper: &DVector<f64>,
    ) -> SoftmaxPartition {
        let k = params.num_modes();
        let m = params.state_dim();
        let n = params.control_dim();
        assert_eq!(state_lower.len(), m);
        assert_eq!(state_upper.len(), m);
        assert_eq!(control_lower.len(), n);
        assert_eq!(control_upper.len(), n);
        let mut weights = DMatrix::zeros(k, m + n);
        weights
            .view_mut((0, 0), (k, m))
            .copy_from(&params.recurrence.state_weights);
        weights
            .view_mut((0, m), (k, n))
            .copy_from(&params.recurrence.control_weights);
        let mut lower = DVector::zeros(m + n);
        lower.rows_mut(0, m).copy_from(state_lower);
        lower.rows_mut(m, n).copy_from(control_lower);
        let mut upper = DVector::zeros(m + n);
        upper.rows_mut(0, m).copy_from(state_upper);
        upper.rows_mut(m, n).copy_from(control_upper);
        SoftmaxPartition {
            weights,
            bias: params.recurrence.bias.clone(),
            lower,
            upper,
            state_dim: m,
            control_dim: n,
        }
    }

    /// Raw construction in joint coordinates, mostly for tests.
    pub fn from_joint(
        weights: DMatrix<f64>,
        bias: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
        state_dim: usize,
    ) -> SoftmaxPartition {
        let joint = weights.ncols();
        assert!(state_dim <= joint);
        assert_eq!(weights.nrows(), bias.len());
        assert_eq!(lower.len(), joint);
        assert_eq!(upper.len(), joint);
        SoftmaxPartition {
            control_dim: joint - state_dim,
            weights,
            bias,
            lower,
            upper,
            state_dim,
        }
    }

    pub fn num_regions(&self) -> usize {
        self.bias.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn joint_dim(&self) -> usize {
        self.state_dim + self.control_dim
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    /// Joint logit weights, one row per region.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn joint(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.state_dim);
        assert_eq!(u.len(), self.control_dim);
        let mut v = DVector::zeros(self.joint_dim());
        v.rows_mut(0, self.state_dim).copy_from(x);
        v.rows_mut(self.state_dim, self.control_dim).copy_from(u);
        v
    }

    pub fn logits(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.weights * v + &self.bias
    }

    /// Region label of a joint point; ties go to the lowest index.
    pub fn region_of_joint(&self, v: &DVector<f64>) -> usize {
        let logits = self.logits(v);
        let mut best = 0usize;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        best
    }

    pub fn region_of(&self, x: &DVector<f64>, u: &DVector<f64>) -> usize {
        self.region_of_joint(&self.joint(x, u))
    }

    /// True when cells `i` and `j` share boundary inside the box: some point
    /// of cell `i` brings logit `j` within tolerance of logit `i`. An empty
    /// cell is adjacent to nothing.
    pub fn is_adjacent(&self, i: usize, j: usize, cfg: &PartitionConfig) -> Result<bool> {
        let k = self.num_regions();
        assert!(i < k && j < k);
        if i == j {
            return Ok(true);
        }
        let objective = (self.weights.row(i) - self.weights.row(j)).transpose();
        let mut rows = Vec::with_capacity(k - 1);
        let mut rhs = Vec::with_capacity(k - 1);
        for other in 0..k {
            if other == i {
                continue;
            }
            rows.push((self.weights.row(other) - self.weights.row(i)).transpose());
            rhs.push(self.bias[i] - self.bias[other]);
        }
        let lp = BoxedLp {
            objective,
            rows,
            rhs,
            lower: self.lower.clone(),
            upper: self.upper.clone(),
        };
        match solve_boxed(&lp, cfg.simplex_pivot_cap)? {
            LpSolution::Optimal { value, .. } => {
                Ok(value <= self.bias[j] - self.bias[i] + cfg.adjacency_tol)
            }
            LpSolution::Infeasible => {
                log::debug!("region {i} is empty inside the box; no neighbors");
                Ok(false)
            }
        }
    }

    /// Full symmetric adjacency matrix; unordered pairs are solved in
    /// parallel and mirrored, the diagonal is true by definition.
    pub fn build_adjacency(&self, cfg: &PartitionConfig) -> Result<AdjacencyMatrix> {
        let k = self.num_regions();
        let mut pairs = Vec::new();
        for i in 0..k {
            for j in (i + 1)..k {
                pairs.push((i, j));
            }
        }
        let results = par_map_slice(&pairs, |&(i, j)| self.is_adjacent(i, j, cfg));
        let mut flags = vec![false; k * k];
        for i in 0..k {
            flags[i * k + i] = true;
        }
        for (&(i, j), res) in pairs.iter().zip(results) {
            let adjacent = res?;
            flags[i * k + j] = adjacent;
            flags[j * k + i] = adjacent;
        }
        Ok(AdjacencyMatrix { regions: k, flags })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::grid_partition_oracle;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn strip_partition() -> SoftmaxPartition {
        // Three strips along the first coordinate: boundaries at -0.5 and
        // 0.5, and the outer strips never touch each other.
        let weights = DMatrix::from_row_slice(3, 2, &[-2.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let bias = DVector::from_row_slice(&[-1.0, 0.0, -1.0]);
        SoftmaxPartition::from_joint(
            weights,
            bias,
            DVector::from_element(2, -1.0),
            DVector::from_element(2, 1.0),
            1,
        )
    }

    #[test]
    fn strip_regions_label_as_expected() {
        let p = strip_partition();
        let u = DVector::from_element(1, 0.0);
        assert_eq!(p.region_of(&DVector::from_element(1, -0.9), &u), 0);
        assert_eq!(p.region_of(&DVector::from_element(1, 0.0), &u), 1);
        assert_eq!(p.region_of(&DVector::from_element(1, 0.9), &u), 2);
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let weights = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let bias = DVector::zeros(2);
        let p = SoftmaxPartition::from_joint(
            weights,
            bias,
            DVector::from_element(2, -1.0),
            DVector::from_element(2, 1.0),
            1,
        );
        assert_eq!(p.region_of_joint(&DVector::from_row_slice(&[0.3, 0.0])), 0);
    }

    #[test]
    fn strip_adjacency_skips_separated_pair() {
        let p = strip_partition();
        let cfg = PartitionConfig::default();
        assert!(p.is_adjacent(0, 1, &cfg).unwrap());
        assert!(p.is_adjacent(1, 0, &cfg).unwrap());
        assert!(p.is_adjacent(1, 2, &cfg).unwrap());
        assert!(!p.is_adjacent(0, 2, &cfg).unwrap());
        assert!(!p.is_adjacent(2, 0, &cfg).unwrap());
        let adj = p.build_adjacency(&cfg).unwrap();
        assert!(adj.get(0, 0) && adj.get(1, 1) && adj.get(2, 2));
        assert_eq!(adj.pairs(), vec![(0, 1), (1, 2)]);
        assert_eq!(adj.neighbors(1), vec![0, 1, 2]);
    }

    #[test]
    fn empty_region_has_no_neighbors() {
        // Region 2's logit is dominated everywhere in the box.
        let weights = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
        let bias = DVector::from_row_slice(&[0.0, 0.0, -100.0]);
        let p = SoftmaxPartition::from_joint(
            weights,
            bias,
            DVector::from_element(2, -1.0),
            DVector::from_element(2, 1.0),
            1,
        );
        let cfg = PartitionConfig::default();
        assert!(!p.is_adjacent(2, 0, &cfg).unwrap());
        assert!(!p.is_adjacent(2, 1, &cfg).unwrap());
        assert!(!p.is_adjacent(0, 2, &cfg).unwrap());
        assert!(p.is_adjacent(0, 1, &cfg).unwrap());
    }

    #[test]
    fn random_partitions_match_grid_oracle() {
        // Dense sampling oracle on the same box, with knife-edge pairs
        // (cells that come within two lattice cells of touching without an
        // observed crossing) excluded from the comparison.
        let cfg = PartitionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..8 {
            let k = 3 + case % 3;
            let weights =
                DMatrix::from_fn(k, 2, |_, _| rng.random_range(-2.0..2.0));
            let bias = DVector::from_fn(k, |_, _| rng.random_range(-0.5..0.5));
            let p = SoftmaxPartition::from_joint(
                weights.clone(),
                bias.clone(),
                DVector::from_element(2, -1.0),
                DVector::from_element(2, 1.0),
                2,
            );
            let adj = p.build_adjacency(&cfg).unwrap();
            let oracle = grid_partition_oracle(
                &weights,
                &bias,
                &DVector::from_element(2, -1.0),
                &DVector::from_element(2, 1.0),
                101,
            );
            for i in 0..k {
                for j in (i + 1)..k {
                    if oracle.near_pairs.contains(&(i, j)) && !oracle.is_adjacent(i, j) {
                        continue;
                    }
                    if oracle.is_adjacent(i, j) {
                        assert!(
                            adj.get(i, j),
                            "case {case}: oracle saw boundary between {i} and {j}"
                        );
                    } else if !oracle.near_pairs.contains(&(i, j)) {
                        assert!(
                            !adj.get(i, j),
                            "case {case}: oracle saw clear separation of {i} and {j}"
                        );
                    }
                }
            }
        }
    }
}
