//! Exact one-to-one assignment of clusters to experts.
//!
//! [`hungarian`] is the O(M³) shortest-augmenting-path Kuhn–Munkres solver on dense
//! matrices. Among equally cheap permutations it returns the lexicographically
//! smallest, found as the lexicographically smallest perfect matching inside the
//! tight-edge graph of the optimal dual potentials. [`brute_force`] enumerates all
//! permutations and serves as the test oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Largest size the exhaustive oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Square, finite cost matrix; entry `(i, j)` is the cost of giving cluster `i` to expert `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(Mat);

impl CostMatrix {
    pub fn new(m: Mat) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::shape(format!(
                "cost matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if !m.is_finite() {
            return Err(Error::shape("cost matrix has non-finite entries"));
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Mat::from_rows(rows)?)
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.row(i)[j]
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }
}

/// `perm[i]` is the expert assigned to cluster `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    perm: Vec<usize>,
}

impl Assignment {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::shape(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Self { perm })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            perm: (0..m).collect(),
        }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Expert of cluster `i`.
    pub fn expert_of(&self, cluster: usize) -> usize {
        self.perm[cluster]
    }

    /// `inv[j]` is the cluster given to expert `j`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &j) in self.perm.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }

    /// `Σ_i cost[i][perm[i]]`, summed in row order.
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.perm
            .iter()
            .enumerate()
            .map(|(i, &j)| cost.get(i, j))
            .sum()
    }
}

/// Minimum-cost permutation; ties resolve to the lexicographically smallest.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let n = cost.size();
    if n == 0 {
        return Assignment { perm: vec![] };
    }
    let (perm, u, v) = solve_with_potentials(cost);

    let scale = cost
        .matrix()
        .as_slice()
        .iter()
        .fold(1.0f64, |a, &c| a.max(c.abs()));
    let tol = 1e-12 * scale;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| perm[i] == j || cost.get(i, j) - u[i] - v[j] <= tol)
                .collect()
        })
        .collect();
    Assignment {
        perm: lexicographic_matching(&tight, perm),
    }
}

/// Shortest augmenting paths with potentials. Returns the row→column matching and
/// the row/column duals, with `cost[i][j] − u[i] − v[j] ≥ 0` up to rounding.
fn solve_with_potentials(cost: &CostMatrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.size();
    // 1-based internals, column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[row_of[j] - 1] = j - 1;
    }
    (perm, u[1..].to_vec(), v[1..].to_vec())
}

/// Lexicographically smallest perfect matching in the bipartite graph `adj`, given
/// that `fallback` is one perfect matching of it.
fn lexicographic_matching(adj: &[Vec<bool>], fallback: Vec<usize>) -> Vec<usize> {
    let n = adj.len();
    let mut perm = vec![usize::MAX; n];
    let mut col_used = vec![false; n];
    for i in 0..n {
        let mut chosen = None;
        for j in 0..n {
            if !adj[i][j] || col_used[j] {
                continue;
            }
            col_used[j] = true;
            if completes(adj, i + 1, &col_used) {
                chosen = Some(j);
                break;
            }
            col_used[j] = false;
        }
        match chosen {
            Some(j) => perm[i] = j,
            // unreachable while `fallback` is a matching of `adj`
            None => return fallback,
        }
    }
    perm
}

/// Whether rows `from..n` can be perfectly matched into the free columns (Kuhn).
fn completes(adj: &[Vec<bool>], from: usize, col_used: &[bool]) -> bool {
    fn augment(
        adj: &[Vec<bool>],
        row: usize,
        col_used: &[bool],
        owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for j in 0..adj.len() {
            if !adj[row][j] || col_used[j] || seen[j] {
                continue;
            }
            seen[j] = true;
            let free = match owner[j] {
                None => true,
                Some(r) => augment(adj, r, col_used, owner, seen),
            };
            if free {
                owner[j] = Some(row);
                return true;
            }
        }
        false
    }

    let n = adj.len();
    let mut owner = vec![None; n];
    (from..n).all(|row| {
        let mut seen = vec![false; n];
        augment(adj, row, col_used, &mut owner, &mut seen)
    })
}

/// Exhaustive minimizer over all `M!` permutations, visited in lexicographic order
/// so the first strict minimum is also the lexicographically smallest optimum.
pub fn brute_force(cost: &CostMatrix) -> Result<Assignment> {
    let n = cost.size();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeGuard {
            size: n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = Assignment { perm: perm.clone() }.total_cost(cost);
    while next_permutation(&mut perm) {
        let c: f64 = perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&perm);
        }
    }
    Ok(Assignment { perm: best })
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn random_cost(m: usize, rng: &mut Rng) -> CostMatrix {
        CostMatrix::new(Mat::from_vec(m, m, (0..m * m).map(|_| 2.0 * rng.uniform()).collect()).unwrap())
            .unwrap()
    }

    #[test]
    fn identity_favoring() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let a = hungarian(&c);
        assert_eq!(a.perm(), &[0, 1]);
        assert_eq!(a.total_cost(&c), 0.0);
        assert_eq!(brute_force(&c).unwrap().perm(), &[0, 1]);
    }

    #[test]
    fn constant_matrix_gives_identity() {
        for m in 1..=7 {
            let c = CostMatrix::new(Mat::from_vec(m, m, vec![0.7; m * m]).unwrap()).unwrap();
            let a = hungarian(&c);
            assert_eq!(a.perm(), (0..m).collect::<Vec<_>>().as_slice());
            assert!((a.total_cost(&c) - 0.7 * m as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_resolve_lexicographically() {
        // both (1,0,2) and (2,0,1)... only ties among optimal perms matter
        let c = CostMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(hungarian(&c).perm(), &[1, 0, 2]);
        assert_eq!(brute_force(&c).unwrap().perm(), &[1, 0, 2]);
    }

    #[test]
    fn single_entry() {
        let c = CostMatrix::from_rows(&[vec![1.5]]).unwrap();
        assert_eq!(brute_force(&c).unwrap().perm(), &[0]);
        assert_eq!(hungarian(&c).perm(), &[0]);
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = Rng::new(5);
        for m in [4, 6] {
            for _ in 0..50 {
                let c = random_cost(m, &mut rng);
                let h = hungarian(&c);
                let b = brute_force(&c).unwrap();
                assert_eq!(h.total_cost(&c), b.total_cost(&c));
            }
        }
    }

    #[test]
    fn oracle_size_guard() {
        let c = CostMatrix::new(Mat::zeros(9, 9)).unwrap();
        assert!(matches!(brute_force(&c), Err(Error::SizeGuard { size: 9, .. })));
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(CostMatrix::new(Mat::zeros(2, 3)).is_err());
        assert!(Assignment::new(vec![0, 0]).is_err());
        assert!(Assignment::new(vec![1, 0]).is_ok());
    }

    #[test]
    fn large_instance_is_a_permutation() {
        let c = random_cost(64, &mut Rng::new(1));
        let a = hungarian(&c);
        assert!(Assignment::new(a.perm().to_vec()).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::tensor::Rng;

        proptest! {
            #[test]
            fn row_shift_keeps_argmin(seed in any::<u64>(), m in 2usize..7, row in 0usize..7, shift in -3.0f64..3.0) {
                let mut rng = Rng::new(seed);
                let c = random_cost(m, &mut rng);
                let mut shifted = c.matrix().clone();
                shifted.row_mut(row % m).iter_mut().for_each(|v| *v += shift);
                let shifted = CostMatrix::new(shifted).unwrap();
                prop_assert_eq!(hungarian(&c), hungarian(&shifted));
            }

            #[test]
            fn hungarian_is_optimal(seed in any::<u64>(), m in 1usize..8) {
                let c = random_cost(m, &mut Rng::new(seed));
                let h = hungarian(&c);
                let b = brute_force(&c).unwrap();
                prop_assert_eq!(h.total_cost(&c), b.total_cost(&c));
                prop_assert_eq!(h, b);
            }
        }
    }
}
