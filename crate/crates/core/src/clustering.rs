//! Capacity-constrained k-means over the tokens of one image.
//!
//! Each sweep assigns tokens by the penalized cost `‖x − μ_m‖² + θ_m`, then enforces
//! the hard cap `|C_m| ≤ s` with a replacement cascade: a token that finds its
//! cheapest cluster full evicts the most expensive resident if it is strictly
//! cheaper, and the evicted token moves on to its next-cheapest cluster. A token
//! rejected by every cluster is dropped for this image. The multipliers `θ` follow
//! projected dual ascent on the pre-replacement cluster sizes.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Mat, Rng};

/// Token embeddings of one image; row 0 is the CLS-analog token.
pub type TokenMatrix = Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityConfig {
    /// Number of clusters `M`.
    pub clusters: usize,
    /// Capacity factor `α`.
    pub alpha: f64,
    pub max_iters: usize,
    /// Convergence threshold on the largest centroid shift.
    pub tol: f64,
    /// Dual ascent step size for the capacity multipliers.
    pub eta_theta: f64,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self {
            clusters: 4,
            alpha: 1.0,
            max_iters: 10,
            tol: 1e-4,
            eta_theta: 0.1,
        }
    }
}

impl CapacityConfig {
    pub fn new(clusters: usize, alpha: f64) -> Self {
        Self {
            clusters,
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::config("clusters", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "capacity factor must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters", "must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::config("tol", "must be non-negative"));
        }
        if !(self.eta_theta > 0.0 && self.eta_theta.is_finite()) {
            return Err(Error::config("eta_theta", "must be positive"));
        }
        Ok(())
    }

    /// Per-cluster capacity `s = max(1, ⌊α·n / M⌋)` for `n` tokens.
    pub fn capacity(&self, n: usize) -> usize {
        capacity_limit(n, self.clusters, self.alpha)
    }
}

pub fn capacity_limit(n: usize, clusters: usize, alpha: f64) -> usize {
    let s = (alpha * n as f64 / clusters as f64).floor();
    if s >= 1.0 {
        s as usize
    } else {
        1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster of each token, `None` when the token was dropped.
    pub assignment: Vec<Option<usize>>,
    pub centroids: Mat,
    pub thetas: Vec<f64>,
    pub sizes: Vec<usize>,
    pub dropped: usize,
    /// The capacity `s` every cluster was held to.
    pub capacity: usize,
    /// `Σ_m Σ_{x∈C_m} ‖x − μ_m‖²` at the returned centroids.
    pub objective: f64,
    pub iterations: usize,
}

impl ClusterResult {
    pub fn token_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn assigned(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn drop_rate(&self) -> f64 {
        self.dropped as f64 / self.token_count().max(1) as f64
    }

    pub fn cluster_count(&self) -> usize {
        self.sizes.len()
    }
}

/// Penalized cost of placing `token` in the cluster at `centroid`.
#[inline]
pub fn assignment_cost(token: &[f64], centroid: &[f64], theta: f64) -> f64 {
    sq_dist(token, centroid) + theta
}

/// Clusters `tokens` with k-means++ seeding drawn from `rng`.
pub fn cluster(tokens: &TokenMatrix, cfg: &CapacityConfig, rng: &mut Rng) -> Result<ClusterResult> {
    check_inputs(tokens, cfg)?;
    let init = kmeans_pp(tokens, cfg.clusters, rng);
    run(tokens, cfg, init)
}

/// Clusters `tokens` starting from the given centroids instead of k-means++.
pub fn cluster_from(tokens: &TokenMatrix, cfg: &CapacityConfig, init: Mat) -> Result<ClusterResult> {
    check_inputs(tokens, cfg)?;
    if init.shape() != (cfg.clusters, tokens.cols()) {
        return Err(Error::shape(format!(
            "initial centroids are {:?}, expected ({}, {})",
            init.shape(),
            cfg.clusters,
            tokens.cols()
        )));
    }
    run(tokens, cfg, init)
}

fn check_inputs(tokens: &TokenMatrix, cfg: &CapacityConfig) -> Result<()> {
    cfg.validate()?;
    let n = tokens.rows();
    if n < cfg.clusters {
        return Err(Error::Degenerate {
            distinct: distinct_rows(tokens),
            clusters: cfg.clusters,
        });
    }
    if !tokens.is_finite() {
        return Err(Error::Domain("token matrix has non-finite entries".into()));
    }
    // With fewer distinct tokens than clusters, only a binding capacity can keep
    // every cluster populated; with slack capacity some cluster is always empty.
    if cfg.capacity(n) >= n {
        let distinct = distinct_rows(tokens);
        if distinct < cfg.clusters {
            return Err(Error::Degenerate {
                distinct,
                clusters: cfg.clusters,
            });
        }
    }
    Ok(())
}

fn distinct_rows(tokens: &TokenMatrix) -> usize {
    let mut keys: Vec<Vec<u64>> = tokens
        .iter_rows()
        .map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// k-means++ seeding: first centroid uniform, then proportional to squared distance
/// to the nearest chosen centroid. Falls back to uniform picks once every token
/// coincides with a chosen centroid.
pub fn kmeans_pp(tokens: &TokenMatrix, k: usize, rng: &mut Rng) -> Mat {
    let n = tokens.rows();
    let mut centroids = Mat::zeros(k, tokens.cols());
    let mut nearest = vec![f64::INFINITY; n];
    for c in 0..k {
        let total: f64 = if c == 0 { 0.0 } else { nearest.iter().sum() };
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.row_mut(c).copy_from_slice(tokens.row(pick));
        for (i, best) in nearest.iter_mut().enumerate() {
            let d = sq_dist(tokens.row(i), centroids.row(c));
            if d < *best {
                *best = d;
            }
        }
    }
    centroids
}

fn run(tokens: &TokenMatrix, cfg: &CapacityConfig, mut centroids: Mat) -> Result<ClusterResult> {
    let n = tokens.rows();
    let m = cfg.clusters;
    let s = cfg.capacity(n);
    let mut thetas = vec![0.0; m];
    let mut assignment = vec![None; n];
    let mut costs = vec![0.0; n * m];
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        for i in 0..n {
            for c in 0..m {
                costs[i * m + c] = assignment_cost(tokens.row(i), centroids.row(c), thetas[c]);
            }
        }

        let mut wanted = vec![0usize; m];
        for i in 0..n {
            wanted[argmin(&costs[i * m..(i + 1) * m])] += 1;
        }

        assignment = place_with_replacement(tokens, &costs, m, s);

        for (theta, &w) in thetas.iter_mut().zip(&wanted) {
            *theta = (*theta + cfg.eta_theta * (w as f64 - s as f64)).max(0.0);
        }

        let updated = centroid_means(tokens, &assignment, &centroids);
        let shift = (0..m)
            .map(|c| sq_dist(updated.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < cfg.tol {
            break;
        }
    }

    let mut sizes = vec![0usize; m];
    let mut objective = 0.0;
    for (i, slot) in assignment.iter().enumerate() {
        if let Some(c) = *slot {
            sizes[c] += 1;
            objective += sq_dist(tokens.row(i), centroids.row(c));
        }
    }
    let dropped = n - sizes.iter().sum::<usize>();
    if sizes.iter().any(|&z| z > s) {
        return Err(Error::Invariant(format!(
            "cluster sizes {sizes:?} exceed capacity {s}"
        )));
    }

    Ok(ClusterResult {
        assignment,
        centroids,
        thetas,
        sizes,
        dropped,
        capacity: s,
        objective,
        iterations,
    })
}

/// Lowest index among the minimal entries.
fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = j;
        }
    }
    best
}

/// Token-proposing placement under hard capacity `s`. Tokens are processed in index
/// order and walk their clusters from cheapest to dearest (ties by cluster id).
fn place_with_replacement(tokens: &TokenMatrix, costs: &[f64], m: usize, s: usize) -> Vec<Option<usize>> {
    let n = tokens.rows();
    let prefs: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let row = &costs[i * m..(i + 1) * m];
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            order
        })
        .collect();
    // A cluster ranks tokens by cost. Costs equal up to rounding (members of a pair
    // are equidistant from their midpoint) fall back to comparing token coordinates,
    // which keeps the ranking independent of token order.
    let rank = |a: usize, b: usize, c: usize| -> Ordering {
        let (ca, cb) = (costs[a * m + c], costs[b * m + c]);
        if (ca - cb).abs() <= TIE_TOL * ca.abs().max(cb.abs()).max(1.0) {
            lex_cmp(tokens.row(a), tokens.row(b)).then(a.cmp(&b))
        } else {
            ca.total_cmp(&cb)
        }
    };
    let mut next = vec![0usize; n];
    let mut members: Vec<Vec<usize>> = vec![Vec::with_capacity(s); m];
    let mut assignment = vec![None; n];

    for start in 0..n {
        let mut current = start;
        loop {
            if next[current] == m {
                assignment[current] = None;
                break;
            }
            let c = prefs[current][next[current]];
            next[current] += 1;
            if members[c].len() < s {
                members[c].push(current);
                assignment[current] = Some(c);
                break;
            }
            let (slot, &worst) = members[c]
                .iter()
                .enumerate()
                .max_by(|(_, &a), (_, &b)| rank(a, b, c))
                .expect("full cluster has members");
            if rank(current, worst, c) == Ordering::Less {
                members[c][slot] = current;
                assignment[current] = Some(c);
                assignment[worst] = None;
                current = worst;
            }
        }
    }
    assignment
}

/// Relative tolerance under which two placement costs count as tied.
const TIE_TOL: f64 = 1e-12;

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn centroid_means(tokens: &TokenMatrix, assignment: &[Option<usize>], previous: &Mat) -> Mat {
    let m = previous.rows();
    let mut sums = Mat::zeros(m, tokens.cols());
    let mut counts = vec![0usize; m];
    for (i, slot) in assignment.iter().enumerate() {
        if let Some(c) = *slot {
            counts[c] += 1;
            for (acc, v) in sums.row_mut(c).iter_mut().zip(tokens.row(i)) {
                *acc += v;
            }
        }
    }
    for c in 0..m {
        if counts[c] == 0 {
            sums.row_mut(c).copy_from_slice(previous.row(c));
        } else {
            let k = counts[c] as f64;
            sums.row_mut(c).iter_mut().for_each(|v| *v /= k);
        }
    }
    sums
}
