//! Parameter-free routing: cluster an image's tokens, match clusters to experts
//! through static keys, and blend the experts by each cluster's token share.

use serde::{Deserialize, Serialize};

use crate::clustering::{cluster, CapacityConfig, ClusterResult, TokenMatrix};
use crate::error::{Error, Result};
use crate::tensor::{cosine, norm, sq_dist, Mat, Rng};
use crate::transport::{hungarian, Assignment, CostMatrix};

pub use crate::tensor::{init_keys, KeyStrategy, StaticKeySet};

/// Cost given to every expert for a cluster that has no centroid.
pub const EMPTY_CLUSTER_COST: f64 = 2.0;

/// `M` learnable prompts, each `L × D`, sharing one shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSet {
    experts: Vec<Mat>,
}

impl ExpertSet {
    pub fn new(experts: Vec<Mat>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::shape("expert set needs at least one expert"))?
            .shape();
        if first.0 == 0 || first.1 == 0 {
            return Err(Error::shape("experts need at least one token of positive dimension"));
        }
        if let Some(i) = experts.iter().position(|e| e.shape() != first) {
            return Err(Error::shape(format!(
                "expert {i} has shape {:?}, expected {first:?}",
                experts[i].shape()
            )));
        }
        Ok(Self { experts })
    }

    pub fn zeros(m: usize, prompt_len: usize, dim: usize) -> Self {
        Self {
            experts: vec![Mat::zeros(prompt_len, dim); m],
        }
    }

    /// Experts with i.i.d. `N(0, std²)` entries.
    pub fn random(m: usize, prompt_len: usize, dim: usize, std: f64, rng: &mut Rng) -> Self {
        let experts = (0..m)
            .map(|_| {
                let data = rng.normal_vec(prompt_len * dim).into_iter().map(|v| v * std).collect();
                Mat::from_vec(prompt_len, dim, data).expect("finite draws")
            })
            .collect();
        Self { experts }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.experts[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.experts[0].cols()
    }

    /// Scalars in the whole set, `M·L·D`.
    pub fn param_count(&self) -> usize {
        self.len() * self.prompt_len() * self.dim()
    }

    pub fn get(&self, m: usize) -> &Mat {
        &self.experts[m]
    }

    pub fn get_mut(&mut self, m: usize) -> &mut Mat {
        &mut self.experts[m]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Mat> {
        self.experts.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Mat> {
        self.experts.iter_mut()
    }

    pub fn same_shape(&self, other: &ExpertSet) -> bool {
        self.len() == other.len() && self.experts[0].shape() == other.experts[0].shape()
    }

    pub fn max_abs_diff(&self, other: &ExpertSet) -> f64 {
        self.experts
            .iter()
            .zip(&other.experts)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.experts.iter().all(Mat::is_finite)
    }

    /// Returns a copy with experts reordered: expert `i` of the result is expert `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            experts: perm.iter().map(|&j| self.experts[j].clone()).collect(),
        }
    }

    /// `Σ_m weights[m] · expert_m`.
    pub fn blend(&self, weights: &[f64]) -> Mat {
        let mut out = Mat::zeros(self.prompt_len(), self.dim());
        for (e, &w) in self.experts.iter().zip(weights) {
            if w != 0.0 {
                out.add_scaled(w, e);
            }
        }
        out
    }
}

/// Per-expert mixture weights `π`, a point on the simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights(pub Vec<f64>);

impl MixtureWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Largest violation of `π ≥ 0, Σπ = 1`.
    pub fn simplex_residual(&self) -> f64 {
        let neg = self.0.iter().fold(0.0f64, |a, &p| a.max(-p));
        let sum: f64 = self.0.iter().sum();
        neg.max((sum - 1.0).abs())
    }
}

/// How clusters are matched to experts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Clusters matched to the static keys.
    #[default]
    StaticKeys,
    /// Clusters matched to the current experts, each summarized by its mean token.
    ExpertKeys,
    /// No clustering: every token goes to a uniformly random expert.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutedPrompt {
    /// The instance prompt `Σ_m π_m · expert_m`.
    pub prompt: Mat,
    pub weights: MixtureWeights,
    /// Cluster → expert.
    pub assignment: Assignment,
    pub clusters: ClusterResult,
}

/// Cost matrix `Λ[i][j] = 1 − cos(μ_i, v_j)`, one row per cluster and one column per key.
///
/// Unoccupied clusters and zero-norm centroids get [`EMPTY_CLUSTER_COST`] in every
/// column. A zero-norm key carries no direction and costs 1 against every cluster.
pub fn build_cost(centroids: &Mat, occupied: &[bool], keys: &Mat) -> Result<CostMatrix> {
    let m = centroids.rows();
    if keys.rows() != m || occupied.len() != m {
        return Err(Error::shape(format!(
            "{m} centroids, {} occupancy flags and {} keys",
            occupied.len(),
            keys.rows()
        )));
    }
    if keys.cols() != centroids.cols() {
        return Err(Error::shape(format!(
            "centroid dimension {} differs from key dimension {}",
            centroids.cols(),
            keys.cols()
        )));
    }
    let mut cost = Mat::zeros(m, m);
    for i in 0..m {
        let mu = centroids.row(i);
        let usable = occupied[i] && norm(mu) > 0.0;
        for j in 0..m {
            let key = keys.row(j);
            cost.row_mut(i)[j] = if !usable {
                EMPTY_CLUSTER_COST
            } else if norm(key) == 0.0 {
                1.0
            } else {
                1.0 - cosine(mu, key)?
            };
        }
    }
    CostMatrix::new(cost)
}

/// Routing with static keys, the default pipeline.
pub fn route(
    tokens: &TokenMatrix,
    experts: &ExpertSet,
    keys: &StaticKeySet,
    cfg: &CapacityConfig,
    rng: &mut Rng,
) -> Result<RoutedPrompt> {
    Router::new(RoutingMode::StaticKeys, cfg.clone()).route(tokens, experts, keys, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub mode: RoutingMode,
    pub capacity: CapacityConfig,
}

impl Router {
    pub fn new(mode: RoutingMode, capacity: CapacityConfig) -> Self {
        Self { mode, capacity }
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            mode: self.mode,
            capacity: CapacityConfig {
                alpha,
                ..self.capacity.clone()
            },
        }
    }

    pub fn route(
        &self,
        tokens: &TokenMatrix,
        experts: &ExpertSet,
        keys: &StaticKeySet,
        rng: &mut Rng,
    ) -> Result<RoutedPrompt> {
        let m = experts.len();
        if self.capacity.clusters != m || keys.len() != m {
            return Err(Error::shape(format!(
                "{m} experts, {} keys and {} clusters",
                keys.len(),
                self.capacity.clusters
            )));
        }
        if keys.dim() != tokens.cols() {
            return Err(Error::shape(format!(
                "token dimension {} differs from key dimension {}",
                tokens.cols(),
                keys.dim()
            )));
        }

        let (clusters, assignment) = match self.mode {
            RoutingMode::Random => (random_partition(tokens, m, rng), Assignment::identity(m)),
            RoutingMode::StaticKeys | RoutingMode::ExpertKeys => {
                let clusters = cluster(tokens, &self.capacity, rng)?;
                let occupied: Vec<bool> = clusters.sizes.iter().map(|&z| z > 0).collect();
                let cost = match self.mode {
                    RoutingMode::StaticKeys => build_cost(&clusters.centroids, &occupied, keys.matrix())?,
                    _ => build_cost(&clusters.centroids, &occupied, &expert_summaries(experts))?,
                };
                let assignment = hungarian(&cost);
                (clusters, assignment)
            }
        };

        let total = clusters.assigned();
        if total == 0 {
            return Err(Error::Invariant("every token was dropped".into()));
        }
        let mut pi = vec![0.0; m];
        for (cluster_id, &size) in clusters.sizes.iter().enumerate() {
            pi[assignment.expert_of(cluster_id)] = size as f64 / total as f64;
        }
        let prompt = experts.blend(&pi);
        Ok(RoutedPrompt {
            prompt,
            weights: MixtureWeights(pi),
            assignment,
            clusters,
        })
    }
}

/// Mean token of each expert, used as a moving key.
fn expert_summaries(experts: &ExpertSet) -> Mat {
    let rows: Vec<Vec<f64>> = experts.iter().map(Mat::mean_row).collect();
    Mat::from_rows(&rows).expect("finite experts")
}

/// Uniformly random token → expert labels with no capacity limit.
fn random_partition(tokens: &TokenMatrix, m: usize, rng: &mut Rng) -> ClusterResult {
    let n = tokens.rows();
    let assignment: Vec<Option<usize>> = (0..n).map(|_| Some(rng.below(m))).collect();
    let mut sizes = vec![0usize; m];
    let mut centroids = Mat::zeros(m, tokens.cols());
    for (i, slot) in assignment.iter().enumerate() {
        let c = slot.expect("every token labelled");
        sizes[c] += 1;
        for (a, v) in centroids.row_mut(c).iter_mut().zip(tokens.row(i)) {
            *a += v;
        }
    }
    for (c, &size) in sizes.iter().enumerate() {
        if size > 0 {
            centroids.row_mut(c).iter_mut().for_each(|v| *v /= size as f64);
        }
    }
    let objective = assignment
        .iter()
        .enumerate()
        .map(|(i, slot)| sq_dist(tokens.row(i), centroids.row(slot.unwrap())))
        .sum();
    ClusterResult {
        assignment,
        centroids,
        thetas: vec![0.0; m],
        sizes,
        dropped: 0,
        capacity: n,
        objective,
        iterations: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable_tokens(per_cluster: usize, centers: &Mat, noise: f64, rng: &mut Rng) -> Mat {
        let mut rows = Vec::new();
        for c in 0..centers.rows() {
            for _ in 0..per_cluster {
                rows.push(
                    centers
                        .row(c)
                        .iter()
                        .map(|v| v + noise * rng.normal())
                        .collect::<Vec<_>>(),
                );
            }
        }
        Mat::from_rows(&rows).unwrap()
    }

    #[test]
    fn cost_geometry() {
        let keys = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let centroids = Mat::from_rows(&[vec![2.0, 0.0], vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let c = build_cost(&centroids, &[true, true, true], &keys).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(0, 1), 1.0);
        assert_eq!(c.get(0, 2), 2.0);
        // zero-norm centroid follows the empty-cluster rule
        assert!((0..3).all(|j| c.get(2, j) == EMPTY_CLUSTER_COST));
        let c = build_cost(&centroids, &[true, false, true], &keys).unwrap();
        assert!((0..3).all(|j| c.get(1, j) == EMPTY_CLUSTER_COST));
    }

    #[test]
    fn cost_entries_within_range() {
        let mut rng = Rng::new(3);
        let centroids = Mat::from_vec(5, 7, rng.normal_vec(35)).unwrap();
        let keys = init_keys(5, 7, KeyStrategy::Normal, &mut rng).unwrap();
        let c = build_cost(&centroids, &[true; 5], keys.matrix()).unwrap();
        assert!(c.matrix().as_slice().iter().all(|v| (0.0..=2.0).contains(v)));
    }

    #[test]
    fn weights_follow_cluster_shares() {
        let mut rng = Rng::new(1);
        let centers = Mat::from_rows(&[vec![10.0, 0.0], vec![0.0, 10.0]]).unwrap();
        let mut rows = Vec::new();
        for _ in 0..30 {
            rows.push(vec![10.0 + 0.01 * rng.normal(), 0.01 * rng.normal()]);
        }
        for _ in 0..70 {
            rows.push(vec![0.01 * rng.normal(), 10.0 + 0.01 * rng.normal()]);
        }
        let tokens = Mat::from_rows(&rows).unwrap();
        let keys = StaticKeySet::new(centers, KeyStrategy::Orthogonal).unwrap();
        let experts = ExpertSet::random(2, 3, 2, 1.0, &mut rng);
        let cfg = CapacityConfig::new(2, 2.0);
        let r = route(&tokens, &experts, &keys, &cfg, &mut Rng::new(4)).unwrap();
        assert_eq!(r.clusters.dropped, 0);
        assert!((r.weights.0[0] - 0.3).abs() < 1e-12);
        assert!((r.weights.0[1] - 0.7).abs() < 1e-12);
        let manual = experts.blend(&[0.3, 0.7]);
        assert!(r.prompt.max_abs_diff(&manual) < 1e-12);
    }

    #[test]
    fn single_expert_is_returned_unchanged() {
        let mut rng = Rng::new(2);
        let tokens = Mat::from_vec(9, 4, rng.normal_vec(36)).unwrap();
        let experts = ExpertSet::random(1, 2, 4, 0.5, &mut rng);
        let keys = init_keys(1, 4, KeyStrategy::Orthogonal, &mut rng).unwrap();
        let r = route(&tokens, &experts, &keys, &CapacityConfig::new(1, 1.0), &mut rng).unwrap();
        assert_eq!(r.weights.0, vec![1.0]);
        assert_eq!(&r.prompt, experts.get(0));
    }

    #[test]
    fn identical_experts_give_that_expert() {
        let mut rng = Rng::new(6);
        let tokens = Mat::from_vec(17, 8, rng.normal_vec(17 * 8)).unwrap();
        let e = Mat::from_vec(2, 8, rng.normal_vec(16)).unwrap();
        let experts = ExpertSet::new(vec![e.clone(); 3]).unwrap();
        let keys = init_keys(3, 8, KeyStrategy::Orthogonal, &mut rng).unwrap();
        let r = route(&tokens, &experts, &keys, &CapacityConfig::new(3, 2.0), &mut rng).unwrap();
        assert!(r.prompt.max_abs_diff(&e) < 1e-12);
    }

    #[test]
    fn same_seed_same_route() {
        let mut rng = Rng::new(8);
        let tokens = Mat::from_vec(17, 8, rng.normal_vec(17 * 8)).unwrap();
        let experts = ExpertSet::random(4, 2, 8, 1.0, &mut rng);
        let keys = init_keys(4, 8, KeyStrategy::Orthogonal, &mut rng).unwrap();
        let cfg = CapacityConfig::new(4, 1.0);
        let a = route(&tokens, &experts, &keys, &cfg, &mut Rng::new(99)).unwrap();
        let b = route(&tokens, &experts, &keys, &cfg, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permuting_experts_and_keys_together_keeps_prompt() {
        let mut rng = Rng::new(10);
        for case in 0..30 {
            let tokens = Mat::from_vec(17, 6, rng.normal_vec(17 * 6)).unwrap();
            let experts = ExpertSet::random(4, 3, 6, 1.0, &mut rng);
            let keys = init_keys(4, 6, KeyStrategy::Orthogonal, &mut rng).unwrap();
            let mut perm: Vec<usize> = (0..4).collect();
            rng.shuffle(&mut perm);
            let cfg = CapacityConfig::new(4, 2.0);
            let a = route(&tokens, &experts, &keys, &cfg, &mut Rng::new(case)).unwrap();
            let b = route(
                &tokens,
                &experts.permuted(&perm),
                &keys.permuted(&perm),
                &cfg,
                &mut Rng::new(case),
            )
            .unwrap();
            assert!(a.prompt.max_abs_diff(&b.prompt) < 1e-12, "case {case}");
        }
    }

    #[test]
    fn expert_keys_and_random_modes_stay_on_simplex() {
        let mut rng = Rng::new(12);
        let tokens = Mat::from_vec(17, 6, rng.normal_vec(17 * 6)).unwrap();
        let keys = init_keys(4, 6, KeyStrategy::Orthogonal, &mut rng).unwrap();
        for experts in [ExpertSet::zeros(4, 2, 6), ExpertSet::random(4, 2, 6, 1.0, &mut rng)] {
            for mode in [RoutingMode::ExpertKeys, RoutingMode::Random] {
                let router = Router::new(mode, CapacityConfig::new(4, 1.0));
                let r = router.route(&tokens, &experts, &keys, &mut rng).unwrap();
                assert!(r.weights.simplex_residual() < 1e-12);
                assert!(r.prompt.max_abs_diff(&experts.blend(r.weights.as_slice())) < 1e-12);
            }
        }
        let random = Router::new(RoutingMode::Random, CapacityConfig::new(4, 1.0));
        let r = random.route(&tokens, &ExpertSet::zeros(4, 1, 6), &keys, &mut rng).unwrap();
        assert_eq!(r.clusters.dropped, 0);
        assert_eq!(r.clusters.assigned(), 17);
    }

    #[test]
    fn semantic_clusters_keep_their_expert_across_seeds() {
        let mut rng = Rng::new(21);
        let keys = init_keys(4, 16, KeyStrategy::Orthogonal, &mut rng).unwrap();
        let centers = crate::tensor::init_keys(4, 16, KeyStrategy::Orthogonal, &mut rng).unwrap();
        let mut centers = centers.matrix().clone();
        centers.scale(3.0);
        let tokens = separable_tokens(5, &centers, 0.1, &mut rng);
        let experts = ExpertSet::random(4, 1, 16, 1.0, &mut rng);
        let cfg = CapacityConfig::new(4, 1.0);
        let expert_of_token0 = |seed: u64| {
            let r = route(&tokens, &experts, &keys, &cfg, &mut Rng::new(seed)).unwrap();
            r.assignment.expert_of(r.clusters.assignment[0].unwrap())
        };
        let reference = expert_of_token0(0);
        let agree = (0..100).filter(|&s| expert_of_token0(s) == reference).count();
        assert!(agree >= 95, "{agree}/100");
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut rng = Rng::new(0);
        let tokens = Mat::from_vec(8, 4, rng.normal_vec(32)).unwrap();
        let keys = init_keys(3, 4, KeyStrategy::Orthogonal, &mut rng).unwrap();
        let experts = ExpertSet::zeros(2, 1, 4);
        assert!(route(&tokens, &experts, &keys, &CapacityConfig::new(2, 1.0), &mut rng).is_err());
        assert!(ExpertSet::new(vec![Mat::zeros(1, 4), Mat::zeros(2, 4)]).is_err());
    }
}
