//! Joint-view spatial clustering of dense tokens by entropic optimal
//! transport, and mean pooling of the resulting clusters into objects.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::depth::{depth_cost, TokenDepths};
use crate::error::{Error, Result};

const MODULE: &str = "spatial_clustering";
const UNIT_TOL: f64 = 1e-6;
/// Pooled means shorter than this are dropped rather than normalized.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub entries: Array2<f64>,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::invalid(MODULE, "cost entries must be finite and >= 0"));
        }
        Ok(CostMatrix { entries })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.entries.dim()
    }

    /// `self + beta * other`.
    pub fn add_scaled(&self, other: &CostMatrix, beta: f64) -> Result<CostMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::invalid(MODULE, "cost matrices differ in shape"));
        }
        CostMatrix::new(&self.entries + &(&other.entries * beta))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViewId {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenField {
    /// `P x d`, unit rows.
    pub features: Array2<f64>,
    /// Source-image normalized `(x, y)` per token.
    pub positions: Vec<(f64, f64)>,
    pub depths: TokenDepths,
    pub view_id: ViewId,
}

impl TokenField {
    pub fn new(features: Array2<f64>, positions: Vec<(f64, f64)>, depths: TokenDepths, view_id: ViewId) -> Result<Self> {
        let p = features.nrows();
        if positions.len() != p || depths.len() != p {
            return Err(Error::invalid(MODULE, "features, positions and depths differ in length"));
        }
        for row in features.rows() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(MODULE, format!("token feature norm {n} is not 1")));
            }
        }
        if positions
            .iter()
            .any(|&(x, y)| !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y))
        {
            return Err(Error::invalid(MODULE, "token positions must lie in [0, 1]^2"));
        }
        Ok(TokenField {
            features,
            positions,
            depths,
            view_id,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn dist(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (dx, dy) = (p.0 - q.0, p.1 - q.1);
    (dx * dx + dy * dy).sqrt()
}

/// `(1 - <f_i, c_j>) + pos_alpha * |p_i - p_j|` over stacked token rows.
/// The cosine term is clamped at 0 against rounding.
pub fn feature_position_cost_rows(
    features: &Array2<f64>,
    positions: &[(f64, f64)],
    centroids: &Array2<f64>,
    centroid_positions: &[(f64, f64)],
    pos_alpha: f64,
) -> Result<CostMatrix> {
    if features.ncols() != centroids.ncols() || centroids.nrows() != centroid_positions.len() {
        return Err(Error::invalid(MODULE, "token and centroid shapes disagree"));
    }
    if !(pos_alpha >= 0.0) {
        return Err(Error::invalid(MODULE, "pos_alpha must be >= 0"));
    }
    for c in centroids.rows() {
        let n = c.dot(&c).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(MODULE, format!("centroid norm {n} is not 1")));
        }
    }
    let entries = Array2::from_shape_fn((features.nrows(), centroids.nrows()), |(i, j)| {
        (1.0 - dot(features.row(i), centroids.row(j))).max(0.0) + pos_alpha * dist(positions[i], centroid_positions[j])
    });
    CostMatrix::new(entries)
}

/// Cost of the joint token set (view A rows first, then view B).
pub fn feature_position_cost(
    a: &TokenField,
    b: &TokenField,
    centroids: &Array2<f64>,
    centroid_positions: &[(f64, f64)],
    pos_alpha: f64,
) -> Result<CostMatrix> {
    let joint = Joint::new(a, b)?;
    feature_position_cost_rows(&joint.features, &joint.positions, centroids, centroid_positions, pos_alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub lambda: f64,
    pub iterations: usize,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Array1<f64> {
        self.plan.sum_axis(ndarray::Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.plan.sum_axis(ndarray::Axis(0))
    }

    /// Per-row argmax, ties to the lower cluster id.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.plan
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Entropic OT between uniform token mass `1/N` and uniform cluster mass
/// `1/M`. The kernel is `exp(-lambda * (c_ij - min_j c_ij))`; each iteration
/// normalizes columns to `1/M` and then rows to `1/N`, so the returned plan
/// is always exactly row-balanced.
pub fn sinkhorn_transport(cost: &CostMatrix, lambda: f64, iterations: usize) -> Result<TransportPlan> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(MODULE, format!("sinkhorn lambda must be > 0, got {lambda}")));
    }
    if iterations == 0 {
        return Err(Error::invalid(MODULE, "sinkhorn needs at least one iteration"));
    }
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::invalid(MODULE, "empty cost matrix"));
    }
    let mut q = cost.entries.clone();
    for mut row in q.rows_mut() {
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        row.mapv_inplace(|c| (-lambda * (c - lo)).exp());
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid(MODULE, "stabilized kernel has an all-zero row"));
        }
    }
    let (row_mass, col_mass) = (1.0 / n as f64, 1.0 / m as f64);
    for _ in 0..iterations {
        for mut col in q.columns_mut() {
            let s = col.sum();
            if s > 0.0 {
                col.mapv_inplace(|v| v * col_mass / s);
            }
        }
        for mut row in q.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v * row_mass / s);
        }
    }
    Ok(TransportPlan {
        plan: q,
        lambda,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterParams {
    /// Number of spatial clusters M.
    pub num_clusters: usize,
    pub lambda: f64,
    pub sk_iterations: usize,
    pub pos_alpha: f64,
    pub depth_beta: f64,
    /// Meters; divides depth differences in the cost.
    pub depth_scale: f64,
    pub outer_rounds: usize,
    pub seed: u64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            num_clusters: 32,
            lambda: 20.0,
            sk_iterations: 1,
            pos_alpha: 1.0,
            depth_beta: 4.0,
            depth_scale: 57.0,
            outer_rounds: 3,
            seed: 0,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.num_clusters >= 1
            && self.lambda > 0.0
            && self.lambda.is_finite()
            && self.sk_iterations >= 1
            && self.pos_alpha >= 0.0
            && self.depth_beta >= 0.0
            && self.depth_scale > 0.0
            && self.outer_rounds >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(MODULE, format!("invalid clustering params {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    /// One label per joint token, view A first.
    pub labels: Vec<usize>,
    /// `M x d`, unit rows.
    pub centroids: Array2<f64>,
    pub centroid_positions: Vec<(f64, f64)>,
    pub centroid_depths: Vec<f64>,
    /// Token counts `[in A, in B]` per cluster.
    pub per_view_presence: Vec<[usize; 2]>,
    /// Token counts of view A and view B.
    pub view_sizes: (usize, usize),
    /// Plan of the last refinement round.
    pub plan: TransportPlan,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn view_labels(&self, view: ViewId) -> &[usize] {
        match view {
            ViewId::A => &self.labels[..self.view_sizes.0],
            ViewId::B => &self.labels[self.view_sizes.0..],
        }
    }

    /// Clusters with at least one token in both views.
    pub fn spanning_clusters(&self) -> Vec<usize> {
        (0..self.num_clusters())
            .filter(|&k| self.per_view_presence[k][0] > 0 && self.per_view_presence[k][1] > 0)
            .collect()
    }

    /// Label grid of one view, for PGM export.
    pub fn label_map(&self, view: ViewId, grid: (usize, usize)) -> Result<Array2<usize>> {
        let labels = self.view_labels(view);
        Array2::from_shape_vec(grid, labels.to_vec())
            .map_err(|_| Error::invalid(MODULE, "token grid does not match the view's label count"))
    }

    /// Plain-text sidecar: one line per cluster with its area (fraction of
    /// joint tokens), per-view counts and centroid depth.
    pub fn stats_text(&self) -> String {
        let total = self.labels.len() as f64;
        let mut s = String::new();
        let _ = writeln!(s, "clusters {}", self.num_clusters());
        let _ = writeln!(s, "tokens {} {}", self.view_sizes.0, self.view_sizes.1);
        let _ = writeln!(s, "spanning {}", self.spanning_clusters().len());
        let _ = writeln!(s, "# cluster area count_a count_b depth_m");
        for (k, [a, b]) in self.per_view_presence.iter().enumerate() {
            let _ = writeln!(
                s,
                "{k} {:.6} {a} {b} {:.4}",
                (a + b) as f64 / total,
                self.centroid_depths[k]
            );
        }
        s
    }

    pub fn write_stats(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.stats_text()).map_err(|e| Error::io(path, e))
    }
}

struct Joint {
    features: Array2<f64>,
    positions: Vec<(f64, f64)>,
    depths: Vec<f64>,
    sizes: (usize, usize),
}

impl Joint {
    fn new(a: &TokenField, b: &TokenField) -> Result<Self> {
        if a.view_id != ViewId::A || b.view_id != ViewId::B {
            return Err(Error::invalid(MODULE, "expected views tagged A and B"));
        }
        if a.features.ncols() != b.features.ncols() {
            return Err(Error::invalid(MODULE, "views have different feature widths"));
        }
        let features = ndarray::concatenate![ndarray::Axis(0), a.features, b.features];
        let positions = a.positions.iter().chain(&b.positions).copied().collect();
        let depths = a.depths.values.iter().chain(&b.depths.values).copied().collect();
        Ok(Joint {
            features,
            positions,
            depths,
            sizes: (a.len(), b.len()),
        })
    }
}

/// Farthest-point seeds in feature space, with the depth term added when
/// depth guidance is on. Position is left out so a single large region
/// does not collect several seeds. The first seed maximizes `<f, u>` for a
/// seeded random direction `u`, so the choice does not depend on token
/// order.
fn farthest_point_seeds(joint: &Joint, params: &ClusterParams) -> Vec<usize> {
    let n = joint.features.nrows();
    let d = joint.features.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let u = Array1::from(u);
    let first = (0..n)
        .max_by(|&i, &j| dot(joint.features.row(i), u.view()).total_cmp(&dot(joint.features.row(j), u.view())).then(j.cmp(&i)))
        .expect("nonempty");
    let metric = |i: usize, j: usize| {
        (1.0 - dot(joint.features.row(i), joint.features.row(j))).max(0.0)
            + params.depth_beta * (joint.depths[i] - joint.depths[j]).abs() / params.depth_scale
    };
    let mut seeds = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| metric(i, first)).collect();
    while seeds.len() < params.num_clusters {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        seeds.push(best);
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(metric(i, best));
        }
    }
    seeds
}

/// Clusters the 2P tokens of an image pair into M clusters. Centroids start
/// at farthest-point seeds; each round builds `T_feat/pos + beta * T_depth`,
/// runs Sinkhorn and moves centroid features, positions and depths to their
/// transport-weighted means. Labels are the argmax of the last plan.
pub fn cluster_joint_views(a: &TokenField, b: &TokenField, params: &ClusterParams) -> Result<ClusterAssignment> {
    params.validate()?;
    let joint = Joint::new(a, b)?;
    let n = joint.features.nrows();
    let m = params.num_clusters;
    if m > n {
        return Err(Error::invalid(MODULE, format!("{m} clusters requested for {n} tokens")));
    }

    let seeds = farthest_point_seeds(&joint, params);
    let mut centroids = joint.features.select(ndarray::Axis(0), &seeds);
    let mut cpos: Vec<(f64, f64)> = seeds.iter().map(|&i| joint.positions[i]).collect();
    let mut cdepth: Vec<f64> = seeds.iter().map(|&i| joint.depths[i]).collect();

    let mut plan = None;
    for _ in 0..params.outer_rounds {
        let mut cost = feature_position_cost_rows(&joint.features, &joint.positions, &centroids, &cpos, params.pos_alpha)?;
        if params.depth_beta > 0.0 {
            let dc = depth_cost(&joint.depths, &cdepth, params.depth_scale)?;
            cost = cost.add_scaled(&dc, params.depth_beta)?;
        }
        let p = sinkhorn_transport(&cost, params.lambda, params.sk_iterations)?;

        for j in 0..m {
            let w = p.plan.column(j);
            let mass = w.sum();
            if !(mass > 0.0) {
                continue;
            }
            let mut f = Array1::<f64>::zeros(joint.features.ncols());
            let (mut x, mut y, mut dep) = (0.0, 0.0, 0.0);
            for (i, &wi) in w.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                f.scaled_add(wi, &joint.features.row(i));
                x += wi * joint.positions[i].0;
                y += wi * joint.positions[i].1;
                dep += wi * joint.depths[i];
            }
            let norm = f.dot(&f).sqrt();
            if norm > DEGENERATE_NORM {
                centroids.row_mut(j).assign(&(f / norm));
            }
            cpos[j] = ((x / mass).clamp(0.0, 1.0), (y / mass).clamp(0.0, 1.0));
            cdepth[j] = dep / mass;
        }
        plan = Some(p);
    }
    let plan = plan.expect("at least one round");

    let labels = plan.hard_labels();
    let mut presence = vec![[0usize; 2]; m];
    for (i, &l) in labels.iter().enumerate() {
        presence[l][usize::from(i >= joint.sizes.0)] += 1;
    }
    Ok(ClusterAssignment {
        labels,
        centroids,
        centroid_positions: cpos,
        centroid_depths: cdepth,
        per_view_presence: presence,
        view_sizes: joint.sizes,
        plan,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectReps {
    /// `M' x d`, unit rows.
    pub reps: Array2<f64>,
    /// Cluster id of each row, ascending.
    pub cluster_ids: Vec<usize>,
}

impl ObjectReps {
    pub fn len(&self) -> usize {
        self.cluster_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster_ids.is_empty()
    }

    pub fn row_of(&self, cluster: usize) -> Option<usize> {
        self.cluster_ids.binary_search(&cluster).ok()
    }

    /// Member token indices of every kept cluster, aligned with rows.
    pub fn members(&self, labels: &[usize]) -> Vec<Vec<usize>> {
        self.cluster_ids
            .iter()
            .map(|&k| (0..labels.len()).filter(|&i| labels[i] == k).collect())
            .collect()
    }
}

/// Normalized mean of this view's member tokens for each cluster it touches.
pub fn pool_objects(view: &TokenField, assignment: &ClusterAssignment) -> Result<ObjectReps> {
    let labels = assignment.view_labels(view.view_id);
    pool_features(&view.features, labels, assignment.num_clusters())
}

pub fn pool_features(features: &Array2<f64>, labels: &[usize], num_clusters: usize) -> Result<ObjectReps> {
    if labels.len() != features.nrows() {
        return Err(Error::invalid(MODULE, "labels do not cover this view's tokens"));
    }
    let d = features.ncols();
    let mut sums = Array2::<f64>::zeros((num_clusters, d));
    let mut counts = vec![0usize; num_clusters];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_clusters {
            return Err(Error::invalid(MODULE, format!("label {l} out of range")));
        }
        counts[l] += 1;
        sums.row_mut(l).scaled_add(1.0, &features.row(i));
    }
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for k in 0..num_clusters {
        if counts[k] == 0 {
            continue;
        }
        let mean = sums.row(k).mapv(|v| v / counts[k] as f64);
        let norm = mean.dot(&mean).sqrt();
        if norm < DEGENERATE_NORM {
            continue;
        }
        rows.push(mean / norm);
        ids.push(k);
    }
    let mut reps = Array2::zeros((rows.len(), d));
    for (i, r) in rows.into_iter().enumerate() {
        reps.row_mut(i).assign(&r);
    }
    Ok(ObjectReps { reps, cluster_ids: ids })
}
