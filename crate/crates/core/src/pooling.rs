//! Token Pooling and baseline token downsamplers.
//!
//! Token Pooling replaces `N` tokens by `K` cluster centers chosen to
//! minimise the asymmetric Chamfer reconstruction error
//!
//! ```text
//! loss(F, F') = sum_i  w_i * min_j ||f_i - f'_j||^2        (w_i = 1 unweighted)
//! ```
//!
//! Clustering alternates a nearest-center assignment with a center update:
//! the (weighted) mean for K-Means, or the cluster member with the smallest
//! summed squared distance to the other members for K-Medoids.
//!
//! Conventions:
//!
//! * Every argmin/argmax tie resolves to the lowest index.
//! * Row 0 is the classification token. With `protect_first` it is passed
//!   through untouched and takes no part in clustering or in the reported
//!   loss; `k` then counts the remaining tokens only.
//! * Iteration stops once the assignment repeats or after `max_iters`
//!   center updates.
//! * A cluster left empty after assignment is given the token with the
//!   largest squared error (taken from a cluster with at least two members)
//!   as a singleton.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pairwise_sq_dists, sample_without_replacement, sq_dist, Matrix, Rng};
use crate::scoring::ScoreVector;
use crate::transformer::TokenSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMethod {
    Kmeans,
    Wkmeans,
    Kmedoids,
    Wkmedoids,
    Random,
    Importance,
    Grid,
}

impl PoolMethod {
    pub const ALL: [PoolMethod; 7] = [
        PoolMethod::Kmeans,
        PoolMethod::Wkmeans,
        PoolMethod::Kmedoids,
        PoolMethod::Wkmedoids,
        PoolMethod::Random,
        PoolMethod::Importance,
        PoolMethod::Grid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolMethod::Kmeans => "kmeans",
            PoolMethod::Wkmeans => "wkmeans",
            PoolMethod::Kmedoids => "kmedoids",
            PoolMethod::Wkmedoids => "wkmedoids",
            PoolMethod::Random => "random",
            PoolMethod::Importance => "importance",
            PoolMethod::Grid => "grid",
        }
    }

    pub fn is_weighted(self) -> bool {
        matches!(self, PoolMethod::Wkmeans | PoolMethod::Wkmedoids)
    }

    pub fn is_medoid(self) -> bool {
        matches!(self, PoolMethod::Kmedoids | PoolMethod::Wkmedoids)
    }

    pub fn is_clustering(self) -> bool {
        matches!(
            self,
            PoolMethod::Kmeans | PoolMethod::Wkmeans | PoolMethod::Kmedoids | PoolMethod::Wkmedoids
        )
    }

    /// Whether the method needs per-token weights (or scores).
    pub fn needs_weights(self) -> bool {
        self.is_weighted() || self == PoolMethod::Importance
    }
}

impl FromStr for PoolMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown pooling method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// The `k` tokens with the largest weights.
    #[default]
    TopkWeight,
    /// `k` tokens drawn uniformly without replacement.
    Random,
}

impl FromStr for InitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" | "topk_weight" => Ok(InitPolicy::TopkWeight),
            "random" => Ok(InitPolicy::Random),
            other => Err(Error::usage(format!("unknown init policy `{other}`"))),
        }
    }
}

pub const DEFAULT_MAX_ITERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub method: PoolMethod,
    pub k: usize,
    pub max_iters: usize,
    pub init: InitPolicy,
    pub seed: u64,
    pub protect_first: bool,
    pub emit_counts: bool,
}

impl PoolSpec {
    pub fn new(method: PoolMethod, k: usize) -> Self {
        PoolSpec {
            method,
            k,
            max_iters: DEFAULT_MAX_ITERS,
            init: InitPolicy::TopkWeight,
            seed: 0,
            protect_first: true,
            emit_counts: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::usage("k must be at least 1"));
        }
        if self.max_iters < 1 {
            return Err(Error::usage("max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Outcome of a pooling call.
///
/// `assignment` has one entry per pooled (non-protected) token and maps it to
/// a row of `centers`. `medoid_indices` are row indices into the original
/// token set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterResult {
    pub method: PoolMethod,
    pub protected: bool,
    pub assignment: Vec<usize>,
    #[serde(serialize_with = "serialize_rows")]
    pub centers: Matrix,
    pub medoid_indices: Option<Vec<usize>>,
    pub iterations: usize,
    pub loss: f64,
    /// Loss before the first update and after every update.
    pub loss_history: Vec<f64>,
    /// Summed carry counts (1 per token when absent) of each cluster.
    pub counts: Vec<f64>,
}

fn serialize_rows<S: serde::Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.rows()))?;
    for r in m.row_iter() {
        seq.serialize_element(r)?;
    }
    seq.end()
}

/// Asymmetric Chamfer divergence `sum_i w_i min_j ||f_i - fhat_j||^2`.
pub fn chamfer_loss(f: &Matrix, fhat: &Matrix, weights: Option<&[f64]>) -> Result<f64> {
    if f.cols() != fhat.cols() {
        return Err(Error::data(format!(
            "chamfer: dimension {} vs {}",
            f.cols(),
            fhat.cols()
        )));
    }
    if fhat.rows() == 0 {
        return Err(Error::data("chamfer: empty reconstruction set"));
    }
    if let Some(w) = weights {
        if w.len() != f.rows() {
            return Err(Error::data("chamfer: weight count differs from token count"));
        }
    }
    let mut total = 0.0;
    for (i, row) in f.row_iter().enumerate() {
        let best = fhat
            .row_iter()
            .map(|c| sq_dist(row, c))
            .fold(f64::INFINITY, f64::min);
        total += weights.map_or(1.0, |w| w[i]) * best;
    }
    Ok(total)
}

/// Lowest-index argmin.
fn argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// Split of a token set into the protected classification token and the rows
/// that take part in pooling.
struct Pooled<'a> {
    tokens: &'a TokenSet,
    offset: usize,
}

impl<'a> Pooled<'a> {
    fn new(tokens: &'a TokenSet, protect_first: bool) -> Self {
        Pooled {
            tokens,
            offset: usize::from(protect_first && !tokens.is_empty()),
        }
    }

    fn len(&self) -> usize {
        self.tokens.len() - self.offset
    }

    fn indices(&self) -> Vec<usize> {
        (self.offset..self.tokens.len()).collect()
    }

    fn features(&self) -> Matrix {
        self.tokens.features.select_rows(&self.indices())
    }

    fn weights(&self) -> Option<Vec<f64>> {
        self.tokens.weights.as_ref().map(|w| w[self.offset..].to_vec())
    }

    fn counts(&self) -> Vec<f64> {
        match &self.tokens.counts {
            Some(c) => c[self.offset..].to_vec(),
            None => vec![1.0; self.len()],
        }
    }

    /// Output token set: protected row followed by `rows`.
    fn assemble(&self, rows: &Matrix, counts: &[f64], emit_counts: bool) -> Result<TokenSet> {
        let mut parts = Vec::with_capacity(2);
        let mut out_counts = Vec::with_capacity(rows.rows() + 1);
        if self.offset == 1 {
            parts.push(self.tokens.features.select_rows(&[0]));
            out_counts.push(self.tokens.counts.as_ref().map_or(1.0, |c| c[0]));
        }
        parts.push(rows.clone());
        out_counts.extend_from_slice(counts);
        let features = Matrix::vstack(&parts)?;
        Ok(TokenSet {
            features,
            weights: None,
            counts: emit_counts.then_some(out_counts),
            grid: None,
        })
    }
}

fn initial_centers(weights: &[f64], k: usize, init: InitPolicy, seed: u64) -> Result<Vec<usize>> {
    match init {
        InitPolicy::TopkWeight => {
            let mut order: Vec<usize> = (0..weights.len()).collect();
            // stable sort keeps the lower index first among equal weights
            order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
            order.truncate(k);
            Ok(order)
        }
        InitPolicy::Random => {
            let mut rng = Rng::new(seed);
            sample_without_replacement(&mut rng, weights.len(), k, None)
        }
    }
}

/// Nearest-center assignment given a token-to-center distance function.
fn assign(n: usize, k: usize, dist: impl Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>) {
    let mut a = Vec::with_capacity(n);
    let mut err = Vec::with_capacity(n);
    for i in 0..n {
        let (j, d) = argmin((0..k).map(|j| dist(i, j)));
        a.push(j);
        err.push(d);
    }
    (a, err)
}

/// Gives every empty cluster a singleton. Returns the tokens moved, paired
/// with the cluster they now form.
fn repair_empty(assignment: &mut [usize], err: &mut [f64], k: usize) -> Vec<(usize, usize)> {
    let mut moved = Vec::new();
    let mut sizes = vec![0usize; k];
    for &j in assignment.iter() {
        sizes[j] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut pick: Option<usize> = None;
        for i in 0..assignment.len() {
            if sizes[assignment[i]] < 2 {
                continue;
            }
            if pick.is_none_or(|p| err[i] > err[p]) {
                pick = Some(i);
            }
        }
        // k < n guarantees some cluster holds two tokens
        let i = pick.expect("a cluster with two members exists");
        sizes[assignment[i]] -= 1;
        sizes[empty] = 1;
        assignment[i] = empty;
        err[i] = 0.0;
        moved.push((i, empty));
    }
    moved
}

fn cluster_sums(assignment: &[usize], k: usize, values: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0; k];
    for (&j, v) in assignment.iter().zip(values) {
        s[j] += v;
    }
    s
}

/// Mean of each cluster, weighted when `weights` is given.
///
/// Weights are divided by the largest weight in the cluster before
/// accumulating, so constant weights reproduce the unweighted mean bit for
/// bit.
fn update_means(x: &Matrix, assignment: &[usize], k: usize, weights: Option<&[f64]>) -> Matrix {
    let m = x.cols();
    let mut wmax = vec![0.0f64; k];
    if let Some(w) = weights {
        for (i, &j) in assignment.iter().enumerate() {
            wmax[j] = wmax[j].max(w[i]);
        }
    }
    let mut sums = Matrix::zeros(k, m);
    let mut mass = vec![0.0; k];
    for (i, &j) in assignment.iter().enumerate() {
        let wi = weights.map_or(1.0, |w| w[i] / wmax[j]);
        mass[j] += wi;
        for (s, v) in sums.row_mut(j).iter_mut().zip(x.row(i)) {
            *s += wi * v;
        }
    }
    for j in 0..k {
        let z = mass[j];
        sums.row_mut(j).iter_mut().for_each(|v| *v /= z);
    }
    sums
}

/// Member of each cluster minimising the summed squared distance to the
/// other members.
fn update_medoids(dist: &Matrix, assignment: &[usize], k: usize) -> Vec<usize> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &j) in assignment.iter().enumerate() {
        members[j].push(i);
    }
    members
        .iter()
        .map(|mem| {
            let (best, _) = argmin(mem.iter().map(|&i| mem.iter().map(|&o| dist.get(i, o)).sum()));
            mem[best]
        })
        .collect()
}

struct Clustering {
    assignment: Vec<usize>,
    centers: Matrix,
    medoids: Option<Vec<usize>>,
    iterations: usize,
    history: Vec<f64>,
}

fn run_kmeans(x: &Matrix, weights: Option<&[f64]>, init: Vec<usize>, max_iters: usize) -> Result<Clustering> {
    let n = x.rows();
    let k = init.len();
    let mut centers = x.select_rows(&init);
    let mut history = vec![chamfer_loss(x, &centers, weights)?];
    let mut prev: Option<Vec<usize>> = None;
    let mut iterations = 0;
    while iterations < max_iters {
        let (mut a, mut err) = assign(n, k, |i, j| sq_dist(x.row(i), centers.row(j)));
        repair_empty(&mut a, &mut err, k);
        if prev.as_ref() == Some(&a) {
            break;
        }
        centers = update_means(x, &a, k, weights);
        iterations += 1;
        history.push(chamfer_loss(x, &centers, weights)?);
        prev = Some(a);
    }
    Ok(Clustering {
        assignment: prev.expect("at least one iteration runs"),
        centers,
        medoids: None,
        iterations,
        history,
    })
}

fn run_kmedoids(x: &Matrix, weights: Option<&[f64]>, init: Vec<usize>, max_iters: usize) -> Result<Clustering> {
    let n = x.rows();
    let k = init.len();
    // token-to-token distances are computed once and reused by every step
    let dist = pairwise_sq_dists(x, x)?;
    let loss_of = |medoids: &[usize]| -> f64 {
        (0..n)
            .map(|i| {
                let d = medoids.iter().map(|&m| dist.get(i, m)).fold(f64::INFINITY, f64::min);
                weights.map_or(1.0, |w| w[i]) * d
            })
            .sum()
    };
    let mut medoids = init;
    let mut history = vec![loss_of(&medoids)];
    let mut prev: Option<Vec<usize>> = None;
    let mut iterations = 0;
    while iterations < max_iters {
        let (mut a, mut err) = assign(n, k, |i, j| dist.get(i, medoids[j]));
        repair_empty(&mut a, &mut err, k);
        if prev.as_ref() == Some(&a) {
            break;
        }
        medoids = update_medoids(&dist, &a, k);
        iterations += 1;
        history.push(loss_of(&medoids));
        prev = Some(a);
    }
    Ok(Clustering {
        assignment: prev.expect("at least one iteration runs"),
        centers: x.select_rows(&medoids),
        medoids: Some(medoids),
        iterations,
        history,
    })
}

/// Downsamples `f` according to `spec`.
///
/// Weighted methods and importance selection read their weights from
/// `f.weights`. Unweighted clustering still uses `f.weights` (all 1 when
/// absent) to pick its initial centers. If `k` is at least the number of
/// poolable tokens the input is returned unchanged with zero loss and zero
/// iterations. Grid pooling ignores `k`.
pub fn token_pool(f: &TokenSet, spec: &PoolSpec) -> Result<(TokenSet, ClusterResult)> {
    spec.validate()?;
    f.features.check_finite()?;
    if spec.method.needs_weights() && f.weights.is_none() {
        return Err(Error::usage(format!(
            "method `{}` requires per-token weights",
            spec.method.name()
        )));
    }
    if spec.method == PoolMethod::Grid {
        return grid_pool_with_result(f, spec.emit_counts);
    }

    let pooled = Pooled::new(f, spec.protect_first);
    let n = pooled.len();
    let x = pooled.features();
    let counts_in = pooled.counts();
    if spec.k >= n {
        let out = TokenSet {
            counts: spec.emit_counts.then(|| {
                let mut c = Vec::with_capacity(f.len());
                if pooled.offset == 1 {
                    c.push(f.counts.as_ref().map_or(1.0, |c| c[0]));
                }
                c.extend_from_slice(&counts_in);
                c
            }),
            ..f.clone()
        };
        let result = ClusterResult {
            method: spec.method,
            protected: pooled.offset == 1,
            assignment: (0..n).collect(),
            centers: x,
            medoid_indices: spec.method.is_medoid().then(|| pooled.indices()),
            iterations: 0,
            loss: 0.0,
            loss_history: vec![0.0],
            counts: counts_in,
        };
        return Ok((out, result));
    }

    let weights = pooled.weights();
    let objective_weights = if spec.method.is_weighted() {
        weights.as_deref()
    } else {
        None
    };

    let clustering = match spec.method {
        PoolMethod::Kmeans | PoolMethod::Wkmeans | PoolMethod::Kmedoids | PoolMethod::Wkmedoids => {
            let init_w = weights.clone().unwrap_or_else(|| vec![1.0; n]);
            let init = initial_centers(&init_w, spec.k, spec.init, spec.seed)?;
            if spec.method.is_medoid() {
                run_kmedoids(&x, objective_weights, init, spec.max_iters)?
            } else {
                run_kmeans(&x, objective_weights, init, spec.max_iters)?
            }
        }
        PoolMethod::Random | PoolMethod::Importance => {
            let mut rng = Rng::new(spec.seed);
            let probs = match spec.method {
                PoolMethod::Importance => weights.as_deref(),
                _ => None,
            };
            let mut chosen = sample_without_replacement(&mut rng, n, spec.k, probs)?;
            chosen.sort_unstable();
            selection_clustering(&x, chosen)?
        }
        PoolMethod::Grid => unreachable!("handled above"),
    };

    let counts = cluster_sums(&clustering.assignment, spec.k, &counts_in);
    let out = pooled.assemble(&clustering.centers, &counts, spec.emit_counts)?;
    let loss = *clustering.history.last().expect("history is never empty");
    let result = ClusterResult {
        method: spec.method,
        protected: pooled.offset == 1,
        assignment: clustering.assignment,
        centers: clustering.centers,
        medoid_indices: clustering
            .medoids
            .map(|m| m.into_iter().map(|i| i + pooled.offset).collect()),
        iterations: clustering.iterations,
        loss,
        loss_history: clustering.history,
        counts,
    };
    Ok((out, result))
}

/// Treats a fixed subset of rows as centers and assigns every token to its
/// nearest one.
fn selection_clustering(x: &Matrix, chosen: Vec<usize>) -> Result<Clustering> {
    let centers = x.select_rows(&chosen);
    let (assignment, _) = assign(x.rows(), chosen.len(), |i, j| sq_dist(x.row(i), centers.row(j)));
    let loss = chamfer_loss(x, &centers, None)?;
    Ok(Clustering {
        assignment,
        centers,
        medoids: Some(chosen),
        iterations: 0,
        history: vec![loss],
    })
}

fn select(f: &TokenSet, k: usize, seed: u64, protect_first: bool, probs: Option<&[f64]>) -> Result<TokenSet> {
    let pooled = Pooled::new(f, protect_first);
    if k > pooled.len() {
        return Err(Error::usage(format!(
            "cannot keep {k} of {} tokens",
            pooled.len()
        )));
    }
    let mut rng = Rng::new(seed);
    let mut chosen = sample_without_replacement(&mut rng, pooled.len(), k, probs)?;
    chosen.sort_unstable();
    let mut rows: Vec<usize> = (0..pooled.offset).collect();
    rows.extend(chosen.iter().map(|i| i + pooled.offset));
    Ok(TokenSet {
        features: f.features.select_rows(&rows),
        weights: f.weights.as_ref().map(|w| rows.iter().map(|&i| w[i]).collect()),
        counts: f.counts.as_ref().map(|c| rows.iter().map(|&i| c[i]).collect()),
        grid: None,
    })
}

/// Keeps `k` tokens drawn uniformly without replacement, in their original
/// order.
pub fn random_select(f: &TokenSet, k: usize, seed: u64, protect_first: bool) -> Result<TokenSet> {
    select(f, k, seed, protect_first, None)
}

/// Keeps `k` tokens drawn without replacement with probability proportional
/// to their score. With `protect_first` the first score is ignored.
pub fn importance_select(
    f: &TokenSet,
    scores: &ScoreVector,
    k: usize,
    seed: u64,
    protect_first: bool,
) -> Result<TokenSet> {
    if scores.len() != f.len() {
        return Err(Error::data(format!(
            "{} scores for {} tokens",
            scores.len(),
            f.len()
        )));
    }
    let offset = usize::from(protect_first);
    select(f, k, seed, protect_first, Some(&scores.values[offset..]))
}

fn grid_layout(f: &TokenSet) -> Result<(usize, usize, usize)> {
    let (h, w) = f
        .grid
        .ok_or_else(|| Error::usage("grid pooling requires a token grid"))?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::usage(format!(
            "grid pooling needs even grid dimensions, got {h}x{w}"
        )));
    }
    let offset = match f.len() - h * w {
        0 => 0,
        1 => 1,
        _ => {
            return Err(Error::data(format!(
                "grid {h}x{w} does not fit {} tokens",
                f.len()
            )))
        }
    };
    Ok((h, w, offset))
}

fn grid_pool_with_result(f: &TokenSet, emit_counts: bool) -> Result<(TokenSet, ClusterResult)> {
    let (h, w, offset) = grid_layout(f)?;
    let (oh, ow) = (h / 2, w / 2);
    let m = f.dim();
    let mut centers = Matrix::zeros(oh * ow, m);
    let mut assignment = vec![0; h * w];
    let counts_in: Vec<f64> = match &f.counts {
        Some(c) => c[offset..].to_vec(),
        None => vec![1.0; h * w],
    };
    for r in 0..oh {
        for c in 0..ow {
            let j = r * ow + c;
            let patch = [
                (2 * r) * w + 2 * c,
                (2 * r) * w + 2 * c + 1,
                (2 * r + 1) * w + 2 * c,
                (2 * r + 1) * w + 2 * c + 1,
            ];
            let out = centers.row_mut(j);
            for &p in &patch {
                assignment[p] = j;
                for (o, v) in out.iter_mut().zip(f.features.row(p + offset)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|v| *v /= 4.0);
        }
    }
    let x = f.features.select_rows(&(offset..f.len()).collect::<Vec<_>>());
    let loss = chamfer_loss(&x, &centers, None)?;
    let counts = cluster_sums(&assignment, oh * ow, &counts_in);
    let pooled = Pooled { tokens: f, offset };
    let mut out = pooled.assemble(&centers, &counts, emit_counts)?;
    out.grid = Some((oh, ow));
    let result = ClusterResult {
        method: PoolMethod::Grid,
        protected: offset == 1,
        assignment,
        centers,
        medoid_indices: None,
        iterations: 0,
        loss,
        loss_history: vec![loss],
        counts,
    };
    Ok((out, result))
}

/// Non-overlapping 2x2 mean pooling over the token grid. A classification
/// token in row 0 (present when `N == h * w + 1`) is passed through.
pub fn grid_pool(f: &TokenSet) -> Result<TokenSet> {
    f.features.check_finite()?;
    grid_pool_with_result(f, f.counts.is_some()).map(|(t, _)| t)
}
