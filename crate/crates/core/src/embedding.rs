//! From-scratch 3-D neighbor embedding of prototype activation vectors:
//! exact kNN, fuzzy graph construction, and a seeded stochastic layout
//! optimizer, plus cluster-purity metrics and held-out projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ProtoPartsModel, Stage};
use crate::rng;
use crate::tensor::Tape;

/// Which sample set an embedded point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    New,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::New => "new",
        };
        f.write_str(s)
    }
}

/// One image's maximum similarity to every prototype, with identity tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector {
    pub point_id: String,
    pub label: usize,
    pub split: Split,
    /// P entries, one per prototype, each in (0, log(1/eps)].
    pub values: Vec<f32>,
}

/// Settings for the neighbor-embedding optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub k_neighbors: usize,
    /// Output dimensionality; fixed at 3.
    pub n_components: usize,
    pub min_dist: f32,
    pub epochs: usize,
    pub negative_samples: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            k_neighbors: 15,
            n_components: 3,
            min_dist: 0.1,
            epochs: 200,
            negative_samples: 5,
            learning_rate: 1.0,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    /// Check internal consistency against the number of points to embed.
    pub fn validate(&self, points: usize) -> Result<()> {
        if self.n_components != 3 {
            return Err(Error::InvalidConfig("n_components is fixed at 3".into()));
        }
        if self.k_neighbors == 0 || self.k_neighbors >= points {
            return Err(Error::InvalidConfig(format!(
                "k_neighbors must be in [1, {}) for {} points, got {}",
                points, points, self.k_neighbors
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if !(self.min_dist > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "min_dist and learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A point in the fitted 3-D map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPoint {
    pub point_id: String,
    pub label: usize,
    pub split: Split,
    pub coords: [f32; 3],
}

/// Exact k-nearest-neighbor lists with Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    /// Per point: k `(index, distance)` pairs sorted by distance then index;
    /// the point itself is excluded.
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

/// Symmetrized fuzzy neighborhood graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGraph {
    pub n: usize,
    /// Distance to each point's nearest neighbor.
    pub rho: Vec<f64>,
    /// Per-point kernel bandwidth from the binary search.
    pub sigma: Vec<f64>,
    /// Directed membership weights aligned with the kNN lists.
    pub directed: Vec<Vec<(usize, f64)>>,
    /// Undirected edges `(i, j, weight)` with `i < j`, ascending.
    pub edges: Vec<(usize, usize, f64)>,
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    let mut sum = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        sum += d * d;
    }
    sum.sqrt()
}

/// Exact kNN by full pairwise scan; ties broken by smaller index.
pub fn knn_graph(rows: &[Vec<f32>], k: usize) -> Result<KnnGraph> {
    let m = rows.len();
    if m == 0 {
        return Err(Error::Empty("kNN input"));
    }
    if k == 0 || k >= m {
        return Err(Error::InvalidInput(format!(
            "k must be in [1, {m}) for {m} points, got {k}"
        )));
    }
    let dim = rows[0].len();
    for r in rows {
        if r.len() != dim {
            return Err(Error::InvalidInput("ragged kNN input rows".into()));
        }
    }
    let mut neighbors = Vec::with_capacity(m);
    for i in 0..m {
        let mut all: Vec<(usize, f64)> = (0..m)
            .filter(|&j| j != i)
            .map(|j| (j, euclidean(&rows[i], &rows[j])))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        neighbors.push(all);
    }
    Ok(KnnGraph { k, neighbors })
}

const SIGMA_ITERS: usize = 64;
const SIGMA_LO: f64 = 1e-8;
const SIGMA_HI: f64 = 1e8;

fn smooth_knn_sigma(dists: &[f64], rho: f64, target: f64) -> f64 {
    let sum_at = |sigma: f64| -> f64 {
        dists.iter().map(|&d| (-((d - rho).max(0.0)) / sigma).exp()).sum()
    };
    let (mut lo, mut hi) = (SIGMA_LO, SIGMA_HI);
    for _ in 0..SIGMA_ITERS {
        let mid = 0.5 * (lo + hi);
        if sum_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Build the symmetrized fuzzy graph `W = w + wT - w.wT` from kNN lists.
pub fn fuzzy_graph(knn: &KnnGraph) -> Result<FuzzyGraph> {
    let n = knn.neighbors.len();
    if n == 0 {
        return Err(Error::Empty("kNN graph"));
    }
    let target = (knn.k as f64).log2();
    let mut rho = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut directed: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for list in &knn.neighbors {
        let r = list.first().map(|&(_, d)| d).unwrap_or(0.0);
        let dists: Vec<f64> = list.iter().map(|&(_, d)| d).collect();
        let s = smooth_knn_sigma(&dists, r, target);
        directed.push(
            list.iter().map(|&(j, d)| (j, (-((d - r).max(0.0)) / s).exp())).collect(),
        );
        rho.push(r);
        sigma.push(s);
    }
    let mut pairs = std::collections::BTreeMap::<(usize, usize), (f64, f64)>::new();
    for (i, list) in directed.iter().enumerate() {
        for &(j, w) in list {
            let key = (i.min(j), i.max(j));
            let entry = pairs.entry(key).or_insert((0.0, 0.0));
            if i < j {
                entry.0 = w;
            } else {
                entry.1 = w;
            }
        }
    }
    let edges = pairs
        .into_iter()
        .map(|((i, j), (wij, wji))| (i, j, wij + wji - wij * wji))
        .collect();
    Ok(FuzzyGraph { n, rho, sigma, directed, edges })
}

/// Target kernel: 1 inside `min_dist`, exponential decay beyond it.
fn target_kernel(d: f64, min_dist: f64) -> f64 {
    if d <= min_dist {
        1.0
    } else {
        (-(d - min_dist)).exp()
    }
}

/// Low-dimensional similarity kernel `1/(1 + a d^(2b))` used by the layout.
pub fn curve(d: f64, a: f64, b: f64) -> f64 {
    1.0 / (1.0 + a * d.powf(2.0 * b))
}

const FIT_POINTS: usize = 300;
const FIT_SPAN: f64 = 3.0;

/// Least-squares fit of `1/(1 + a d^(2b))` to the min-dist target kernel
/// over [0, 3], by damped Gauss-Newton.
pub fn fit_curve(min_dist: f32) -> (f64, f64) {
    let md = min_dist as f64;
    let grid: Vec<f64> =
        (0..FIT_POINTS).map(|i| i as f64 * FIT_SPAN / (FIT_POINTS - 1) as f64).collect();
    let targets: Vec<f64> = grid.iter().map(|&d| target_kernel(d, md)).collect();
    let (mut a, mut b) = (1.5f64, 0.9f64);
    for _ in 0..200 {
        let (mut jaa, mut jab, mut jbb, mut ra, mut rb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&d, &y) in grid.iter().zip(&targets) {
            if d == 0.0 {
                continue;
            }
            let p = d.powf(2.0 * b);
            let denom = 1.0 + a * p;
            let f = 1.0 / denom;
            let r = f - y;
            let dfda = -p / (denom * denom);
            let dfdb = -2.0 * a * p * d.ln() / (denom * denom);
            jaa += dfda * dfda;
            jab += dfda * dfdb;
            jbb += dfdb * dfdb;
            ra += dfda * r;
            rb += dfdb * r;
        }
        let damp = 1e-9;
        let det = (jaa + damp) * (jbb + damp) - jab * jab;
        if det.abs() < 1e-30 {
            break;
        }
        let da = (jbb * ra - jab * rb) / det;
        let db = (jaa * rb - jab * ra) / det;
        a = (a - da).max(1e-3);
        b = (b - db).max(1e-3);
        if da.abs() < 1e-12 && db.abs() < 1e-12 {
            break;
        }
    }
    (a, b)
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, i: usize) -> usize {
        let mut root = i;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut cur = i;
        while self.0[cur] != root {
            let next = self.0[cur];
            self.0[cur] = root;
            cur = next;
        }
        root
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
    }
}

fn is_connected(graph: &FuzzyGraph) -> bool {
    let mut uf = UnionFind::new(graph.n);
    for &(i, j, _) in &graph.edges {
        uf.union(i, j);
    }
    let root = uf.find(0);
    (1..graph.n).all(|i| uf.find(i) == root)
}

const INIT_NOISE_SIGMA: f64 = 0.1;
const SPECTRAL_ITERS: usize = 256;
const SPECTRAL_SCALE: f64 = 10.0;
const WORD_INIT: u64 = 1;
const WORD_NEGATIVE: u64 = 2;

/// Seeded Gaussian initialization, sigma 0.1.
fn gaussian_init(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = rng::stream(seed, &[rng::TAG_EMBED, WORD_INIT]);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| {
        // Box-Muller keeps this free of extra distribution state.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    (0..n)
        .map(|_| {
            [
                INIT_NOISE_SIGMA * normal(&mut rng),
                INIT_NOISE_SIGMA * normal(&mut rng),
                INIT_NOISE_SIGMA * normal(&mut rng),
            ]
        })
        .collect()
}

/// Eigenvectors 2-4 of the normalized adjacency by orthogonalized power
/// iteration, scaled so the largest coordinate magnitude is 10.
fn spectral_init(graph: &FuzzyGraph, seed: u64) -> Vec<[f64; 3]> {
    let n = graph.n;
    let mut degree = vec![0.0f64; n];
    for &(i, j, w) in &graph.edges {
        degree[i] += w;
        degree[j] += w;
    }
    let inv_sqrt: Vec<f64> =
        degree.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let matvec = |x: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        for &(i, j, w) in &graph.edges {
            let a = w * inv_sqrt[i] * inv_sqrt[j];
            out[i] += a * x[j];
            out[j] += a * x[i];
        }
    };
    // Leading eigenvector of the normalized adjacency is sqrt(degree).
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(4);
    let mut lead: Vec<f64> = degree.iter().map(|&d| d.sqrt()).collect();
    let norm = lead.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in lead.iter_mut() {
        *v /= norm.max(1e-300);
    }
    basis.push(lead);
    let mut rng = rng::stream(seed, &[rng::TAG_EMBED, WORD_INIT]);
    let mut scratch = vec![0.0f64; n];
    for _ in 0..3 {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        for _ in 0..SPECTRAL_ITERS {
            for prev in &basis {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
            matvec(&v, &mut scratch);
            let norm = scratch.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            for (x, s) in v.iter_mut().zip(&scratch) {
                *x = s / norm;
            }
        }
        basis.push(v);
    }
    let mut coords = vec![[0.0f64; 3]; n];
    let mut max_abs = 0.0f64;
    for i in 0..n {
        for c in 0..3 {
            coords[i][c] = basis[c + 1][i];
            max_abs = max_abs.max(coords[i][c].abs());
        }
    }
    let scale = if max_abs > 0.0 { SPECTRAL_SCALE / max_abs } else { 1.0 };
    for p in coords.iter_mut() {
        for c in p.iter_mut() {
            *c *= scale;
        }
    }
    coords
}

const GRAD_CLIP: f64 = 4.0;
const REPULSION_EPS: f64 = 0.001;

fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        let d = a[c] - b[c];
        s += d * d;
    }
    s
}

fn dist_sq32(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        let d = a[c] as f64 - b[c] as f64;
        s += d * d;
    }
    s
}

/// Fit 3-D coordinates to the fuzzy graph by seeded stochastic descent:
/// attraction along edges sampled inversely to weight, uniform negative
/// sampling for repulsion, learning rate decaying linearly to zero.
pub fn optimize_layout(graph: &FuzzyGraph, cfg: &EmbeddingConfig) -> Result<Vec<[f32; 3]>> {
    cfg.validate(graph.n)?;
    let (a, b) = fit_curve(cfg.min_dist);
    let init = if is_connected(graph) {
        spectral_init(graph, cfg.seed)
    } else {
        gaussian_init(graph.n, cfg.seed)
    };
    let mut coords: Vec<[f32; 3]> =
        init.into_iter().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect();
    let w_max = graph.edges.iter().map(|e| e.2).fold(0.0f64, f64::max);
    if w_max == 0.0 {
        return Err(Error::InvalidInput("fuzzy graph has no positive weights".into()));
    }
    let epochs = cfg.epochs;
    let eps_per_sample: Vec<f64> = graph
        .edges
        .iter()
        .map(|e| if e.2 * epochs as f64 >= w_max { w_max / e.2 } else { f64::INFINITY })
        .collect();
    let mut next_sample = eps_per_sample.clone();
    let mut rng = rng::stream(cfg.seed, &[rng::TAG_EMBED, WORD_NEGATIVE]);
    for epoch in 0..epochs {
        let alpha = cfg.learning_rate as f64 * (1.0 - epoch as f64 / epochs as f64);
        for (e, &(i, j, _)) in graph.edges.iter().enumerate() {
            if next_sample[e] > epoch as f64 {
                continue;
            }
            next_sample[e] += eps_per_sample[e];
            let d2 = dist_sq32(&coords[i], &coords[j]);
            if d2 > 0.0 {
                let coeff = (-2.0 * a * b * d2.powf(b - 1.0)) / (1.0 + a * d2.powf(b));
                for c in 0..3 {
                    let diff = coords[i][c] as f64 - coords[j][c] as f64;
                    let g = (coeff * diff).clamp(-GRAD_CLIP, GRAD_CLIP);
                    coords[i][c] = (coords[i][c] as f64 + alpha * g) as f32;
                    coords[j][c] = (coords[j][c] as f64 - alpha * g) as f32;
                }
            }
            for &head in &[i, j] {
                for _ in 0..cfg.negative_samples {
                    let t = rng.gen_range(0..graph.n);
                    if t == head {
                        continue;
                    }
                    let d2 = dist_sq32(&coords[head], &coords[t]);
                    let coeff = if d2 > 0.0 {
                        2.0 * b / ((REPULSION_EPS + d2) * (1.0 + a * d2.powf(b)))
                    } else {
                        0.0
                    };
                    for c in 0..3 {
                        let diff = coords[head][c] as f64 - coords[t][c] as f64;
                        let g = if coeff > 0.0 {
                            (coeff * diff).clamp(-GRAD_CLIP, GRAD_CLIP)
                        } else {
                            GRAD_CLIP
                        };
                        coords[head][c] = (coords[head][c] as f64 + alpha * g) as f32;
                    }
                }
            }
        }
        for p in coords.iter() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("embedding layout diverged at epoch {epoch}"),
                });
            }
        }
    }
    Ok(coords)
}

/// kNN -> fuzzy graph -> layout, carrying point identities through.
pub fn embed_points(points: &[ActivationVector], cfg: &EmbeddingConfig) -> Result<Vec<EmbeddedPoint>> {
    if points.is_empty() {
        return Err(Error::Empty("embedding input"));
    }
    let rows: Vec<Vec<f32>> = points.iter().map(|p| p.values.clone()).collect();
    let knn = knn_graph(&rows, cfg.k_neighbors)?;
    let graph = fuzzy_graph(&knn)?;
    let coords = optimize_layout(&graph, cfg)?;
    Ok(points
        .iter()
        .zip(coords)
        .map(|(p, coords)| EmbeddedPoint {
            point_id: p.point_id.clone(),
            label: p.label,
            split: p.split,
            coords,
        })
        .collect())
}

/// Per-point and mean same-label fraction among embedded nearest neighbors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    pub k: usize,
    pub mean: f64,
    pub per_point: Vec<f64>,
}

/// Fraction of each point's k nearest embedded neighbors sharing its label.
pub fn knn_purity(coords: &[[f32; 3]], labels: &[usize], k: usize) -> Result<PurityReport> {
    if coords.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} coordinates but {} labels",
            coords.len(),
            labels.len()
        )));
    }
    let rows: Vec<Vec<f32>> = coords.iter().map(|c| c.to_vec()).collect();
    let knn = knn_graph(&rows, k)?;
    let per_point: Vec<f64> = knn
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, list)| {
            list.iter().filter(|&&(j, _)| labels[j] == labels[i]).count() as f64 / k as f64
        })
        .collect();
    let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
    Ok(PurityReport { k, mean, per_point })
}

/// Same-label fraction among a held-out point's k nearest embedded training
/// points: the certainty score for a new classification.
pub fn point_certainty(
    coords: &[[f32; 3]],
    labels: &[usize],
    query: [f32; 3],
    label: usize,
    k: usize,
) -> Result<f64> {
    if coords.len() != labels.len() {
        return Err(Error::InvalidInput("coordinate/label length mismatch".into()));
    }
    if k == 0 || k > coords.len() {
        return Err(Error::InvalidInput(format!(
            "certainty k must be in [1, {}], got {k}",
            coords.len()
        )));
    }
    let mut order: Vec<(usize, f64)> = coords
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let q = [query[0], query[1], query[2]];
            (j, euclidean(&q, c))
        })
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let same = order[..k].iter().filter(|&&(j, _)| labels[j] == label).count();
    Ok(same as f64 / k as f64)
}

/// Place a held-out activation vector on a frozen trained map: one epoch of
/// attraction toward its k nearest training activations, starting from their
/// embedded mean.
pub fn project_new(
    train: &[ActivationVector],
    train_coords: &[[f32; 3]],
    query: &[f32],
    cfg: &EmbeddingConfig,
) -> Result<[f32; 3]> {
    if train.len() != train_coords.len() {
        return Err(Error::InvalidInput("training vector/coordinate length mismatch".into()));
    }
    cfg.validate(train.len())?;
    for t in train {
        if t.values.len() != query.len() {
            return Err(Error::InvalidInput(format!(
                "query has {} entries but training vectors have {}",
                query.len(),
                t.values.len()
            )));
        }
    }
    let mut order: Vec<(usize, f64)> = train
        .iter()
        .enumerate()
        .map(|(j, t)| (j, euclidean(query, &t.values)))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let nearest = &order[..cfg.k_neighbors];
    let (a, b) = fit_curve(cfg.min_dist);
    let mut pos = [0.0f64; 3];
    for &(j, _) in nearest {
        for c in 0..3 {
            pos[c] += train_coords[j][c] as f64;
        }
    }
    for c in pos.iter_mut() {
        *c /= cfg.k_neighbors as f64;
    }
    for &(j, _) in nearest {
        let anchor = [
            train_coords[j][0] as f64,
            train_coords[j][1] as f64,
            train_coords[j][2] as f64,
        ];
        let d2 = dist_sq(&pos, &anchor);
        if d2 > 0.0 {
            let coeff = (-2.0 * a * b * d2.powf(b - 1.0)) / (1.0 + a * d2.powf(b));
            for c in 0..3 {
                let g = (coeff * (pos[c] - anchor[c])).clamp(-GRAD_CLIP, GRAD_CLIP);
                pos[c] += cfg.learning_rate as f64 * g;
            }
        }
    }
    Ok([pos[0] as f32, pos[1] as f32, pos[2] as f32])
}

/// Max-similarity row per image over the un-augmented train split then the
/// test split, in stable id order.
pub fn activation_vectors(
    model: &mut ProtoPartsModel,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Vec<ActivationVector>> {
    if !model.prototypes.all_pushed() {
        return Err(Error::InvalidInput(
            "model has unpushed prototypes; push before extracting activations".into(),
        ));
    }
    if dataset.train.is_empty() && dataset.test.is_empty() {
        return Err(Error::Empty("activation dataset"));
    }
    let mut out = Vec::new();
    let base = dataset.base_train();
    activation_rows(model, &base, Split::Train, batch_size, &mut out)?;
    let test: Vec<&crate::data::ImagePatch> = dataset.test.iter().collect();
    activation_rows(model, &test, Split::Test, batch_size, &mut out)?;
    Ok(out)
}

/// Append one activation row per patch, preserving order.
pub fn activation_rows(
    model: &mut ProtoPartsModel,
    patches: &[&crate::data::ImagePatch],
    split: Split,
    batch_size: usize,
    out: &mut Vec<ActivationVector>,
) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let p = model.prototypes.count();
    for chunk in patches.chunks(batch_size) {
        let batch = model.batch_tensor(chunk)?;
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, batch, Stage::Eval)?;
        let scores = tape.value(pass.scores);
        for (row, patch) in chunk.iter().enumerate() {
            out.push(ActivationVector {
                point_id: patch.id.clone(),
                label: patch.class_id,
                split,
                values: scores.data()[row * p..(row + 1) * p].to_vec(),
            });
        }
    }
    Ok(())
}

/// Render embedded points as CSV: `umap1,umap2,umap3,label,split,point_id`.
pub fn embedding_csv(points: &[EmbeddedPoint], class_names: &[String]) -> Result<String> {
    let mut out = String::from("umap1,umap2,umap3,label,split,point_id\n");
    for p in points {
        let name = class_names
            .get(p.label)
            .ok_or_else(|| Error::InvalidInput(format!("label {} has no class name", p.label)))?;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.coords[0], p.coords[1], p.coords[2], name, p.split, p.point_id
        ));
    }
    Ok(out)
}
