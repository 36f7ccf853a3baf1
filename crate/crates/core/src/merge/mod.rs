//! Layer merging by cache-space similarity.
//!
//! Each layer's vectors are normalised, projected to 2-D by a PCA fitted jointly on the pair of
//! layers being compared, and binned into a 200x200 histogram. Two layers may share a group when
//! the Jensen-Shannon divergence between their histograms is small; a greedy left-to-right scan
//! builds the [`MergePlan`].

mod plan;

pub use plan::MergePlan;

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{CaptureDataset, CaptureError};

pub const DEFAULT_BINS: usize = 200;
pub const DEFAULT_DELTA1: f64 = 0.20;
pub const DEFAULT_DELTA2: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error("PCA needs at least 3 rows, got {0}")]
    TooFewRows(usize),
    #[error("PCA needs at least 2 columns, got {0}")]
    TooFewColumns(usize),
    #[error("degenerate covariance ({context}): all rows are identical")]
    DegenerateCovariance { context: String },
    #[error("histogram shapes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("invalid merge plan: {0}")]
    InvalidPlan(String),
    #[error("merge constraint violated: {0}")]
    ConstraintViolated(String),
}

/// Scales every row to unit l2 norm. Rows with norm below `1e-12` are dropped; the second
/// value is how many.
pub fn normalize_rows(x: ArrayView2<f32>) -> (Array2<f64>, usize) {
    let mut rows = Vec::with_capacity(x.nrows() * x.ncols());
    let mut kept = 0;
    for r in x.rows() {
        let norm = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        rows.extend(r.iter().map(|&v| v as f64 / norm));
        kept += 1;
    }
    let out = Array2::from_shape_vec((kept, x.ncols()), rows).expect("shape matches");
    let dropped = x.nrows() - kept;
    (out, dropped)
}

/// Top-2 principal directions of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Array1<f64>,
    /// `2 x d`, rows orthonormal, in descending eigenvalue order.
    pub directions: Array2<f64>,
    pub eigenvalues: [f64; 2],
}

impl Pca2 {
    /// Projects rows of `x` onto the two directions (after centring).
    pub fn project(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let centred = &x - &self.mean.view().insert_axis(Axis(0));
        centred.dot(&self.directions.t())
    }
}

/// Fits the top two eigenvectors of the sample covariance of `x`.
///
/// Eigenvectors are sign-normalised so that each direction's largest-magnitude entry is positive.
pub fn pca2_fit(x: ArrayView2<f64>) -> Result<Pca2, MergeError> {
    let (n, d) = x.dim();
    if n < 3 {
        return Err(MergeError::TooFewRows(n));
    }
    if d < 2 {
        return Err(MergeError::TooFewColumns(d));
    }
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let centred = &x - &mean.view().insert_axis(Axis(0));
    let cov = centred.t().dot(&centred) / (n as f64 - 1.0);
    let scale = cov.diag().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale <= 1e-300 {
        return Err(MergeError::DegenerateCovariance { context: format!("{n} rows x {d} columns") });
    }

    let m = DMatrix::from_fn(d, d, |i, j| cov[(i, j)]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut directions = Array2::zeros((2, d));
    for (row, &k) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(k);
        let mut pivot = 0;
        for i in 1..d {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            directions[(row, i)] = sign * v[i];
        }
    }
    let eigenvalues = [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]];
    Ok(Pca2 { mean, directions, eigenvalues })
}

/// Axis-aligned binning box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    /// Smallest box containing every point of every set, widened by 1% of its extent on each
    /// side. Zero-extent axes are widened to a small fixed width.
    pub fn covering(sets: &[ArrayView2<f64>]) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for s in sets {
            for r in s.rows() {
                for k in 0..2 {
                    min[k] = min[k].min(r[k]);
                    max[k] = max[k].max(r[k]);
                }
            }
        }
        for k in 0..2 {
            if !min[k].is_finite() {
                min[k] = -0.5;
                max[k] = 0.5;
            }
            let extent = max[k] - min[k];
            let pad = if extent > 1e-12 { 0.01 * extent } else { 1e-6_f64.max(min[k].abs() * 1e-6) };
            min[k] -= pad;
            max[k] += pad;
        }
        Self { min, max }
    }

    fn bin(&self, axis: usize, v: f64, bins: usize) -> usize {
        let t = (v - self.min[axis]) / (self.max[axis] - self.min[axis]);
        let b = (t * bins as f64).floor();
        if b.is_nan() || b < 0.0 {
            0
        } else {
            (b as usize).min(bins - 1)
        }
    }
}

/// Normalised `bins x bins` histogram, row-major over (first axis, second axis).
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2d {
    pub bins: usize,
    pub mass: Vec<f64>,
}

/// A layer's 2-D cache-space distribution under a shared projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDistribution {
    pub layer: u32,
    pub histogram: Histogram2d,
    pub bounds: Bounds,
}

/// Bins `points` (`n x 2`). Points on or beyond an edge fall into the edge bin, so all mass is
/// kept.
pub fn histogram2d(points: ArrayView2<f64>, bounds: &Bounds, bins: usize) -> Histogram2d {
    assert!(bins > 0 && points.ncols() == 2);
    let mut counts = vec![0u64; bins * bins];
    for r in points.rows() {
        let i = bounds.bin(0, r[0], bins);
        let j = bounds.bin(1, r[1], bins);
        counts[i * bins + j] += 1;
    }
    let total = points.nrows().max(1) as f64;
    Histogram2d { bins, mass: counts.into_iter().map(|c| c as f64 / total).collect() }
}

/// Jensen-Shannon divergence in bits, so the result lies in `[0, 1]`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, MergeError> {
    if p.len() != q.len() {
        return Err(MergeError::ShapeMismatch(p.len(), q.len()));
    }
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += a * (a / m).log2();
        }
        if b > 0.0 {
            acc += b * (b / m).log2();
        }
    }
    Ok((0.5 * acc).clamp(0.0, 1.0))
}

/// How heads are combined when comparing two layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    /// Vectors from all heads form one sample.
    #[default]
    Pooled,
    /// Divergence per head, averaged over heads.
    PerHeadMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsdOptions {
    pub bins: usize,
    /// Maximum vectors per layer (per head in per-head mode).
    pub sample_cap: usize,
    pub seed: u64,
    pub aggregation: HeadAggregation,
}

impl Default for JsdOptions {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS, sample_cap: 10_000, seed: 0, aggregation: HeadAggregation::Pooled }
    }
}

fn layer_sample(
    dataset: &CaptureDataset,
    layer: u32,
    heads: &[u32],
    opts: &JsdOptions,
) -> Result<Array2<f32>, MergeError> {
    let parts = heads
        .iter()
        .map(|&h| dataset.require_block(layer, h).map(|b| b.vectors.view()))
        .collect::<Result<Vec<_>, _>>()?;
    let pooled = concatenate(Axis(0), &parts).expect("blocks share head_dim");
    if pooled.nrows() <= opts.sample_cap {
        return Ok(pooled);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut idx = rand::seq::index::sample(&mut rng, pooled.nrows(), opts.sample_cap).into_vec();
    idx.sort_unstable();
    Ok(pooled.select(Axis(0), &idx))
}

/// Histograms of two samples under a PCA fitted on both, with shared bounds.
pub fn pair_distributions(
    a: ArrayView2<f32>,
    b: ArrayView2<f32>,
    bins: usize,
) -> Result<(Histogram2d, Histogram2d, Bounds), MergeError> {
    let (na, _) = normalize_rows(a);
    let (nb, _) = normalize_rows(b);
    let both = concatenate(Axis(0), &[na.view(), nb.view()]).expect("same width");
    let pca = pca2_fit(both.view())?;
    let pa = pca.project(na.view());
    let pb = pca.project(nb.view());
    let bounds = Bounds::covering(&[pa.view(), pb.view()]);
    Ok((histogram2d(pa.view(), &bounds, bins), histogram2d(pb.view(), &bounds, bins), bounds))
}

/// Divergence between the cache-space distributions of two layers.
pub fn layer_pair_jsd(
    dataset: &CaptureDataset,
    layer_a: u32,
    layer_b: u32,
    opts: &JsdOptions,
) -> Result<f64, MergeError> {
    let heads: Vec<u32> = (0..dataset.header().num_heads).collect();
    let one = |hs: &[u32]| -> Result<f64, MergeError> {
        let a = layer_sample(dataset, layer_a, hs, opts)?;
        let b = layer_sample(dataset, layer_b, hs, opts)?;
        let (pa, pb, _) = pair_distributions(a.view(), b.view(), opts.bins)?;
        jsd(&pa.mass, &pb.mass)
    };
    match opts.aggregation {
        HeadAggregation::Pooled => one(&heads),
        HeadAggregation::PerHeadMean => {
            let per = heads.iter().map(|&h| one(&[h])).collect::<Result<Vec<_>, _>>()?;
            Ok(per.iter().sum::<f64>() / per.len() as f64)
        }
    }
}

/// Divergences between each pair of adjacent layers, `JSD(l, l+1)`.
pub fn adjacent_jsd(dataset: &CaptureDataset, opts: &JsdOptions) -> Result<Vec<f64>, MergeError> {
    let n = dataset.header().num_layers;
    (1..n).into_par_iter().map(|l| layer_pair_jsd(dataset, l - 1, l, opts)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeOptions {
    pub delta1: f64,
    pub delta2: f64,
    pub jsd: JsdOptions,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self { delta1: DEFAULT_DELTA1, delta2: DEFAULT_DELTA2, jsd: JsdOptions::default() }
    }
}

/// Greedy contiguous grouping: the next layer joins the current group while its divergence to
/// every member is at most `delta1` and the running sum of consecutive divergences stays at most
/// `delta2`.
pub fn build_merge_plan(dataset: &CaptureDataset, opts: &MergeOptions) -> Result<MergePlan, MergeError> {
    let n = dataset.header().num_layers;
    let mut cache: HashMap<(u32, u32), f64> = HashMap::new();
    let mut groups: Vec<Vec<u32>> = vec![vec![0]];
    let mut chain = 0.0;

    for layer in 1..n {
        let current = groups.last().expect("at least one group");
        let missing: Vec<u32> = current.iter().copied().filter(|m| !cache.contains_key(&(*m, layer))).collect();
        let fresh = missing
            .par_iter()
            .map(|&m| layer_pair_jsd(dataset, m, layer, &opts.jsd).map(|d| (m, d)))
            .collect::<Result<Vec<_>, _>>()?;
        for (m, d) in fresh {
            cache.insert((m, layer), d);
        }
        let pairwise_ok = current.iter().all(|m| cache[&(*m, layer)] <= opts.delta1);
        let step = cache[&(layer - 1, layer)];
        if pairwise_ok && chain + step <= opts.delta2 {
            chain += step;
            groups.last_mut().unwrap().push(layer);
        } else {
            chain = 0.0;
            groups.push(vec![layer]);
        }
    }

    Ok(MergePlan { kind: dataset.header().kind, delta1: opts.delta1, delta2: opts.delta2, groups })
}
