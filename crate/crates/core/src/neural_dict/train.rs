use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::kmeans::kmeans_centres;
use super::offline::DictKey;
use super::{TrainConfig, TrainError, TrainReport, TrainState};
use crate::capture::CaptureDataset;
use crate::codec::{matching_pursuit, Dictionary, Provenance};
use crate::merge::MergePlan;
use crate::rng::{random_unit, rng_for};
use crate::CacheKind;

const NORM_FLOOR: f64 = 1e-12;
const DIV_FLOOR: f64 = 1e-12;
/// Relative change of the epoch training loss below which a run counts as converged.
const CONVERGENCE_TOL: f64 = 1e-3;

const KMEANS_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

/// Fixed pursuit code of one training chunk: accumulated `(atom, coefficient)` pairs.
pub type ChunkCode = Vec<(usize, f64)>;

/// Scales every column of `w` to unit norm. Columns with norm below `1e-12` are replaced by a
/// random unit vector drawn from `rng`.
pub fn renorm(w: &mut Array2<f64>, rng: &mut impl Rng) {
    let d = w.nrows();
    for mut col in w.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm < NORM_FLOOR || !norm.is_finite() {
            col.assign(&random_unit(rng, d));
        } else {
            col.mapv_inplace(|v| v / norm);
        }
    }
}

/// k-means centroids of the rows of `x` as `n` unit columns.
pub fn kmeans_init(x: ArrayView2<f64>, n: usize, seed: u64, iters: usize) -> Result<Array2<f64>, TrainError> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(TrainError::EmptyInput);
    }
    if n == 0 {
        return Err(TrainError::InvalidConfig("num_atoms must be positive".into()));
    }
    let mut rng = rng_for(seed, KMEANS_STREAM);
    let mut w = kmeans_centres(x, n, iters, &mut rng);
    renorm(&mut w, &mut rng);
    Ok(w)
}

fn check_width(w: ArrayView2<f64>, batch: ArrayView2<f64>) -> Result<(), TrainError> {
    if batch.ncols() != w.nrows() {
        return Err(TrainError::DimensionMismatch { expected: w.nrows(), got: batch.ncols() });
    }
    Ok(())
}

/// `x - W r` for a sparse code.
fn residual_of(w: ArrayView2<f64>, x: ndarray::ArrayView1<f64>, code: &ChunkCode) -> Array1<f64> {
    let mut r = x.to_owned();
    for &(j, c) in code {
        r.scaled_add(-c, &w.column(j));
    }
    r
}

/// Summed squared reconstruction error of `batch` under `s`-step pursuit against `w`, with the
/// codes that produced it.
pub fn loss_mse(w: ArrayView2<f64>, batch: ArrayView2<f64>, s: usize) -> Result<(f64, Vec<ChunkCode>), TrainError> {
    check_width(w, batch)?;
    let per: Vec<(f64, ChunkCode)> = (0..batch.nrows())
        .into_par_iter()
        .map(|i| {
            let x = batch.row(i);
            let out = matching_pursuit(x, w, s);
            let r = residual_of(w, x, &out.entries);
            (r.dot(&r), out.entries)
        })
        .collect();
    let loss = per.iter().map(|(l, _)| l).sum();
    Ok((loss, per.into_iter().map(|(_, c)| c).collect()))
}

/// `(1/N^2) ||I - W^T W||_F^2`.
pub fn loss_div(w: ArrayView2<f64>) -> f64 {
    let n = w.ncols();
    let mut g = w.t().dot(&w);
    for i in 0..n {
        g[[i, i]] -= 1.0;
    }
    g.iter().map(|v| v * v).sum::<f64>() / (n * n) as f64
}

pub fn adaptive_beta(last_mse: f64, last_div: f64, beta_scale: f64, beta_cap: f64) -> f64 {
    (beta_scale * last_mse / last_div.max(DIV_FLOOR)).min(beta_cap)
}

/// `-2 sum_x (x - W r) r^T` with the codes held fixed.
pub fn mse_gradient(w: ArrayView2<f64>, batch: ArrayView2<f64>, codes: &[ChunkCode]) -> Array2<f64> {
    let mut g = Array2::zeros(w.raw_dim());
    for (x, code) in batch.rows().into_iter().zip(codes) {
        let r = residual_of(w, x, code);
        for &(j, c) in code {
            g.column_mut(j).scaled_add(-2.0 * c, &r);
        }
    }
    g
}

/// `(4/N^2) W (W^T W - I)`.
pub fn div_gradient(w: ArrayView2<f64>) -> Array2<f64> {
    let n = w.ncols();
    let mut gram = w.t().dot(&w);
    for i in 0..n {
        gram[[i, i]] -= 1.0;
    }
    w.dot(&gram) * (4.0 / (n * n) as f64)
}

/// One descent step on `L_mse + beta * L_div` followed by the beta update and renormalisation.
pub fn grad_step(
    state: &mut TrainState,
    batch: ArrayView2<f64>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(), TrainError> {
    let (mse, codes) = loss_mse(state.weights.view(), batch, cfg.s_train)?;
    let div = loss_div(state.weights.view());
    if state.step == 0 {
        state.beta = adaptive_beta(mse, div, cfg.beta_scale, cfg.beta_cap);
    }

    let mut grad = mse_gradient(state.weights.view(), batch, &codes);
    if state.beta > 0.0 {
        grad.scaled_add(state.beta, &div_gradient(state.weights.view()));
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteGradient { step: state.step, mse, div, beta: state.beta });
    }
    state.weights.scaled_add(-cfg.learning_rate, &grad);

    state.beta = adaptive_beta(mse, div, cfg.beta_scale, cfg.beta_cap);
    state.last_mse = mse;
    state.last_div = div;
    renorm(&mut state.weights, rng);
    state.step += 1;
    Ok(())
}

fn mean_loss(w: ArrayView2<f64>, x: ArrayView2<f64>, s: usize) -> Result<Option<f64>, TrainError> {
    if x.nrows() == 0 {
        return Ok(None);
    }
    Ok(Some(loss_mse(w, x, s)?.0 / x.nrows() as f64))
}

fn to_dictionary(w: &Array2<f64>, kind: CacheKind) -> Result<Dictionary, TrainError> {
    // Renormalise after narrowing so the f32 columns pass the unit-norm check on their own.
    let mut atoms = w.mapv(|v| v as f32);
    for mut col in atoms.columns_mut() {
        let norm = col.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        col.mapv_inplace(|v| (v as f64 / norm) as f32);
    }
    Ok(Dictionary::new(atoms, kind, Provenance::Offline)?)
}

/// Trains one dictionary on the rows of `x`. `on_step` sees the state after every completed step.
pub fn train_neural_dict_with<F>(
    x: ArrayView2<f64>,
    cfg: &TrainConfig,
    validation: ArrayView2<f64>,
    kind: CacheKind,
    mut on_step: F,
) -> Result<(Dictionary, TrainReport), TrainError>
where
    F: FnMut(&TrainState),
{
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(TrainError::EmptyInput);
    }
    if validation.nrows() > 0 && validation.ncols() != x.ncols() {
        return Err(TrainError::DimensionMismatch { expected: x.ncols(), got: validation.ncols() });
    }
    let mut state = TrainState::new(kmeans_init(x, cfg.num_atoms, cfg.seed, cfg.kmeans_iters)?);
    let mut rng = rng_for(cfg.seed, TRAIN_STREAM);

    let mut report = TrainReport {
        initial_train_mse: mean_loss(state.weights.view(), x, cfg.s_train)?.unwrap_or(0.0),
        initial_val_mse: mean_loss(state.weights.view(), validation, cfg.s_train)?,
        train_mse: Vec::new(),
        val_mse: Vec::new(),
        div_loss: Vec::new(),
        beta: Vec::new(),
        converged: false,
        epoch_seconds: Vec::new(),
    };

    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        state.epoch = epoch;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = x.select(Axis(0), idx);
            grad_step(&mut state, batch.view(), cfg, &mut rng)?;
            epoch_loss += state.last_mse;
            on_step(&state);
        }
        report.train_mse.push(epoch_loss / x.nrows() as f64);
        if let Some(v) = mean_loss(state.weights.view(), validation, cfg.s_train)? {
            report.val_mse.push(v);
        }
        report.div_loss.push(state.last_div);
        report.beta.push(state.beta);
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
    }

    if let [.., prev, last] = report.train_mse[..] {
        report.converged = (prev - last).abs() <= CONVERGENCE_TOL * prev.max(f64::MIN_POSITIVE);
    }
    Ok((to_dictionary(&state.weights, kind)?, report))
}

pub fn train_neural_dict(
    x: ArrayView2<f64>,
    cfg: &TrainConfig,
    validation: ArrayView2<f64>,
    kind: CacheKind,
) -> Result<(Dictionary, TrainReport), TrainError> {
    train_neural_dict_with(x, cfg, validation, kind, |_| {})
}

/// Trained dictionaries and their reports, keyed by `(group, head, chunk)`.
#[derive(Debug, Clone)]
pub struct MergedTraining {
    pub dictionaries: BTreeMap<DictKey, Dictionary>,
    pub reports: BTreeMap<DictKey, TrainReport>,
}

/// Deterministic train/validation split of the rows of `x`.
fn split(x: &Array2<f64>, fraction: f64, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let n = x.nrows();
    let n_val = ((n as f64) * fraction).floor() as usize;
    if n_val == 0 || n_val >= n {
        return (x.clone(), Array2::zeros((0, x.ncols())));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, 2));
    let (val, train) = idx.split_at(n_val);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (x.select(Axis(0), &train), x.select(Axis(0), &val))
}

fn key_seed(seed: u64, key: DictKey) -> u64 {
    seed ^ (u64::from(key.group) << 42) ^ (u64::from(key.head) << 21) ^ u64::from(key.chunk)
}

/// Trains one dictionary of `per_head_atoms` columns for every `(group, head, chunk)`.
///
/// Each head's vectors are concatenated across the layers of a group and split into `cfg.s_n`
/// contiguous channel chunks. With `head_shared`, all heads of a group are pooled and the result
/// is stored under head 0.
pub fn train_on_merged_layers(
    dataset: &CaptureDataset,
    plan: &MergePlan,
    cfg: &TrainConfig,
    per_head_atoms: usize,
    head_shared: bool,
) -> Result<MergedTraining, TrainError> {
    let header = dataset.header();
    plan.validate(header.num_layers).map_err(|e| TrainError::PlanMismatch(e.to_string()))?;
    if plan.kind != header.kind {
        return Err(TrainError::PlanMismatch(format!(
            "plan is for {} cache, capture holds {}",
            plan.kind, header.kind
        )));
    }
    let cfg = TrainConfig { num_atoms: per_head_atoms, ..cfg.clone() };
    cfg.validate()?;
    let head_dim = dataset.head_dim();
    if !head_dim.is_multiple_of(cfg.s_n) {
        return Err(TrainError::InvalidConfig(format!("head_dim {head_dim} is not divisible by s_n = {}", cfg.s_n)));
    }
    let chunk_dim = head_dim / cfg.s_n;

    let head_sets: Vec<Vec<u32>> = if head_shared {
        vec![(0..header.num_heads).collect()]
    } else {
        (0..header.num_heads).map(|h| vec![h]).collect()
    };

    let mut jobs = Vec::new();
    for (g, layers) in plan.groups.iter().enumerate() {
        for heads in &head_sets {
            let mut parts = Vec::new();
            for &l in layers {
                for &h in heads {
                    parts.push(dataset.require_block(l, h)?.vectors.view());
                }
            }
            let all = ndarray::concatenate(Axis(0), &parts).expect("blocks share head_dim").mapv(f64::from);
            for c in 0..cfg.s_n {
                let key = DictKey { group: g as u32, head: heads[0], chunk: c as u32 };
                jobs.push((key, all.slice(s![.., c * chunk_dim..(c + 1) * chunk_dim]).to_owned()));
            }
        }
    }

    let results: Vec<(DictKey, Dictionary, TrainReport)> = jobs
        .into_par_iter()
        .map(|(key, x)| {
            let seed = key_seed(cfg.seed, key);
            let (train, val) = split(&x, cfg.validation_fraction, seed);
            let local = TrainConfig { seed, ..cfg.clone() };
            let (dict, report) = train_neural_dict(train.view(), &local, val.view(), header.kind)?;
            Ok((key, dict, report))
        })
        .collect::<Result<_, TrainError>>()?;

    let mut out = MergedTraining { dictionaries: BTreeMap::new(), reports: BTreeMap::new() };
    for (key, dict, report) in results {
        out.dictionaries.insert(key, dict);
        out.reports.insert(key, report);
    }
    Ok(out)
}
