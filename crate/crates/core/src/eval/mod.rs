//! Quality and footprint measurements.

mod ablation;
mod footprint;

pub use ablation::{
    ablation_dictionary_size, ablation_diversity, ablation_online_part, ablation_suite, ablation_value_chunking,
    AblationOutcome, AblationReport,
};
pub use footprint::{
    asymptotic_ratio, bytes_at, compression_ratio_at, footprint_csv, footprint_curve, FootprintMethod, FootprintRow,
    ModelGeometry, FOOTPRINT_CSV_HEADER,
};

use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::CaptureDataset;
use crate::codec::{Codec, CodecConfig, CodecError, Dictionary, SparseCode};
use crate::neural_dict::{OfflineDictionary, TrainError};
use crate::runtime::{build_prompt_dictionary, PromptDictionary, RuntimeError};
use crate::CacheKind;

/// Version stamped into every JSON report.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    /// Mean over rows of the squared residual norm.
    pub mse: f64,
    pub mean_cosine: f64,
    pub outlier_fraction: f64,
}

/// Cosine similarity; two zero vectors count as identical, one zero vector as orthogonal.
pub fn cosine(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 && bb == 0.0 {
        1.0
    } else if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
    }
}

fn compare_rows(x: ArrayView2<f32>, y: ArrayView2<f32>) -> (f64, f64) {
    let n = x.nrows();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mut sq = 0.0;
    let mut cos = 0.0;
    for (a, b) in x.rows().into_iter().zip(y.rows()) {
        sq += a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>();
        cos += cosine(a, b);
    }
    (sq / n as f64, cos / n as f64)
}

/// Reconstruction quality of `codes` against the rows of `x` they encode.
pub fn reconstruction_metrics(
    x: ArrayView2<f32>,
    codes: &[SparseCode],
    dicts: &[Dictionary],
    cfg: &CodecConfig,
) -> Result<ReconstructionMetrics, EvalError> {
    if codes.len() != x.nrows() {
        return Err(EvalError::Shape(format!("{} codes for {} rows", codes.len(), x.nrows())));
    }
    let codec = Codec::new(*cfg, dicts.to_vec())?;
    let y = codec.decode_all(codes)?;
    if y.ncols() != x.ncols() && x.nrows() > 0 {
        return Err(EvalError::Shape(format!("rows are {} wide, codes decode to {}", x.ncols(), y.ncols())));
    }
    let (mse, mean_cosine) = compare_rows(x, y.view());
    let outliers = codes.iter().filter(|c| c.is_outlier()).count();
    Ok(ReconstructionMetrics {
        mse,
        mean_cosine,
        outlier_fraction: if codes.is_empty() { 0.0 } else { outliers as f64 / codes.len() as f64 },
    })
}

/// `softmax(Q K^T / sqrt(d)) V` in f32 with max subtraction. With `causal`, query `i` is placed at
/// position `l - q + i` and sees keys up to and including it.
pub fn attention_output(
    q: ArrayView2<f32>,
    k: ArrayView2<f32>,
    v: ArrayView2<f32>,
    causal: bool,
) -> Result<Array2<f32>, EvalError> {
    let (l, d) = k.dim();
    if v.nrows() != l || q.ncols() != d {
        return Err(EvalError::Shape(format!("q {:?}, k {:?}, v {:?} are inconsistent", q.dim(), k.dim(), v.dim())));
    }
    if causal && q.nrows() > l {
        return Err(EvalError::Shape("causal attention needs at least as many keys as queries".into()));
    }
    let scale = 1.0 / (d as f32).sqrt();
    let scores = q.dot(&k.t()) * scale;
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    for (i, row) in scores.rows().into_iter().enumerate() {
        let visible = if causal { l - q.nrows() + i + 1 } else { l };
        if visible == 0 {
            continue;
        }
        let row = row.slice(s![..visible]);
        let max = row.fold(f32::NEG_INFINITY, |m, &x| m.max(x));
        let w = row.mapv(|x| (x - max).exp());
        let total: f32 = w.sum();
        out.row_mut(i).assign(&(w.dot(&v.slice(s![..visible, ..])) / total));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionFidelity {
    /// Mean over queries of the output cosine similarity.
    pub cosine: f64,
    pub max_abs_error: f64,
}

/// Attention outputs on exact and on decoded inputs, compared row by row.
pub fn compare_outputs(exact: ArrayView2<f32>, approx: ArrayView2<f32>) -> AttentionFidelity {
    let (_, cosine) = compare_rows(exact, approx);
    let max_abs_error = exact.iter().zip(approx).map(|(&a, &b)| (a as f64 - b as f64).abs()).fold(0.0, f64::max);
    AttentionFidelity { cosine, max_abs_error }
}

/// Compresses `k` and `v` with their codecs, decodes them and compares attention outputs.
pub fn attention_fidelity(
    k: ArrayView2<f32>,
    v: ArrayView2<f32>,
    q: ArrayView2<f32>,
    key_codec: &Codec,
    value_codec: &Codec,
    causal: bool,
) -> Result<AttentionFidelity, EvalError> {
    let kt = key_codec.decode_all(&key_codec.encode_batch(k)?)?;
    let vt = value_codec.decode_all(&value_codec.encode_batch(v)?)?;
    let exact = attention_output(q, k, v, causal)?;
    let approx = attention_output(q, kt.view(), vt.view(), causal)?;
    Ok(compare_outputs(exact.view(), approx.view()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    pub online_size: usize,
    pub seed: u64,
    /// Also measure attention fidelity per lane.
    pub attention: bool,
    pub causal: bool,
    /// Queries per lane for the attention proxy.
    pub max_queries: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { online_size: 256, seed: 0, attention: false, causal: false, max_queries: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub s: usize,
    pub s_n: usize,
    pub equivalent_bits: f64,
    pub mse: f64,
    pub mean_cosine: f64,
    pub outlier_fraction: f64,
    pub attention_cosine: Option<f64>,
    pub attention_max_abs_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneRow {
    pub s: usize,
    pub layer: u32,
    pub head: u32,
    pub mse: f64,
    pub mean_cosine: f64,
    pub outlier_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub schema_version: u32,
    pub kind: CacheKind,
    pub head_dim: usize,
    pub options: SweepOptions,
    pub sweep: Vec<SweepRow>,
    pub lanes: Vec<LaneRow>,
    pub footprint: Vec<FootprintRow>,
}

pub const SWEEP_CSV_HEADER: &str =
    "s,s_n,equivalent_bits,mse,mean_cosine,outlier_fraction,attention_cosine,attention_max_abs_error";
pub const LANES_CSV_HEADER: &str = "s,layer,head,mse,mean_cosine,outlier_fraction";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.s,
            r.s_n,
            r.equivalent_bits,
            r.mse,
            r.mean_cosine,
            r.outlier_fraction,
            opt(r.attention_cosine),
            opt(r.attention_max_abs_error)
        );
    }
    out
}

pub fn lanes_csv(rows: &[LaneRow]) -> String {
    let mut out = format!("{LANES_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.s, r.layer, r.head, r.mse, r.mean_cosine, r.outlier_fraction);
    }
    out
}

/// Evenly spaced rows of `x`, at most `n`.
fn spread_rows(x: ArrayView2<f32>, n: usize) -> Array2<f32> {
    let l = x.nrows();
    let idx: Vec<usize> = (0..n).map(|i| i * l / n.max(1)).collect();
    x.select(Axis(0), &idx)
}

struct LaneResult {
    row: LaneRow,
    count: usize,
    outliers: usize,
    sq_sum: f64,
    cos_sum: f64,
    attention: Option<AttentionFidelity>,
}

fn evaluate_lane(
    x: ArrayView2<f32>,
    layer: u32,
    head: u32,
    dict: &PromptDictionary,
    cfg: &CodecConfig,
    kind: CacheKind,
    opts: &SweepOptions,
) -> Result<LaneResult, EvalError> {
    let codec = Codec::new(*cfg, dict.dictionaries().to_vec())?;
    let codes = codec.encode_batch(x)?;
    let m = reconstruction_metrics(x, &codes, codec.dictionaries(), cfg)?;
    let n = x.nrows();
    let outliers = codes.iter().filter(|c| c.is_outlier()).count();
    let attention = if opts.attention && n > 0 {
        // Self-attention over the lane's own vectors; only the captured side is compressed.
        let y = codec.decode_all(&codes)?;
        let nq = opts.max_queries.min(n);
        let picked = if opts.causal { x.slice(s![n - nq.., ..]).to_owned() } else { spread_rows(x, nq) };
        let q = picked * (cfg.head_dim as f32).sqrt();
        let (k_exact, v_exact) = (x, x);
        let (k_approx, v_approx) = match kind {
            CacheKind::Key => (y.view(), x),
            CacheKind::Value => (x, y.view()),
        };
        let exact = attention_output(q.view(), k_exact, v_exact, opts.causal)?;
        let approx = attention_output(q.view(), k_approx, v_approx, opts.causal)?;
        Some(compare_outputs(exact.view(), approx.view()))
    } else {
        None
    };
    Ok(LaneResult {
        row: LaneRow {
            s: cfg.s,
            layer,
            head,
            mse: m.mse,
            mean_cosine: m.mean_cosine,
            outlier_fraction: m.outlier_fraction,
        },
        count: n,
        outliers,
        sq_sum: m.mse * n as f64,
        cos_sum: m.mean_cosine * n as f64,
        attention,
    })
}

/// Reconstruction (and optionally attention) fidelity of every lane for each MP-level in `s_list`.
/// Prompt dictionaries are built once per lane from the lane's own vectors.
pub fn sweep_s(
    dataset: &CaptureDataset,
    offline: &OfflineDictionary,
    s_list: &[usize],
    template: &CodecConfig,
    opts: &SweepOptions,
) -> Result<FidelityReport, EvalError> {
    if s_list.is_empty() {
        return Err(EvalError::InvalidSweep("s_list is empty".into()));
    }
    let kind = dataset.header().kind;
    let prompt: Vec<(u32, u32, PromptDictionary)> = dataset
        .blocks()
        .par_iter()
        .map(|b| {
            build_prompt_dictionary(offline, b.layer, b.head, b.vectors.view(), opts.online_size, opts.seed)
                .map(|d| (b.layer, b.head, d))
        })
        .collect::<Result<_, RuntimeError>>()?;

    let points: Vec<(SweepRow, Vec<LaneRow>)> = s_list
        .par_iter()
        .map(|&s| {
            let cfg = CodecConfig { s, ..*template };
            cfg.validate()?;
            let lanes = prompt
                .par_iter()
                .zip(dataset.blocks().par_iter())
                .map(|((l, h, d), b)| evaluate_lane(b.vectors.view(), *l, *h, d, &cfg, kind, opts))
                .collect::<Result<Vec<_>, EvalError>>()?;
            let total: usize = lanes.iter().map(|r| r.count).sum();
            let denom = total.max(1) as f64;
            let att: Vec<AttentionFidelity> = lanes.iter().filter_map(|r| r.attention).collect();
            let row = SweepRow {
                s,
                s_n: cfg.s_n,
                equivalent_bits: crate::codec::equivalent_bits(&cfg),
                mse: lanes.iter().map(|r| r.sq_sum).sum::<f64>() / denom,
                mean_cosine: if total == 0 { 1.0 } else { lanes.iter().map(|r| r.cos_sum).sum::<f64>() / denom },
                outlier_fraction: lanes.iter().map(|r| r.outliers).sum::<usize>() as f64 / denom,
                attention_cosine: (!att.is_empty())
                    .then(|| att.iter().map(|a| a.cosine).sum::<f64>() / att.len() as f64),
                attention_max_abs_error: (!att.is_empty())
                    .then(|| att.iter().map(|a| a.max_abs_error).fold(0.0, f64::max)),
            };
            Ok((row, lanes.into_iter().map(|r| r.row).collect()))
        })
        .collect::<Result<_, EvalError>>()?;

    let mut sweep = Vec::new();
    let mut lanes = Vec::new();
    for (row, lane_rows) in points {
        sweep.push(row);
        lanes.extend(lane_rows);
    }
    Ok(FidelityReport {
        schema_version: SCHEMA_VERSION,
        kind,
        head_dim: template.head_dim,
        options: opts.clone(),
        sweep,
        lanes,
        footprint: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{generate_synthetic, Generator, SyntheticSpec};
    use crate::codec::{encode_batch, Provenance};
    use crate::runtime::tests::offline_from;
    use ndarray::array;
    use rand::Rng;

    fn dict(atoms: Array2<f32>) -> Dictionary {
        Dictionary::new(atoms, CacheKind::Key, Provenance::Offline).unwrap()
    }

    #[test]
    fn metrics_examples() {
        let d = vec![dict(Array2::eye(2))];
        let cfg = CodecConfig::new(2, 2, 1);
        let x = array![[1.0, 0.0], [0.0, -2.0], [0.0, 0.0]];
        let codes = encode_batch(x.view(), &d, &cfg).unwrap();
        let m = reconstruction_metrics(x.view(), &codes, &d, &cfg).unwrap();
        assert_eq!((m.mse, m.mean_cosine, m.outlier_fraction), (0.0, 1.0, 0.0));

        let raw: Vec<SparseCode> = x.rows().into_iter().map(|r| SparseCode::outlier(r.to_vec())).collect();
        let m = reconstruction_metrics(x.view(), &raw, &d, &cfg).unwrap();
        assert_eq!((m.mse, m.mean_cosine, m.outlier_fraction), (0.0, 1.0, 1.0));

        let hand = vec![dict(array![[1.0, 0.6], [0.0, 0.8]])];
        let x = array![[1.0, 1.0]];
        let codes = encode_batch(x.view(), &hand, &cfg).unwrap();
        let m = reconstruction_metrics(x.view(), &codes, &hand, &cfg).unwrap();
        assert!((m.mse - 0.0144).abs() < 1e-6, "{}", m.mse);

        assert!(matches!(reconstruction_metrics(x.view(), &[], &hand, &cfg), Err(EvalError::Shape(_))));
    }

    /// Direct evaluation of softmax attention in f64 as an oracle.
    fn naive_attention(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>) -> Array2<f64> {
        let d = k.ncols() as f64;
        let mut out = Array2::zeros((q.nrows(), v.ncols()));
        for i in 0..q.nrows() {
            let logits: Vec<f64> = (0..k.nrows())
                .map(|j| q.row(i).iter().zip(k.row(j)).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / d.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..k.nrows() {
                let w = logits[j].exp() / z;
                for c in 0..v.ncols() {
                    out[[i, c]] += w * v[[j, c]] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_oracle_and_handles_extremes() {
        let mut rng = crate::rng::rng_for(3, 0);
        let mut m = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0f32..1.0));
        let (q, k, v) = (m(5, 8), m(12, 8), m(12, 8));
        let out = attention_output(q.view(), k.view(), v.view(), false).unwrap();
        let oracle = naive_attention(&q, &k, &v);
        for (a, b) in out.iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
        // Huge logits stay finite thanks to max subtraction.
        let big = attention_output((q.clone() * 1e4).view(), k.view(), v.view(), false).unwrap();
        assert!(big.iter().all(|x| x.is_finite()));
        // The first causal query of a full-length block sees only the first key.
        let c = attention_output(k.view(), k.view(), v.view(), true).unwrap();
        assert!((&c.row(0) - &v.row(0)).iter().all(|d| d.abs() < 1e-6));

        let zero = Array2::<f32>::zeros((12, 8));
        let f = compare_outputs(
            attention_output(q.view(), k.view(), zero.view(), false).unwrap().view(),
            attention_output(q.view(), k.view(), zero.view(), false).unwrap().view(),
        );
        assert_eq!((f.cosine, f.max_abs_error), (1.0, 0.0));
        assert!(attention_output(q.view(), k.view(), m(3, 8).view(), false).is_err());
    }

    #[test]
    fn lossless_codes_give_exact_attention() {
        let mut rng = crate::rng::rng_for(4, 0);
        let mut m = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0f32..1.0));
        let (q, k, v) = (m(4, 8), m(16, 8), m(16, 8));
        let cfg = CodecConfig::new(8, 4, 2);
        let chunks = vec![dict(Array2::eye(4)), dict(Array2::eye(4))];
        let codec = Codec::new(cfg, chunks).unwrap();
        let f = attention_fidelity(k.view(), v.view(), q.view(), &codec, &codec, false).unwrap();
        assert!(f.max_abs_error < 1e-6 && (f.cosine - 1.0).abs() < 1e-6, "{f:?}");

        let small = codec.with_s(1).unwrap();
        let g = attention_fidelity(k.view(), v.view(), q.view(), &small, &small, false).unwrap();
        assert!(g.cosine <= f.cosine);
    }

    #[test]
    fn sweep_is_ordered_and_monotone() {
        let spec = SyntheticSpec {
            num_layers: 1,
            num_heads: 1,
            head_dim: 4,
            tokens_per_layer: 50,
            generator: Generator::GaussianMixture { num_components: 3, spread: 0.3 },
            seed: 1,
            kind: CacheKind::Key,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let off = offline_from(Array2::eye(4), 1, CacheKind::Key);
        let opts = SweepOptions { online_size: 0, attention: true, ..SweepOptions::default() };
        let rep = sweep_s(&ds, &off, &[1, 2, 4], &CodecConfig::new(4, 1, 1), &opts).unwrap();
        assert_eq!(rep.sweep.iter().map(|r| r.s).collect::<Vec<_>>(), vec![1, 2, 4]);
        assert!(rep.sweep.windows(2).all(|w| w[1].mse <= w[0].mse + 1e-12));
        assert!(rep.sweep[2].mse < 1e-10);
        assert!((rep.sweep[2].attention_cosine.unwrap() - 1.0).abs() < 1e-6);
        let csv = sweep_csv(&rep.sweep);
        assert_eq!(csv.lines().next().unwrap(), SWEEP_CSV_HEADER);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(rep.lanes.len(), 3);
        assert!(sweep_s(&ds, &off, &[], &CodecConfig::new(4, 1, 1), &opts).is_err());
    }
}
