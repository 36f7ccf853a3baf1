//! Inference-side compressed cache.
//!
//! Every `(layer, head)` lane owns a [`PromptDictionary`]: the offline atoms of the layer's merge
//! group followed by online atoms sampled from the lane's own prefill vectors. Tokens are encoded
//! against it in order and decoded on demand.

mod snapshot;

pub use snapshot::{read_snapshot, read_snapshot_meta, write_snapshot, SnapshotMeta, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

use std::collections::BTreeMap;
use std::io;

use half::f16;
use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::CaptureDataset;
use crate::codec::{desparse, encode_vector};
use crate::codec::{encode_batch, equivalent_bits, CodecConfig, CodecError, Dictionary, SparseCode, MAX_ATOMS};
use crate::neural_dict::{OfflineDictionary, OfflineError};
use crate::rng::rng_for;
use crate::CacheKind;

/// Online atoms of a `(layer, head)` lane use stream `ONLINE_STREAM_BASE + lane`.
const ONLINE_STREAM_BASE: u64 = 1 << 32;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Offline(#[from] OfflineError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("index space overflow: {offline} offline + {online} online atoms + 1 sentinel exceed {limit} indices")]
    IndexOverflow { offline: usize, online: usize, limit: usize },
    #[error("no prompt dictionary for layer {layer}, head {head}")]
    MissingLane { layer: u32, head: u32 },
    #[error("prompt dictionary for layer {layer}, head {head} is already built")]
    LaneExists { layer: u32, head: u32 },
    #[error("token range {from}..{to} is outside 0..{len}")]
    RangeOutOfBounds { from: usize, to: usize, len: usize },
    #[error("online_size > 0 needs at least one prefill vector")]
    EmptyPrefill,
    #[error("cache mismatch: {0}")]
    Mismatch(String),
    #[error("not a cache snapshot (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid snapshot metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("snapshot is truncated")]
    Truncated,
    #[error("snapshot references dictionary {expected}, but the supplied one hashes to {found}")]
    DictionaryHash { expected: String, found: String },
}

/// The per-chunk dictionaries of one `(layer, head)` lane: offline atoms at `[0, offline)` and
/// online atoms at `[offline, offline + online)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptDictionary {
    layer: u32,
    head: u32,
    online_size: usize,
    /// Per chunk, the online atoms as stored (fp16, `chunk_dim x k`).
    online: Vec<Array2<f16>>,
    composite: Vec<Dictionary>,
    offline_atoms: usize,
}

/// Widens stored online atoms and renormalises them in f32. Deterministic, so reloading the
/// stored halves reproduces the same atoms.
fn widen_online(stored: &Array2<f16>) -> Array2<f32> {
    let mut atoms = stored.mapv(f16::to_f32);
    for mut col in atoms.columns_mut() {
        let norm = col.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        col.mapv_inplace(|v| (v as f64 / norm) as f32);
    }
    atoms
}

impl PromptDictionary {
    /// Assembles the lane dictionaries from offline slices and already-sampled online atoms.
    pub fn from_parts(
        layer: u32,
        head: u32,
        offline: &[&Dictionary],
        online: Vec<Array2<f16>>,
        online_size: usize,
    ) -> Result<Self, RuntimeError> {
        if online.len() != offline.len() {
            return Err(RuntimeError::Mismatch(format!(
                "{} online chunks for {} offline chunks",
                online.len(),
                offline.len()
            )));
        }
        let offline_atoms = offline.first().map_or(0, |d| d.num_atoms());
        let mut composite = Vec::with_capacity(offline.len());
        for (off, on) in offline.iter().zip(&online) {
            if off.num_atoms() + on.ncols() + 1 > MAX_ATOMS + 1 {
                return Err(RuntimeError::IndexOverflow {
                    offline: off.num_atoms(),
                    online: on.ncols(),
                    limit: MAX_ATOMS + 1,
                });
            }
            if on.ncols() > 0 && on.nrows() != off.chunk_dim() {
                return Err(CodecError::DimensionMismatch { expected: off.chunk_dim(), got: on.nrows() }.into());
            }
            composite.push(Dictionary::composite(off, widen_online(on).view())?);
        }
        Ok(Self { layer, head, online_size, online, composite, offline_atoms })
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }

    pub fn head(&self) -> u32 {
        self.head
    }

    pub fn online_size(&self) -> usize {
        self.online_size
    }

    pub fn offline_atoms(&self) -> usize {
        self.offline_atoms
    }

    /// Online atoms actually present in chunk `c`.
    pub fn online_atoms(&self, chunk: usize) -> usize {
        self.online[chunk].ncols()
    }

    pub fn online_stored(&self) -> &[Array2<f16>] {
        &self.online
    }

    /// The composite dictionaries in chunk order.
    pub fn dictionaries(&self) -> &[Dictionary] {
        &self.composite
    }

    /// Stored online values across chunks.
    pub fn online_values(&self) -> usize {
        self.online.iter().map(|a| a.len()).sum()
    }
}

/// Samples `ceil(online_size / 2)` prefill rows and adds each normalised row and its negation as
/// online atoms, truncated to `online_size`. Chunks with (near) zero energy in a sampled row are
/// skipped for that row, so a chunk may end up with fewer atoms.
pub fn build_prompt_dictionary(
    offline: &OfflineDictionary,
    layer: u32,
    head: u32,
    prefill: ArrayView2<f32>,
    online_size: usize,
    seed: u64,
) -> Result<PromptDictionary, RuntimeError> {
    let slices = offline.for_layer_head(layer, head)?;
    let chunk_dim = offline.meta().chunk_dim;
    let s_n = slices.len();
    if online_size > 0 && prefill.nrows() == 0 {
        return Err(RuntimeError::EmptyPrefill);
    }
    if prefill.nrows() > 0 && prefill.ncols() != chunk_dim * s_n {
        return Err(CodecError::DimensionMismatch { expected: chunk_dim * s_n, got: prefill.ncols() }.into());
    }
    let per = slices.first().map_or(0, |d| d.num_atoms());
    if per + online_size + 1 > MAX_ATOMS + 1 {
        return Err(RuntimeError::IndexOverflow { offline: per, online: online_size, limit: MAX_ATOMS + 1 });
    }

    let picks = online_size.div_ceil(2).min(prefill.nrows());
    let lane = u64::from(layer) * u64::from(offline.meta().num_heads) + u64::from(head);
    let mut rng = rng_for(seed, ONLINE_STREAM_BASE + lane);
    let mut rows = index::sample(&mut rng, prefill.nrows(), picks).into_vec();
    rows.sort_unstable();

    let mut online = Vec::with_capacity(s_n);
    for c in 0..s_n {
        let mut cols: Vec<f16> = Vec::new();
        let mut count = 0usize;
        for &r in &rows {
            if count >= online_size {
                break;
            }
            let part = prefill.slice(s![r, c * chunk_dim..(c + 1) * chunk_dim]);
            let norm = part.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                continue;
            }
            for sign in [1.0, -1.0] {
                if count < online_size {
                    cols.extend(part.iter().map(|&v| f16::from_f64(sign * v as f64 / norm)));
                    count += 1;
                }
            }
        }
        let atoms = Array2::from_shape_vec((count, chunk_dim), cols).expect("sized").reversed_axes();
        online.push(atoms.as_standard_layout().into_owned());
    }
    PromptDictionary::from_parts(layer, head, &slices, online, online_size)
}

/// Codes of one `(layer, head)` lane.
#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub dictionary: PromptDictionary,
    codes: Vec<SparseCode>,
}

impl Lane {
    pub fn codes(&self) -> &[SparseCode] {
        &self.codes
    }

    /// Token indices stored raw.
    pub fn outlier_tokens(&self) -> Vec<usize> {
        self.codes.iter().enumerate().filter(|(_, c)| c.is_outlier()).map(|(i, _)| i).collect()
    }
}

/// Byte accounting of a cache against an fp16 dense baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub tokens: usize,
    pub bytes_codes: u64,
    pub bytes_online_dict: u64,
    pub bytes_offline_dict_amortized: f64,
    pub bytes_outliers: u64,
    pub bytes_dense_equivalent: u64,
    pub equivalent_bits_per_channel: f64,
    /// `dense / (codes + online + outliers)`; 0 for an empty cache.
    pub compression_ratio: f64,
}

/// A compressed KV cache for one sequence. Single writer; lanes are independent.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrCache {
    cfg: CodecConfig,
    kind: CacheKind,
    dictionary_hash: String,
    offline_atoms_total: usize,
    lanes: BTreeMap<(u32, u32), Lane>,
}

impl CsrCache {
    /// An empty cache whose lanes will use dictionaries derived from `offline`.
    pub fn new(cfg: CodecConfig, offline: &OfflineDictionary) -> Result<Self, RuntimeError> {
        cfg.validate()?;
        let meta = offline.meta();
        if cfg.chunk_dim() != meta.chunk_dim || cfg.s_n != meta.s_n {
            return Err(RuntimeError::Mismatch(format!(
                "codec expects {} chunks of {} channels, dictionary has {} of {}",
                cfg.s_n,
                cfg.chunk_dim(),
                meta.s_n,
                meta.chunk_dim
            )));
        }
        Ok(Self {
            cfg,
            kind: meta.kind,
            dictionary_hash: offline.content_hash(),
            offline_atoms_total: offline.total_atoms() * meta.chunk_dim,
            lanes: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn kind(&self) -> CacheKind {
        self.kind
    }

    pub fn dictionary_hash(&self) -> &str {
        &self.dictionary_hash
    }

    pub fn lanes(&self) -> &BTreeMap<(u32, u32), Lane> {
        &self.lanes
    }

    pub fn lane(&self, layer: u32, head: u32) -> Result<&Lane, RuntimeError> {
        self.lanes.get(&(layer, head)).ok_or(RuntimeError::MissingLane { layer, head })
    }

    fn lane_mut(&mut self, layer: u32, head: u32) -> Result<&mut Lane, RuntimeError> {
        self.lanes.get_mut(&(layer, head)).ok_or(RuntimeError::MissingLane { layer, head })
    }

    /// Registers the prompt dictionary of a lane. Each lane gets exactly one.
    pub fn install(&mut self, dictionary: PromptDictionary) -> Result<(), RuntimeError> {
        let key = (dictionary.layer(), dictionary.head());
        if self.lanes.contains_key(&key) {
            return Err(RuntimeError::LaneExists { layer: key.0, head: key.1 });
        }
        if dictionary.dictionaries().len() != self.cfg.s_n {
            return Err(RuntimeError::Mismatch("prompt dictionary chunk count differs from s_n".into()));
        }
        self.lanes.insert(key, Lane { dictionary, codes: Vec::new() });
        Ok(())
    }

    pub(crate) fn insert_lane(&mut self, key: (u32, u32), lane: Lane) {
        self.lanes.insert(key, lane);
    }

    /// Encodes the prompt rows and appends their codes in token order.
    pub fn prefill_compress(&mut self, layer: u32, head: u32, prompt: ArrayView2<f32>) -> Result<(), RuntimeError> {
        let cfg = self.cfg;
        let lane = self.lane_mut(layer, head)?;
        let codes = encode_batch(prompt, lane.dictionary.dictionaries(), &cfg)?;
        lane.codes.extend(codes.iter().map(SparseCode::to_wire_precision));
        Ok(())
    }

    /// Encodes one generated token with the frozen prompt dictionary.
    pub fn append_token(&mut self, layer: u32, head: u32, x: ArrayView1<f32>) -> Result<(), RuntimeError> {
        let cfg = self.cfg;
        let lane = self.lane_mut(layer, head)?;
        let code = encode_vector(x, lane.dictionary.dictionaries(), &cfg)?;
        lane.codes.push(code.to_wire_precision());
        Ok(())
    }

    pub fn token_count(&self, layer: u32, head: u32) -> Result<usize, RuntimeError> {
        Ok(self.lane(layer, head)?.codes.len())
    }

    /// Rows `from..to` of the reconstructed lane.
    pub fn decode_range(&self, layer: u32, head: u32, from: usize, to: usize) -> Result<Array2<f32>, RuntimeError> {
        let lane = self.lane(layer, head)?;
        let len = lane.codes.len();
        if from > to || to > len {
            return Err(RuntimeError::RangeOutOfBounds { from, to, len });
        }
        let mut out = Array2::zeros((to - from, self.cfg.head_dim));
        for (mut row, code) in out.axis_iter_mut(Axis(0)).zip(&lane.codes[from..to]) {
            row.assign(&desparse(code, lane.dictionary.dictionaries(), &self.cfg)?);
        }
        Ok(out)
    }

    pub fn decode_all(&self, layer: u32, head: u32) -> Result<Array2<f32>, RuntimeError> {
        self.decode_range(layer, head, 0, self.token_count(layer, head)?)
    }

    /// Memory accounting with the offline dictionary shared by one sequence.
    pub fn memory_report(&self) -> MemoryReport {
        self.memory_report_shared(1)
    }

    /// Memory accounting with the offline dictionary amortised over `sequences` caches.
    pub fn memory_report_shared(&self, sequences: usize) -> MemoryReport {
        let d = self.cfg.head_dim as u64;
        let mut tokens = 0u64;
        let mut entries = 0u64;
        let mut outliers = 0u64;
        let mut online_values = 0u64;
        for lane in self.lanes.values() {
            tokens += lane.codes.len() as u64;
            online_values += lane.dictionary.online_values() as u64;
            for code in &lane.codes {
                if code.is_outlier() {
                    outliers += 1;
                } else {
                    entries += code.entry_count() as u64;
                }
            }
        }
        let bytes_codes = 4 * entries;
        let bytes_outliers = 2 * d * outliers;
        let bytes_online_dict = 2 * online_values;
        let bytes_dense_equivalent = 2 * d * tokens;
        let stored = bytes_codes + bytes_online_dict + bytes_outliers;
        let equivalent_bits_per_channel = if outliers == 0 {
            equivalent_bits(&self.cfg)
        } else {
            8.0 * (bytes_codes + bytes_outliers) as f64 / (d * tokens) as f64
        };
        MemoryReport {
            tokens: tokens as usize,
            bytes_codes,
            bytes_online_dict,
            bytes_offline_dict_amortized: 2.0 * self.offline_atoms_total as f64 / sequences.max(1) as f64,
            bytes_outliers,
            bytes_dense_equivalent,
            equivalent_bits_per_channel,
            compression_ratio: if stored == 0 { 0.0 } else { bytes_dense_equivalent as f64 / stored as f64 },
        }
    }
}

/// Builds prompt dictionaries from every block of `dataset` (used as its own prefill) and
/// compresses all lanes in parallel.
pub fn compress_capture(
    dataset: &CaptureDataset,
    offline: &OfflineDictionary,
    cfg: CodecConfig,
    online_size: usize,
    seed: u64,
) -> Result<CsrCache, RuntimeError> {
    let header = dataset.header();
    if header.kind != offline.meta().kind {
        return Err(RuntimeError::Mismatch(format!(
            "capture holds {} vectors, dictionary is for {}",
            header.kind,
            offline.meta().kind
        )));
    }
    if header.num_layers as usize != offline.meta().plan.num_layers() {
        return Err(RuntimeError::Mismatch(format!(
            "capture has {} layers, dictionary plan covers {}",
            header.num_layers,
            offline.meta().plan.num_layers()
        )));
    }
    let mut cache = CsrCache::new(cfg, offline)?;
    let lanes: Vec<((u32, u32), Lane)> = dataset
        .blocks()
        .par_iter()
        .map(|b| {
            let dictionary = build_prompt_dictionary(offline, b.layer, b.head, b.vectors.view(), online_size, seed)?;
            let codes = encode_batch(b.vectors.view(), dictionary.dictionaries(), &cfg)?;
            let codes = codes.iter().map(SparseCode::to_wire_precision).collect();
            Ok(((b.layer, b.head), Lane { dictionary, codes }))
        })
        .collect::<Result<_, RuntimeError>>()?;
    for (key, lane) in lanes {
        cache.insert_lane(key, lane);
    }
    Ok(cache)
}
