//! Matching-pursuit encoding of cache vectors and de-sparse decoding.
//!
//! A head vector of `head_dim` channels is split into `s_n` contiguous chunks. Each chunk is
//! encoded independently against its own [`Dictionary`] with at most `s` atoms, giving a
//! [`SparseCode`]. Vectors that fit poorly can escape to raw storage when an outlier threshold is
//! configured.

mod mp;
mod wire;

pub use mp::{matching_pursuit, MpOutcome, MpStep, Scalar};
pub use wire::{read_code, serialized_len, write_code};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::CacheKind;

/// Largest index value; reserved to mark outlier entries and never resolves to an atom.
pub const OUTLIER_SENTINEL: u16 = u16::MAX;
/// Atoms addressable by a 16-bit index once the sentinel is reserved.
pub const MAX_ATOMS: usize = OUTLIER_SENTINEL as usize;

const NORM_TOLERANCE: f32 = 1e-5;
const OUTLIER_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("atom index {index} is outside a dictionary of {num_atoms} atoms")]
    IndexOutOfRange { index: u16, num_atoms: usize },
    #[error("invalid codec config: {0}")]
    InvalidConfig(String),
    #[error("invalid dictionary: {0}")]
    InvalidDictionary(String),
    #[error("malformed sparse code: {0}")]
    Malformed(String),
}

/// Where the atoms of a dictionary came from. `Composite` dictionaries hold offline atoms at
/// `[0, offline)` followed by online atoms at `[offline, offline + online)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Offline,
    Online,
    Outlier,
    Composite { offline: usize, online: usize },
}

/// A `chunk_dim x num_atoms` matrix of unit-norm columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Array2<f32>,
    kind: CacheKind,
    provenance: Provenance,
}

impl Dictionary {
    pub fn new(atoms: Array2<f32>, kind: CacheKind, provenance: Provenance) -> Result<Self, CodecError> {
        let bad = |m: String| Err(CodecError::InvalidDictionary(m));
        if atoms.nrows() == 0 || atoms.ncols() == 0 {
            return bad("dictionary must have at least one atom of positive dimension".into());
        }
        if atoms.ncols() > MAX_ATOMS {
            return bad(format!("{} atoms exceed the 16-bit index space ({MAX_ATOMS})", atoms.ncols()));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::NonFinite);
        }
        for (i, col) in atoms.columns().into_iter().enumerate() {
            let norm = col.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE as f64 {
                return bad(format!("atom {i} has norm {norm}"));
            }
        }
        if let Provenance::Composite { offline, online } = provenance {
            if offline + online != atoms.ncols() {
                return bad("composite sub-ranges do not cover the atoms".into());
            }
        }
        Ok(Self { atoms, kind, provenance })
    }

    /// Offline atoms followed by `online` atoms (`chunk_dim x k`).
    pub fn composite(offline: &Dictionary, online: ArrayView2<f32>) -> Result<Self, CodecError> {
        if online.nrows() != offline.chunk_dim() && online.ncols() > 0 {
            return Err(CodecError::DimensionMismatch { expected: offline.chunk_dim(), got: online.nrows() });
        }
        let atoms = if online.ncols() == 0 {
            offline.atoms.clone()
        } else {
            ndarray::concatenate(Axis(1), &[offline.atoms.view(), online]).expect("row counts match")
        };
        Dictionary::new(
            atoms,
            offline.kind,
            Provenance::Composite { offline: offline.num_atoms(), online: online.ncols() },
        )
    }

    pub fn atoms(&self) -> ArrayView2<'_, f32> {
        self.atoms.view()
    }

    pub fn atom(&self, index: usize) -> ArrayView1<'_, f32> {
        self.atoms.column(index)
    }

    pub fn chunk_dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn kind(&self) -> CacheKind {
        self.kind
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// MP-level: pursuit iterations, hence the max atoms per chunk.
    pub s: usize,
    /// Number of channel chunks.
    pub s_n: usize,
    /// Relative residual above which a vector is stored raw; `None` disables the escape.
    pub outlier_threshold: Option<f32>,
    pub head_dim: usize,
}

impl CodecConfig {
    pub fn new(head_dim: usize, s: usize, s_n: usize) -> Self {
        Self { s, s_n, outlier_threshold: None, head_dim }
    }

    pub fn with_outlier_threshold(mut self, t: Option<f32>) -> Self {
        self.outlier_threshold = t;
        self
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |m: String| Err(CodecError::InvalidConfig(m));
        if self.s == 0 {
            return bad("s must be >= 1".into());
        }
        if self.s > u8::MAX as usize {
            return bad(format!("s = {} does not fit the per-chunk u8 entry count", self.s));
        }
        if self.s_n == 0 || self.head_dim == 0 {
            return bad("s_n and head_dim must be >= 1".into());
        }
        if !self.head_dim.is_multiple_of(self.s_n) {
            return bad(format!("head_dim {} is not divisible by s_n {}", self.head_dim, self.s_n));
        }
        if let Some(t) = self.outlier_threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("outlier_threshold {t} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn chunk_dim(&self) -> usize {
        self.head_dim / self.s_n
    }
}

/// Storage-equivalent bits per channel: `32 * s * s_n / head_dim`.
///
/// A dense fp16 head vector costs `16 * head_dim` bits; a code costs `s * s_n` fp16
/// coefficients plus as many 16-bit indices.
pub fn equivalent_bits(cfg: &CodecConfig) -> f64 {
    32.0 * cfg.s as f64 * cfg.s_n as f64 / cfg.head_dim as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub index: u16,
    pub coeff: f32,
}

/// Sparse representation of one head vector: per chunk up to `s` distinct atom entries, or a raw
/// copy when the vector escaped as an outlier.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCode {
    pub chunks: Vec<Vec<CodeEntry>>,
    pub raw: Option<Vec<f32>>,
}

impl SparseCode {
    pub fn outlier(raw: Vec<f32>) -> Self {
        Self { chunks: Vec::new(), raw: Some(raw) }
    }

    pub fn is_outlier(&self) -> bool {
        self.raw.is_some()
    }

    pub fn entry_count(&self) -> usize {
        self.chunks.iter().map(Vec::len).sum()
    }

    /// Copy with coefficients and raw values rounded to f16, the serialised precision.
    pub fn to_wire_precision(&self) -> Self {
        let r = |v: f32| half::f16::from_f32(v).to_f32();
        Self {
            chunks: self
                .chunks
                .iter()
                .map(|c| c.iter().map(|e| CodeEntry { index: e.index, coeff: r(e.coeff) }).collect())
                .collect(),
            raw: self.raw.as_ref().map(|raw| raw.iter().map(|&v| r(v)).collect()),
        }
    }
}

/// Chunk entries plus the final residual norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkEncoding {
    pub entries: Vec<CodeEntry>,
    pub residual_norm: f32,
}

fn check_finite(x: ArrayView1<f32>) -> Result<(), CodecError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CodecError::NonFinite)
    }
}

/// Encodes one chunk with `s` pursuit iterations.
pub fn mp_encode_chunk(x: ArrayView1<f32>, dict: &Dictionary, s: usize) -> Result<ChunkEncoding, CodecError> {
    if x.len() != dict.chunk_dim() {
        return Err(CodecError::DimensionMismatch { expected: dict.chunk_dim(), got: x.len() });
    }
    check_finite(x)?;
    let out = matching_pursuit(x, dict.atoms(), s);
    let residual_norm = out.residual_norm();
    let entries = out.entries.into_iter().map(|(i, c)| CodeEntry { index: i as u16, coeff: c }).collect();
    Ok(ChunkEncoding { entries, residual_norm })
}

fn check_dicts(dicts: &[Dictionary], cfg: &CodecConfig) -> Result<(), CodecError> {
    cfg.validate()?;
    if dicts.len() != cfg.s_n {
        return Err(CodecError::DimensionMismatch { expected: cfg.s_n, got: dicts.len() });
    }
    for d in dicts {
        if d.chunk_dim() != cfg.chunk_dim() {
            return Err(CodecError::DimensionMismatch { expected: cfg.chunk_dim(), got: d.chunk_dim() });
        }
    }
    Ok(())
}

/// Encodes a head vector chunk by chunk, escaping to a raw copy when the relative residual
/// exceeds the configured outlier threshold.
pub fn encode_vector(x: ArrayView1<f32>, dicts: &[Dictionary], cfg: &CodecConfig) -> Result<SparseCode, CodecError> {
    check_dicts(dicts, cfg)?;
    if x.len() != cfg.head_dim {
        return Err(CodecError::DimensionMismatch { expected: cfg.head_dim, got: x.len() });
    }
    encode_checked(x, dicts, cfg)
}

fn encode_checked(x: ArrayView1<f32>, dicts: &[Dictionary], cfg: &CodecConfig) -> Result<SparseCode, CodecError> {
    let cd = cfg.chunk_dim();
    let mut chunks = Vec::with_capacity(cfg.s_n);
    let mut residual_sq = 0.0f64;
    for (c, dict) in dicts.iter().enumerate() {
        let enc = mp_encode_chunk(x.slice(ndarray::s![c * cd..(c + 1) * cd]), dict, cfg.s)?;
        residual_sq += (enc.residual_norm as f64).powi(2);
        chunks.push(enc.entries);
    }
    if let Some(threshold) = cfg.outlier_threshold {
        let x_norm = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if residual_sq.sqrt() / x_norm.max(OUTLIER_EPS) > threshold as f64 {
            return Ok(SparseCode::outlier(x.to_vec()));
        }
    }
    Ok(SparseCode { chunks, raw: None })
}

/// Reconstructs `D r` chunk by chunk; outlier codes return their raw copy.
pub fn desparse(code: &SparseCode, dicts: &[Dictionary], cfg: &CodecConfig) -> Result<Array1<f32>, CodecError> {
    check_dicts(dicts, cfg)?;
    desparse_checked(code, dicts, cfg)
}

fn desparse_checked(code: &SparseCode, dicts: &[Dictionary], cfg: &CodecConfig) -> Result<Array1<f32>, CodecError> {
    if let Some(raw) = &code.raw {
        if raw.len() != cfg.head_dim {
            return Err(CodecError::DimensionMismatch { expected: cfg.head_dim, got: raw.len() });
        }
        return Ok(Array1::from(raw.clone()));
    }
    if code.chunks.len() != cfg.s_n {
        return Err(CodecError::DimensionMismatch { expected: cfg.s_n, got: code.chunks.len() });
    }
    let cd = cfg.chunk_dim();
    let mut out = Array1::zeros(cfg.head_dim);
    for (c, (entries, dict)) in code.chunks.iter().zip(dicts).enumerate() {
        let mut part = out.slice_mut(ndarray::s![c * cd..(c + 1) * cd]);
        for e in entries {
            if e.index as usize >= dict.num_atoms() {
                return Err(CodecError::IndexOutOfRange { index: e.index, num_atoms: dict.num_atoms() });
            }
            part.scaled_add(e.coeff, &dict.atom(e.index as usize));
        }
    }
    Ok(out)
}

/// Row-wise [`encode_vector`]; parallel internally, order- and value-deterministic.
pub fn encode_batch(
    x: ArrayView2<f32>,
    dicts: &[Dictionary],
    cfg: &CodecConfig,
) -> Result<Vec<SparseCode>, CodecError> {
    check_dicts(dicts, cfg)?;
    if x.ncols() != cfg.head_dim && x.nrows() > 0 {
        return Err(CodecError::DimensionMismatch { expected: cfg.head_dim, got: x.ncols() });
    }
    (0..x.nrows()).into_par_iter().map(|i| encode_checked(x.row(i), dicts, cfg)).collect()
}

/// A config bundled with its per-chunk dictionaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    cfg: CodecConfig,
    dicts: Vec<Dictionary>,
}

impl Codec {
    pub fn new(cfg: CodecConfig, dicts: Vec<Dictionary>) -> Result<Self, CodecError> {
        check_dicts(&dicts, &cfg)?;
        Ok(Self { cfg, dicts })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn dictionaries(&self) -> &[Dictionary] {
        &self.dicts
    }

    /// Same dictionaries, different MP-level.
    pub fn with_s(&self, s: usize) -> Result<Self, CodecError> {
        Codec::new(CodecConfig { s, ..self.cfg }, self.dicts.clone())
    }

    pub fn encode(&self, x: ArrayView1<f32>) -> Result<SparseCode, CodecError> {
        if x.len() != self.cfg.head_dim {
            return Err(CodecError::DimensionMismatch { expected: self.cfg.head_dim, got: x.len() });
        }
        encode_checked(x, &self.dicts, &self.cfg)
    }

    pub fn encode_batch(&self, x: ArrayView2<f32>) -> Result<Vec<SparseCode>, CodecError> {
        encode_batch(x, &self.dicts, &self.cfg)
    }

    pub fn decode(&self, code: &SparseCode) -> Result<Array1<f32>, CodecError> {
        desparse_checked(code, &self.dicts, &self.cfg)
    }

    pub fn decode_all(&self, codes: &[SparseCode]) -> Result<Array2<f32>, CodecError> {
        let mut out = Array2::zeros((codes.len(), self.cfg.head_dim));
        for (mut row, code) in out.rows_mut().into_iter().zip(codes) {
            row.assign(&self.decode(code)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    pub(crate) fn identity(dim: usize) -> Dictionary {
        Dictionary::new(Array2::eye(dim), CacheKind::Key, Provenance::Offline).unwrap()
    }

    fn skewed_pair() -> Dictionary {
        Dictionary::new(array![[1.0f32, 0.6], [0.0, 0.8]], CacheKind::Key, Provenance::Offline).unwrap()
    }

    fn random_orthonormal(dim: usize, seed: u64) -> Array2<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m: nalgebra::DMatrix<f64> = nalgebra::DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        let q = m.qr().q();
        Array2::from_shape_fn((dim, dim), |(i, j)| q[(i, j)] as f32)
    }

    #[test]
    fn chunk_orthonormal_example() {
        let enc = mp_encode_chunk(array![3.0f32, 4.0].view(), &identity(2), 2).unwrap();
        let mut e = enc.entries.clone();
        e.sort_by_key(|e| e.index);
        assert_eq!(e, vec![CodeEntry { index: 0, coeff: 3.0 }, CodeEntry { index: 1, coeff: 4.0 }]);
        assert_eq!(enc.residual_norm, 0.0);
    }

    #[test]
    fn chunk_zero_input() {
        let enc = mp_encode_chunk(array![0.0f32, 0.0].view(), &skewed_pair(), 3).unwrap();
        assert!(enc.entries.is_empty());
        assert_eq!(enc.residual_norm, 0.0);
    }

    #[test]
    fn chunk_hand_example() {
        let enc = mp_encode_chunk(array![1.0f32, 1.0].view(), &skewed_pair(), 2).unwrap();
        assert_eq!(enc.entries[0].index, 1);
        assert!((enc.entries[0].coeff - 1.4).abs() < 1e-6);
        assert_eq!(enc.entries[1].index, 0);
        assert!((enc.entries[1].coeff - 0.16).abs() < 1e-6);
        assert!((enc.residual_norm - 0.12).abs() < 1e-6);
    }

    #[test]
    fn chunk_errors() {
        assert_eq!(
            mp_encode_chunk(array![1.0f32].view(), &identity(2), 1),
            Err(CodecError::DimensionMismatch { expected: 2, got: 1 })
        );
        assert_eq!(mp_encode_chunk(array![f32::NAN, 0.0].view(), &identity(2), 1), Err(CodecError::NonFinite));
    }

    #[test]
    fn per_chunk_expansion() {
        let cfg = CodecConfig::new(4, 2, 2);
        let dicts = vec![identity(2), identity(2)];
        let code = encode_vector(array![3.0f32, 4.0, 0.0, 1.0].view(), &dicts, &cfg).unwrap();
        let mut c0 = code.chunks[0].clone();
        c0.sort_by_key(|e| e.index);
        assert_eq!(c0, vec![CodeEntry { index: 0, coeff: 3.0 }, CodeEntry { index: 1, coeff: 4.0 }]);
        assert_eq!(code.chunks[1], vec![CodeEntry { index: 1, coeff: 1.0 }]);
        assert!(!code.is_outlier());
        assert_eq!(desparse(&code, &dicts, &cfg).unwrap(), array![3.0f32, 4.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_threshold_forces_escape() {
        let cfg = CodecConfig::new(2, 1, 1).with_outlier_threshold(Some(0.0));
        let dicts = vec![skewed_pair()];
        let code = encode_vector(array![1.0f32, 1.0].view(), &dicts, &cfg).unwrap();
        assert!(code.is_outlier() && code.chunks.is_empty());
        assert_eq!(code.raw.as_deref(), Some(&[1.0f32, 1.0][..]));
        assert_eq!(desparse(&code, &dicts, &cfg).unwrap(), array![1.0f32, 1.0]);
        // Zero residual never escapes, even at threshold 0.
        let cfg2 = CodecConfig::new(2, 2, 1).with_outlier_threshold(Some(0.0));
        let exact = encode_vector(array![0.6f32, 0.8].view(), &dicts, &cfg2).unwrap();
        assert!(!exact.is_outlier());
        let zero = encode_vector(array![0.0f32, 0.0].view(), &dicts, &cfg2).unwrap();
        assert!(!zero.is_outlier() && zero.entry_count() == 0);
    }

    #[test]
    fn disabled_threshold_never_escapes() {
        let cfg = CodecConfig::new(2, 1, 1);
        let dicts = vec![Dictionary::new(array![[1.0f32], [0.0]], CacheKind::Key, Provenance::Offline).unwrap()];
        let code = encode_vector(array![0.0f32, 5.0].view(), &dicts, &cfg).unwrap();
        assert!(!code.is_outlier());
    }

    #[test]
    fn desparse_examples() {
        let cfg = CodecConfig::new(2, 2, 1);
        let id = vec![identity(2)];
        let code = SparseCode {
            chunks: vec![vec![CodeEntry { index: 0, coeff: 3.0 }, CodeEntry { index: 1, coeff: 4.0 }]],
            raw: None,
        };
        assert_eq!(desparse(&code, &id, &cfg).unwrap(), array![3.0f32, 4.0]);
        let empty = SparseCode { chunks: vec![vec![]], raw: None };
        assert_eq!(desparse(&empty, &id, &cfg).unwrap(), array![0.0f32, 0.0]);

        let skew = vec![skewed_pair()];
        let code = SparseCode {
            chunks: vec![vec![CodeEntry { index: 1, coeff: 1.4 }, CodeEntry { index: 0, coeff: 0.16 }]],
            raw: None,
        };
        let y = desparse(&code, &skew, &cfg).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-6 && (y[1] - 1.12).abs() < 1e-6);
        // Equals the encode input minus its residual (0, -0.12).
        let enc = encode_vector(array![1.0f32, 1.0].view(), &skew, &cfg).unwrap();
        let y2 = desparse(&enc, &skew, &cfg).unwrap();
        assert!((y2[0] - 1.0).abs() < 1e-6 && (y2[1] - 1.12).abs() < 1e-6);

        let bad = SparseCode { chunks: vec![vec![CodeEntry { index: 2, coeff: 1.0 }]], raw: None };
        assert_eq!(desparse(&bad, &id, &cfg), Err(CodecError::IndexOutOfRange { index: 2, num_atoms: 2 }));
    }

    #[test]
    fn batch_examples() {
        let cfg = CodecConfig::new(4, 2, 2);
        let dicts = vec![identity(2), identity(2)];
        assert!(encode_batch(Array2::zeros((0, 4)).view(), &dicts, &cfg).unwrap().is_empty());

        let x = array![[3.0f32, 4.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0], [1.0, -2.0, 0.5, 0.25]];
        let batch = encode_batch(x.view(), &dicts, &cfg).unwrap();
        for (row, code) in x.rows().into_iter().zip(&batch) {
            assert_eq!(code, &encode_vector(row, &dicts, &cfg).unwrap());
        }

        let rep = Array2::from_shape_fn((100, 4), |(_, j)| [0.3f32, -1.0, 2.0, 0.7][j]);
        let codes = encode_batch(rep.view(), &dicts, &cfg).unwrap();
        assert_eq!(codes.len(), 100);
        assert!(codes.iter().all(|c| c == &codes[0]));
    }

    #[test]
    fn bits_equivalence() {
        assert_eq!(equivalent_bits(&CodecConfig::new(128, 4, 1)), 1.0);
        assert_eq!(equivalent_bits(&CodecConfig::new(128, 8, 1)), 2.0);
        assert_eq!(equivalent_bits(&CodecConfig::new(128, 16, 1)), 4.0);
        // Value-cache layout of CSR-8: s = 4 over two chunks costs the same.
        assert_eq!(equivalent_bits(&CodecConfig::new(128, 4, 2)), 2.0);
    }

    #[test]
    fn dictionary_validation() {
        let r = Dictionary::new(array![[1.0f32, 0.5], [0.0, 0.5]], CacheKind::Key, Provenance::Offline);
        assert!(matches!(r, Err(CodecError::InvalidDictionary(_))));
        let r = Dictionary::new(Array2::zeros((2, 0)), CacheKind::Key, Provenance::Offline);
        assert!(r.is_err());
        let too_many = Array2::from_elem((1, MAX_ATOMS + 1), 1.0f32);
        assert!(Dictionary::new(too_many, CacheKind::Key, Provenance::Offline).is_err());
        let max = Array2::from_elem((1, MAX_ATOMS), 1.0f32);
        assert!(Dictionary::new(max, CacheKind::Key, Provenance::Offline).is_ok());
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig::new(6, 2, 4).validate().is_err());
        assert!(CodecConfig::new(8, 0, 1).validate().is_err());
        assert!(CodecConfig::new(8, 2, 1).with_outlier_threshold(Some(1.5)).validate().is_err());
        assert!(CodecConfig::new(8, 2, 2).with_outlier_threshold(Some(0.99)).validate().is_ok());
    }

    #[test]
    fn complete_orthonormal_is_exact() {
        for seed in 0..20 {
            let q = random_orthonormal(8, seed);
            let dict = Dictionary::new(q, CacheKind::Value, Provenance::Offline).unwrap();
            let cfg = CodecConfig::new(8, 8, 1);
            let x = Array1::from_shape_fn(8, |i| ((i as f32 + 1.0) * (seed as f32 + 0.3)).sin());
            let y =
                desparse(&encode_vector(x.view(), std::slice::from_ref(&dict), &cfg).unwrap(), &[dict], &cfg).unwrap();
            let err = (&x - &y).mapv(|v| v * v).sum().sqrt();
            assert!(err <= 1e-5 * x.dot(&x).sqrt(), "seed {seed}: {err}");
        }
    }

    proptest! {
        #[test]
        fn sparsity_bound_and_storage(
            vals in prop::collection::vec(-2.0f32..2.0, 8),
            s in 1usize..=5,
            s_n in prop::sample::select(vec![1usize, 2, 4]),
        ) {
            let cfg = CodecConfig::new(8, s, s_n);
            let cd = 8 / s_n;
            let base = random_orthonormal(cd, 11);
            let mut atoms = Array2::zeros((cd, 2 * cd));
            atoms.slice_mut(ndarray::s![.., ..cd]).assign(&base);
            atoms.slice_mut(ndarray::s![.., cd..]).assign(&random_orthonormal(cd, 12));
            let dict = Dictionary::new(atoms, CacheKind::Key, Provenance::Offline).unwrap();
            let dicts = vec![dict; s_n];
            let code = encode_vector(Array1::from(vals).view(), &dicts, &cfg).unwrap();
            for chunk in &code.chunks {
                prop_assert!(chunk.len() <= s);
                let mut idx: Vec<u16> = chunk.iter().map(|e| e.index).collect();
                idx.sort_unstable();
                idx.dedup();
                prop_assert_eq!(idx.len(), chunk.len());
            }
            prop_assert!(4 * code.entry_count() <= 4 * s * s_n);
        }

        #[test]
        fn reencoding_a_near_exact_reconstruction_is_stable(
            vals in prop::collection::vec(-2.0f32..2.0, 8),
            seed in 0u64..50,
        ) {
            let q = random_orthonormal(8, seed);
            let dict = vec![Dictionary::new(q, CacheKind::Key, Provenance::Offline).unwrap()];
            let cfg = CodecConfig::new(8, 8, 1);
            let x = Array1::from(vals);
            let xn = x.dot(&x).sqrt();
            let y1 = desparse(&encode_vector(x.view(), &dict, &cfg).unwrap(), &dict, &cfg).unwrap();
            let r1 = (&x - &y1).mapv(|v| v * v).sum().sqrt();
            prop_assume!(r1 <= 1e-6 * xn.max(1e-30));
            let y2 = desparse(&encode_vector(y1.view(), &dict, &cfg).unwrap(), &dict, &cfg).unwrap();
            let d = (&y2 - &y1).mapv(|v| v * v).sum().sqrt();
            prop_assert!(d <= 1e-5 * xn);
        }
    }
}
