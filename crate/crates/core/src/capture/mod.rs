//! Calibration captures: the `CSRC` file format and synthetic stand-ins for model probing.
//!
//! A capture holds, for one cache kind, a set of `(layer, head)` blocks of `head_dim`-wide
//! vectors. Blocks are the unit the rest of the pipeline samples from.

mod format;
mod synth;

pub use format::{read_capture, write_capture, CAPTURE_MAGIC, CAPTURE_VERSION};
pub use synth::{generate_synthetic, planted_atoms, sample_vectors, Generator, SyntheticSpec};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::CacheKind;

/// Storage precision of vector payloads in a capture file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"CSRC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported capture version {0}")]
    UnsupportedVersion(u32),
    #[error("capture truncated inside the header")]
    TruncatedHeader,
    #[error("capture truncated inside block {block}")]
    Truncated { block: usize },
    #[error("malformed metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("block (layer {layer}, head {head}) is out of range")]
    IndexOutOfRange { layer: u32, head: u32 },
    #[error("block (layer {layer}, head {head}) appears more than once")]
    DuplicateBlock { layer: u32, head: u32 },
    #[error("block (layer {layer}, head {head}) has {got} columns, header says {expected}")]
    WidthMismatch { layer: u32, head: u32, got: usize, expected: usize },
    #[error("block (layer {layer}, head {head}) holds a non-finite value")]
    NonFinite { layer: u32, head: u32 },
    #[error("no block for (layer {layer}, head {head})")]
    MissingBlock { layer: u32, head: u32 },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureHeader {
    pub model_name: String,
    pub num_layers: u32,
    pub num_heads: u32,
    pub head_dim: u32,
    pub kind: CacheKind,
    /// Keys captured before the rotary embedding was applied.
    pub pre_rope: bool,
    pub dtype: DType,
}

impl CaptureHeader {
    pub fn validate(&self) -> Result<(), CaptureError> {
        let bad = |m: &str| Err(CaptureError::InvalidHeader(m.to_string()));
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1");
        }
        if self.num_heads == 0 {
            return bad("num_heads must be >= 1");
        }
        if self.head_dim == 0 {
            return bad("head_dim must be >= 1");
        }
        if self.kind == CacheKind::Value && self.pre_rope {
            return bad("pre_rope is only meaningful for key captures");
        }
        Ok(())
    }
}

/// Vectors captured for one `(layer, head)`; rows are tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureBlock {
    pub layer: u32,
    pub head: u32,
    pub vectors: Array2<f32>,
}

impl CaptureBlock {
    pub fn count(&self) -> usize {
        self.vectors.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureDataset {
    header: CaptureHeader,
    blocks: Vec<CaptureBlock>,
}

impl CaptureDataset {
    /// Builds a dataset, checking every header and block invariant.
    pub fn new(header: CaptureHeader, blocks: Vec<CaptureBlock>) -> Result<Self, CaptureError> {
        header.validate()?;
        let mut seen = std::collections::HashSet::new();
        for b in &blocks {
            if b.layer >= header.num_layers || b.head >= header.num_heads {
                return Err(CaptureError::IndexOutOfRange { layer: b.layer, head: b.head });
            }
            if !seen.insert((b.layer, b.head)) {
                return Err(CaptureError::DuplicateBlock { layer: b.layer, head: b.head });
            }
            if b.vectors.ncols() != header.head_dim as usize {
                return Err(CaptureError::WidthMismatch {
                    layer: b.layer,
                    head: b.head,
                    got: b.vectors.ncols(),
                    expected: header.head_dim as usize,
                });
            }
            if b.vectors.iter().any(|v| !v.is_finite()) {
                return Err(CaptureError::NonFinite { layer: b.layer, head: b.head });
            }
        }
        Ok(Self { header, blocks })
    }

    pub fn header(&self) -> &CaptureHeader {
        &self.header
    }

    pub fn blocks(&self) -> &[CaptureBlock] {
        &self.blocks
    }

    pub fn head_dim(&self) -> usize {
        self.header.head_dim as usize
    }

    pub fn block(&self, layer: u32, head: u32) -> Option<&CaptureBlock> {
        self.blocks.iter().find(|b| b.layer == layer && b.head == head)
    }

    pub fn require_block(&self, layer: u32, head: u32) -> Result<&CaptureBlock, CaptureError> {
        self.block(layer, head).ok_or(CaptureError::MissingBlock { layer, head })
    }

    /// Total vector count across all blocks.
    pub fn total_vectors(&self) -> usize {
        self.blocks.iter().map(CaptureBlock::count).sum()
    }

    /// Copy with every value rounded through the header dtype, i.e. what a write/read cycle
    /// returns.
    pub fn narrowed(&self) -> Self {
        let mut out = self.clone();
        if self.header.dtype == DType::F16 {
            for b in &mut out.blocks {
                b.vectors.mapv_inplace(|v| half::f16::from_f32(v).to_f32());
            }
        }
        out
    }
}
