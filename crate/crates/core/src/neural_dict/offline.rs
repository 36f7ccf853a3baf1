//! The CSRD offline dictionary file.
//!
//! Layout (little-endian): magic `CSRD`, u32 version, u32 metadata length, JSON metadata, then for
//! every `(group, head, chunk)` key in ascending order: three u32 followed by the `chunk_dim x
//! per_head_atoms` atoms as column-major f32.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::TrainConfig;
use crate::codec::{CodecError, Dictionary, Provenance};
use crate::io_util::{read_array, read_full, write_prefixed_str, write_u32, Field};
use crate::merge::MergePlan;
use crate::CacheKind;

pub const CSRD_MAGIC: [u8; 4] = *b"CSRD";
pub const CSRD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum OfflineError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a dictionary file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported dictionary version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid dictionary metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("dictionary file is truncated")]
    Truncated,
    #[error("invalid dictionary file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("layer {layer} is not covered by the dictionary's merge plan")]
    UnknownLayer { layer: u32 },
    #[error("no dictionary for group {group}, head {head}, chunk {chunk}")]
    MissingEntry { group: u32, head: u32, chunk: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DictKey {
    pub group: u32,
    pub head: u32,
    pub chunk: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineMeta {
    pub kind: CacheKind,
    pub chunk_dim: usize,
    pub s_n: usize,
    pub per_head_atoms: usize,
    pub num_heads: u32,
    /// One dictionary per group shared by all heads, stored under head 0.
    pub head_shared: bool,
    pub plan: MergePlan,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub num_entries: usize,
}

/// Offline dictionaries for every merged group, head and chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDictionary {
    meta: OfflineMeta,
    entries: BTreeMap<DictKey, Dictionary>,
}

impl OfflineDictionary {
    /// Checks that `entries` holds exactly one correctly shaped dictionary per key implied by
    /// `meta`.
    pub fn new(mut meta: OfflineMeta, entries: BTreeMap<DictKey, Dictionary>) -> Result<Self, OfflineError> {
        let heads = if meta.head_shared { 1 } else { meta.num_heads };
        let expected = meta.plan.groups.len() * heads as usize * meta.s_n;
        if entries.len() != expected {
            return Err(OfflineError::Invalid(format!("{} entries, expected {expected}", entries.len())));
        }
        for g in 0..meta.plan.groups.len() as u32 {
            for head in 0..heads {
                for chunk in 0..meta.s_n as u32 {
                    let d = entries.get(&DictKey { group: g, head, chunk }).ok_or(OfflineError::MissingEntry {
                        group: g,
                        head,
                        chunk,
                    })?;
                    if d.chunk_dim() != meta.chunk_dim || d.num_atoms() != meta.per_head_atoms || d.kind() != meta.kind
                    {
                        return Err(OfflineError::Invalid(format!(
                            "entry ({g}, {head}, {chunk}) is {} x {} {}",
                            d.chunk_dim(),
                            d.num_atoms(),
                            d.kind()
                        )));
                    }
                }
            }
        }
        meta.num_entries = entries.len();
        Ok(Self { meta, entries })
    }

    /// Packages the output of [`train_on_merged_layers`](super::train_on_merged_layers).
    pub fn from_training(
        training: super::MergedTraining,
        plan: MergePlan,
        train_config: TrainConfig,
        num_heads: u32,
        head_shared: bool,
    ) -> Result<Self, OfflineError> {
        let first = training
            .dictionaries
            .values()
            .next()
            .ok_or_else(|| OfflineError::Invalid("no trained dictionaries".into()))?;
        let meta = OfflineMeta {
            kind: first.kind(),
            chunk_dim: first.chunk_dim(),
            s_n: train_config.s_n,
            per_head_atoms: first.num_atoms(),
            num_heads,
            head_shared,
            plan,
            seed: train_config.seed,
            train_config,
            num_entries: 0,
        };
        Self::new(meta, training.dictionaries)
    }

    pub fn meta(&self) -> &OfflineMeta {
        &self.meta
    }

    pub fn entries(&self) -> &BTreeMap<DictKey, Dictionary> {
        &self.entries
    }

    pub fn get(&self, key: DictKey) -> Option<&Dictionary> {
        self.entries.get(&key)
    }

    /// The `s_n` chunk dictionaries that serve `(layer, head)`, in chunk order.
    pub fn for_layer_head(&self, layer: u32, head: u32) -> Result<Vec<&Dictionary>, OfflineError> {
        let group = self.meta.plan.group_of(layer).ok_or(OfflineError::UnknownLayer { layer })? as u32;
        let head = if self.meta.head_shared { 0 } else { head };
        (0..self.meta.s_n as u32)
            .map(|chunk| {
                self.entries.get(&DictKey { group, head, chunk }).ok_or(OfflineError::MissingEntry {
                    group,
                    head,
                    chunk,
                })
            })
            .collect()
    }

    /// Hex SHA-256 of the serialized file.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        write_csrd(self, &mut bytes).expect("writing to memory");
        hex(&Sha256::digest(&bytes))
    }

    /// Total stored atoms across all entries.
    pub fn total_atoms(&self) -> usize {
        self.entries.values().map(Dictionary::num_atoms).sum()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_csrd<W: Write>(dict: &OfflineDictionary, mut sink: W) -> Result<u64, OfflineError> {
    let meta = serde_json::to_string(&dict.meta)?;
    sink.write_all(&CSRD_MAGIC)?;
    write_u32(&mut sink, CSRD_VERSION)?;
    write_prefixed_str(&mut sink, &meta)?;
    let mut written = 12 + meta.len() as u64;
    let mut buf = Vec::new();
    for (key, d) in &dict.entries {
        buf.clear();
        for v in [key.group, key.head, key.chunk] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for col in d.atoms().columns() {
            for &v in col {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

fn field<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], OfflineError> {
    match read_array::<_, N>(r)? {
        Field::Value(b) => Ok(b),
        Field::Eof | Field::Partial => Err(OfflineError::Truncated),
    }
}

fn u32_field<R: Read>(r: &mut R) -> Result<u32, OfflineError> {
    Ok(u32::from_le_bytes(field::<_, 4>(r)?))
}

pub fn read_csrd<R: Read>(mut source: R) -> Result<OfflineDictionary, OfflineError> {
    let magic = field::<_, 4>(&mut source)?;
    if magic != CSRD_MAGIC {
        return Err(OfflineError::BadMagic(magic));
    }
    let version = u32_field(&mut source)?;
    if version != CSRD_VERSION {
        return Err(OfflineError::UnsupportedVersion(version));
    }
    let len = u32_field(&mut source)? as usize;
    let mut meta = vec![0u8; len];
    if read_full(&mut source, &mut meta)? != len {
        return Err(OfflineError::Truncated);
    }
    let meta: OfflineMeta = serde_json::from_slice(&meta)?;
    if meta.chunk_dim == 0 || meta.per_head_atoms == 0 {
        return Err(OfflineError::Invalid("chunk_dim and per_head_atoms must be positive".into()));
    }

    let (d, n) = (meta.chunk_dim, meta.per_head_atoms);
    let mut entries = BTreeMap::new();
    let mut body = vec![0u8; d * n * 4];
    for _ in 0..meta.num_entries {
        let key =
            DictKey { group: u32_field(&mut source)?, head: u32_field(&mut source)?, chunk: u32_field(&mut source)? };
        if read_full(&mut source, &mut body)? != body.len() {
            return Err(OfflineError::Truncated);
        }
        let values: Vec<f32> = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let atoms = Array2::from_shape_vec((n, d), values).expect("sized buffer").reversed_axes();
        let atoms = atoms.as_standard_layout().into_owned();
        let dict = Dictionary::new(atoms, meta.kind, Provenance::Offline)?;
        if entries.insert(key, dict).is_some() {
            return Err(OfflineError::Invalid(format!("duplicate entry {key:?}")));
        }
    }
    let mut trailing = [0u8; 1];
    if read_full(&mut source, &mut trailing)? != 0 {
        return Err(OfflineError::Invalid("trailing bytes after the last entry".into()));
    }
    OfflineDictionary::new(meta, entries)
}
