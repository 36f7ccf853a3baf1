//! The CSRS cache snapshot.
//!
//! Layout (little-endian): magic `CSRS`, u32 version, u32 metadata length, JSON metadata, then per
//! lane in `(layer, head)` order:
//!
//! ```text
//! u32 layer, u32 head
//! per chunk: u32 online atom count k, k * chunk_dim f16 (column-major)
//! u64 token count, then each code in the mp-codec wire layout
//! ```
//!
//! Offline atoms are not repeated; the metadata names the dictionary file by content hash.

use std::io::{Read, Write};

use half::f16;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{CsrCache, Lane, PromptDictionary, RuntimeError};
use crate::codec::{read_code, write_code, CodecConfig};
use crate::io_util::{read_full, write_prefixed_str, write_u32};
use crate::neural_dict::OfflineDictionary;
use crate::CacheKind;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"CSRS";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotMeta {
    pub dictionary_hash: String,
    pub codec: CodecConfig,
    pub kind: CacheKind,
    pub online_size: usize,
    pub num_lanes: usize,
}

pub fn write_snapshot<W: Write>(cache: &CsrCache, mut sink: W) -> Result<u64, RuntimeError> {
    let online_size = cache.lanes.values().next().map_or(0, |l| l.dictionary.online_size());
    let meta = SnapshotMeta {
        dictionary_hash: cache.dictionary_hash.clone(),
        codec: cache.cfg,
        kind: cache.kind,
        online_size,
        num_lanes: cache.lanes.len(),
    };
    let meta = serde_json::to_string(&meta)?;
    sink.write_all(&SNAPSHOT_MAGIC)?;
    write_u32(&mut sink, SNAPSHOT_VERSION)?;
    write_prefixed_str(&mut sink, &meta)?;
    let mut written = 12 + meta.len() as u64;

    let mut buf = Vec::new();
    for (&(layer, head), lane) in &cache.lanes {
        buf.clear();
        buf.extend_from_slice(&layer.to_le_bytes());
        buf.extend_from_slice(&head.to_le_bytes());
        for atoms in lane.dictionary.online_stored() {
            buf.extend_from_slice(&(atoms.ncols() as u32).to_le_bytes());
            for col in atoms.columns() {
                for v in col {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        buf.extend_from_slice(&(lane.codes.len() as u64).to_le_bytes());
        for code in &lane.codes {
            write_code(code, &cache.cfg, &mut buf)?;
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

fn take<'a>(input: &mut &'a [u8], n: usize) -> Result<&'a [u8], RuntimeError> {
    if input.len() < n {
        return Err(RuntimeError::Truncated);
    }
    let (head, rest) = input.split_at(n);
    *input = rest;
    Ok(head)
}

fn take_u32(input: &mut &[u8]) -> Result<u32, RuntimeError> {
    Ok(u32::from_le_bytes(take(input, 4)?.try_into().expect("4 bytes")))
}

fn parse_meta(input: &mut &[u8]) -> Result<SnapshotMeta, RuntimeError> {
    let magic: [u8; 4] = take(input, 4)?.try_into().expect("4 bytes");
    if magic != SNAPSHOT_MAGIC {
        return Err(RuntimeError::BadMagic(magic));
    }
    let version = take_u32(input)?;
    if version != SNAPSHOT_VERSION {
        return Err(RuntimeError::UnsupportedVersion(version));
    }
    let len = take_u32(input)? as usize;
    Ok(serde_json::from_slice(take(input, len)?)?)
}

/// Reads only the metadata block.
pub fn read_snapshot_meta<R: Read>(mut source: R) -> Result<SnapshotMeta, RuntimeError> {
    let mut head = [0u8; 12];
    if read_full(&mut source, &mut head)? != head.len() {
        return Err(RuntimeError::Truncated);
    }
    let len = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let mut bytes = head.to_vec();
    bytes.resize(12 + len, 0);
    if read_full(&mut source, &mut bytes[12..])? != len {
        return Err(RuntimeError::Truncated);
    }
    parse_meta(&mut bytes.as_slice())
}

/// Restores a cache written by [`write_snapshot`]. `offline` must be the dictionary the cache was
/// built with (checked by content hash).
pub fn read_snapshot<R: Read>(mut source: R, offline: &OfflineDictionary) -> Result<CsrCache, RuntimeError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let input = &mut bytes.as_slice();
    let meta = parse_meta(input)?;
    let found = offline.content_hash();
    if found != meta.dictionary_hash {
        return Err(RuntimeError::DictionaryHash { expected: meta.dictionary_hash, found });
    }
    let mut cache = CsrCache::new(meta.codec, offline)?;
    if cache.kind != meta.kind {
        return Err(RuntimeError::Mismatch(format!(
            "snapshot holds {} codes, dictionary is for {}",
            meta.kind, cache.kind
        )));
    }
    let chunk_dim = meta.codec.chunk_dim();

    for _ in 0..meta.num_lanes {
        let layer = take_u32(input)?;
        let head = take_u32(input)?;
        let mut online = Vec::with_capacity(meta.codec.s_n);
        for _ in 0..meta.codec.s_n {
            let k = take_u32(input)? as usize;
            let bytes = take(input, 2 * k * chunk_dim)?;
            let values: Vec<f16> = bytes.chunks_exact(2).map(|b| f16::from_le_bytes([b[0], b[1]])).collect();
            let atoms = Array2::from_shape_vec((k, chunk_dim), values).expect("sized").reversed_axes();
            online.push(atoms.as_standard_layout().into_owned());
        }
        let slices = offline.for_layer_head(layer, head)?;
        let dictionary = PromptDictionary::from_parts(layer, head, &slices, online, meta.online_size)?;

        let count = u64::from_le_bytes(take(input, 8)?.try_into().expect("8 bytes")) as usize;
        let mut codes = Vec::with_capacity(count.min(input.len()));
        for _ in 0..count {
            codes.push(read_code(input, &meta.codec)?);
        }
        if cache.lanes.contains_key(&(layer, head)) {
            return Err(RuntimeError::LaneExists { layer, head });
        }
        cache.insert_lane((layer, head), Lane { dictionary, codes });
    }
    if !input.is_empty() {
        return Err(RuntimeError::Mismatch("trailing bytes after the last lane".into()));
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{generate_synthetic, Generator, SyntheticSpec};
    use crate::runtime::tests::offline_from;
    use crate::runtime::{build_prompt_dictionary, compress_capture};
    use ndarray::{array, Array2};

    fn sample_cache() -> (CsrCache, OfflineDictionary) {
        let h = 1.0 / 2f32.sqrt();
        let off = offline_from(array![[1.0, 0.0, h], [0.0, 1.0, h]], 2, CacheKind::Value);
        let cfg = CodecConfig::new(4, 2, 2).with_outlier_threshold(Some(0.2));
        let x = array![[0.3, -1.2, 0.4, 2.0], [2.0, 0.1, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [1.0, -1.0, 0.5, 0.25]];
        let mut cache = CsrCache::new(cfg, &off).unwrap();
        cache.install(build_prompt_dictionary(&off, 0, 0, x.view(), 3, 5).unwrap()).unwrap();
        cache.prefill_compress(0, 0, x.view()).unwrap();
        (cache, off)
    }

    #[test]
    fn round_trip_decodes_identically() {
        let (cache, off) = sample_cache();
        let mut bytes = Vec::new();
        let n = write_snapshot(&cache, &mut bytes).unwrap();
        assert_eq!(n as usize, bytes.len());
        let back = read_snapshot(bytes.as_slice(), &off).unwrap();
        assert_eq!(back, cache);
        assert_eq!(back.decode_all(0, 0).unwrap(), cache.decode_all(0, 0).unwrap());
        let mut again = Vec::new();
        write_snapshot(&back, &mut again).unwrap();
        assert_eq!(again, bytes);
        assert_eq!(read_snapshot_meta(bytes.as_slice()).unwrap().num_lanes, 1);
    }

    #[test]
    fn wrong_dictionary_or_corruption_rejected() {
        let (cache, _) = sample_cache();
        let mut bytes = Vec::new();
        write_snapshot(&cache, &mut bytes).unwrap();
        let other = offline_from(Array2::eye(2), 2, CacheKind::Value);
        assert!(matches!(read_snapshot(bytes.as_slice(), &other), Err(RuntimeError::DictionaryHash { .. })));
        let (_, off) = sample_cache();
        assert!(read_snapshot(&bytes[..bytes.len() - 1], &off).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(read_snapshot(bad.as_slice(), &off), Err(RuntimeError::BadMagic(_))));
        bytes.push(7);
        assert!(matches!(read_snapshot(bytes.as_slice(), &off), Err(RuntimeError::Mismatch(_))));
    }

    #[test]
    fn compressed_capture_round_trips() {
        let spec = SyntheticSpec {
            num_layers: 1,
            num_heads: 2,
            head_dim: 2,
            tokens_per_layer: 30,
            generator: Generator::GaussianMixture { num_components: 3, spread: 0.1 },
            seed: 4,
            kind: CacheKind::Key,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let mut off = offline_from(Array2::eye(2), 1, CacheKind::Key);
        // Two heads sharing one dictionary.
        let mut meta = off.meta().clone();
        meta.head_shared = true;
        meta.num_heads = 2;
        off = OfflineDictionary::new(meta, off.entries().clone()).unwrap();
        let cache = compress_capture(&ds, &off, CodecConfig::new(2, 1, 1), 6, 0).unwrap();
        assert_eq!(cache.lanes().len(), 2);
        let mut bytes = Vec::new();
        write_snapshot(&cache, &mut bytes).unwrap();
        let back = read_snapshot(bytes.as_slice(), &off).unwrap();
        for h in 0..2 {
            assert_eq!(back.decode_all(0, h).unwrap(), cache.decode_all(0, h).unwrap());
        }
    }
}
