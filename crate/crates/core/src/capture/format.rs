//! `CSRC` binary layout (little-endian):
//!
//! ```text
//! magic    4 bytes  "CSRC"
//! version  u32      1
//! meta_len u32
//! meta     meta_len bytes of UTF-8 JSON (the CaptureHeader)
//! blocks*  u32 layer, u32 head, u64 count, count*head_dim values (row-major, header dtype)
//! ```
//!
//! Blocks run to end of stream.

use std::io::{Read, Write};

use half::f16;
use ndarray::Array2;

use super::{CaptureBlock, CaptureDataset, CaptureError, CaptureHeader, DType};
use crate::io_util::{read_array, read_full, write_prefixed_str, write_u32, write_u64, Field};

pub const CAPTURE_MAGIC: [u8; 4] = *b"CSRC";
pub const CAPTURE_VERSION: u32 = 1;

/// Serialises `dataset`, returning the number of bytes written.
pub fn write_capture<W: Write>(dataset: &CaptureDataset, mut sink: W) -> Result<u64, CaptureError> {
    let header = dataset.header();
    let meta = serde_json::to_string(header)?;
    let mut buf = Vec::with_capacity(16 + meta.len());
    buf.extend_from_slice(&CAPTURE_MAGIC);
    write_u32(&mut buf, CAPTURE_VERSION)?;
    write_prefixed_str(&mut buf, &meta)?;
    sink.write_all(&buf)?;
    let mut written = buf.len() as u64;

    for block in dataset.blocks() {
        if block.vectors.iter().any(|v| !v.is_finite()) {
            return Err(CaptureError::NonFinite { layer: block.layer, head: block.head });
        }
        buf.clear();
        write_u32(&mut buf, block.layer)?;
        write_u32(&mut buf, block.head)?;
        write_u64(&mut buf, block.count() as u64)?;
        for &v in block.vectors.iter() {
            match header.dtype {
                DType::F32 => buf.extend_from_slice(&v.to_le_bytes()),
                DType::F16 => buf.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
            }
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

pub fn read_capture<R: Read>(mut source: R) -> Result<CaptureDataset, CaptureError> {
    let magic = match read_array::<_, 4>(&mut source)? {
        Field::Value(m) => m,
        _ => return Err(CaptureError::TruncatedHeader),
    };
    if magic != CAPTURE_MAGIC {
        return Err(CaptureError::BadMagic(magic));
    }
    let version = match read_array::<_, 4>(&mut source)? {
        Field::Value(v) => u32::from_le_bytes(v),
        _ => return Err(CaptureError::TruncatedHeader),
    };
    if version != CAPTURE_VERSION {
        return Err(CaptureError::UnsupportedVersion(version));
    }
    let meta_len = match read_array::<_, 4>(&mut source)? {
        Field::Value(v) => u32::from_le_bytes(v) as usize,
        _ => return Err(CaptureError::TruncatedHeader),
    };
    let mut meta = vec![0u8; meta_len];
    if read_full(&mut source, &mut meta)? != meta_len {
        return Err(CaptureError::TruncatedHeader);
    }
    let header: CaptureHeader = serde_json::from_slice(&meta)?;
    header.validate()?;

    let head_dim = header.head_dim as usize;
    let elem = header.dtype.size();
    let mut blocks = Vec::new();
    loop {
        let block = blocks.len();
        let mut fixed = [0u8; 16];
        match read_full(&mut source, &mut fixed)? {
            0 => break,
            16 => {}
            _ => return Err(CaptureError::Truncated { block }),
        }
        let layer = u32::from_le_bytes(fixed[0..4].try_into().unwrap());
        let head = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
        let count = u64::from_le_bytes(fixed[8..16].try_into().unwrap());
        if layer >= header.num_layers || head >= header.num_heads {
            return Err(CaptureError::IndexOutOfRange { layer, head });
        }
        let count = usize::try_from(count).map_err(|_| CaptureError::Truncated { block })?;
        let n_bytes =
            count.checked_mul(head_dim).and_then(|n| n.checked_mul(elem)).ok_or(CaptureError::Truncated { block })?;
        // Read incrementally so a corrupt count cannot force a huge allocation up front.
        let mut payload = Vec::new();
        let got = (&mut source).take(n_bytes as u64).read_to_end(&mut payload)?;
        if got != n_bytes {
            return Err(CaptureError::Truncated { block });
        }
        let values: Vec<f32> = match header.dtype {
            DType::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            DType::F16 => payload.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
        };
        let vectors = Array2::from_shape_vec((count, head_dim), values).expect("payload length checked above");
        blocks.push(CaptureBlock { layer, head, vectors });
    }
    CaptureDataset::new(header, blocks)
}
