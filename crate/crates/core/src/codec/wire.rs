//! Byte layout of one [`SparseCode`]:
//!
//! ```text
//! u8 flags                     bit 0 = outlier
//! outlier:  head_dim x f16     raw values
//! else, per chunk:
//!   u8 count
//!   count x (u16 index, f16 coefficient)
//! ```

use half::f16;

use super::{CodeEntry, CodecConfig, CodecError, SparseCode, OUTLIER_SENTINEL};

const FLAG_OUTLIER: u8 = 1;

/// Appends the serialised code to `out`. Coefficients and raw values are narrowed to f16.
pub fn write_code(code: &SparseCode, cfg: &CodecConfig, out: &mut Vec<u8>) -> Result<(), CodecError> {
    if let Some(raw) = &code.raw {
        if raw.len() != cfg.head_dim {
            return Err(CodecError::DimensionMismatch { expected: cfg.head_dim, got: raw.len() });
        }
        out.push(FLAG_OUTLIER);
        for &v in raw {
            out.extend_from_slice(&f16::from_f32(v).to_le_bytes());
        }
        return Ok(());
    }
    if code.chunks.len() != cfg.s_n {
        return Err(CodecError::DimensionMismatch { expected: cfg.s_n, got: code.chunks.len() });
    }
    out.push(0);
    for chunk in &code.chunks {
        if chunk.len() > cfg.s {
            return Err(CodecError::Malformed(format!("{} entries exceed s = {}", chunk.len(), cfg.s)));
        }
        out.push(chunk.len() as u8);
        for e in chunk {
            if e.index == OUTLIER_SENTINEL {
                return Err(CodecError::Malformed("sentinel index inside a regular code".into()));
            }
            out.extend_from_slice(&e.index.to_le_bytes());
            out.extend_from_slice(&f16::from_f32(e.coeff).to_le_bytes());
        }
    }
    Ok(())
}

/// Serialised size in bytes of `code` (flags and per-chunk counts included).
pub fn serialized_len(code: &SparseCode, cfg: &CodecConfig) -> usize {
    match &code.raw {
        Some(_) => 1 + 2 * cfg.head_dim,
        None => 1 + code.chunks.len() + 4 * code.entry_count(),
    }
}

fn take<'a>(input: &mut &'a [u8], n: usize) -> Result<&'a [u8], CodecError> {
    if input.len() < n {
        return Err(CodecError::Malformed("unexpected end of code stream".into()));
    }
    let (head, rest) = input.split_at(n);
    *input = rest;
    Ok(head)
}

/// Reads one code from the front of `input`, advancing it.
pub fn read_code(input: &mut &[u8], cfg: &CodecConfig) -> Result<SparseCode, CodecError> {
    let flags = take(input, 1)?[0];
    if flags & !FLAG_OUTLIER != 0 {
        return Err(CodecError::Malformed(format!("unknown flag bits {flags:#04x}")));
    }
    if flags & FLAG_OUTLIER != 0 {
        let bytes = take(input, 2 * cfg.head_dim)?;
        let raw = bytes.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()).collect();
        return Ok(SparseCode::outlier(raw));
    }
    let mut chunks = Vec::with_capacity(cfg.s_n);
    for _ in 0..cfg.s_n {
        let count = take(input, 1)?[0] as usize;
        if count > cfg.s {
            return Err(CodecError::Malformed(format!("{count} entries exceed s = {}", cfg.s)));
        }
        let bytes = take(input, 4 * count)?;
        let entries: Vec<CodeEntry> = bytes
            .chunks_exact(4)
            .map(|c| CodeEntry {
                index: u16::from_le_bytes([c[0], c[1]]),
                coeff: f16::from_le_bytes([c[2], c[3]]).to_f32(),
            })
            .collect();
        if entries.iter().any(|e| e.index == OUTLIER_SENTINEL) {
            return Err(CodecError::Malformed("sentinel index inside a regular code".into()));
        }
        chunks.push(entries);
    }
    Ok(SparseCode { chunks, raw: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> CodecConfig {
        CodecConfig::new(4, 3, 2)
    }

    #[test]
    fn layout_is_exact() {
        let code = SparseCode { chunks: vec![vec![CodeEntry { index: 0x0102, coeff: 1.0 }], vec![]], raw: None };
        let mut out = Vec::new();
        write_code(&code, &cfg(), &mut out).unwrap();
        assert_eq!(out, vec![0, 1, 0x02, 0x01, 0x00, 0x3c, 0]);
        assert_eq!(out.len(), serialized_len(&code, &cfg()));

        let raw = SparseCode::outlier(vec![1.0, -2.0, 0.0, 0.5]);
        out.clear();
        write_code(&raw, &cfg(), &mut out).unwrap();
        assert_eq!(out.len(), 9);
        assert_eq!(out[0], 1);
        assert_eq!(read_code(&mut &out[..], &cfg()).unwrap(), raw);
    }

    #[test]
    fn rejects_malformed() {
        assert!(read_code(&mut &[0u8, 5][..], &cfg()).is_err());
        assert!(read_code(&mut &[0u8, 1, 0xff, 0xff, 0, 0, 0][..], &cfg()).is_err());
        assert!(read_code(&mut &[0x80u8][..], &cfg()).is_err());
        assert!(read_code(&mut &[0u8, 1, 0][..], &cfg()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_at_wire_precision(
            chunks in prop::collection::vec(
                prop::collection::vec((0u16..1000, -100.0f32..100.0), 0..=3), 2),
            outlier in any::<bool>(),
            raw in prop::collection::vec(-50.0f32..50.0, 4),
        ) {
            let code = if outlier {
                SparseCode::outlier(raw)
            } else {
                SparseCode {
                    chunks: chunks.into_iter()
                        .map(|c| c.into_iter().map(|(index, coeff)| CodeEntry { index, coeff }).collect())
                        .collect(),
                    raw: None,
                }
            };
            let mut out = Vec::new();
            write_code(&code, &cfg(), &mut out).unwrap();
            prop_assert_eq!(out.len(), serialized_len(&code, &cfg()));
            let mut input = &out[..];
            let back = read_code(&mut input, &cfg()).unwrap();
            prop_assert!(input.is_empty());
            prop_assert_eq!(&back, &code.to_wire_precision());
            // Already at wire precision: a second trip is the identity.
            let mut out2 = Vec::new();
            write_code(&back, &cfg(), &mut out2).unwrap();
            prop_assert_eq!(out, out2);
        }
    }
}
