//! Analytic memory footprint of a KV cache as a function of sequence length.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGeometry {
    pub head_dim: u64,
    pub num_heads: u64,
    pub num_layers: u64,
    pub batch: u64,
}

impl ModelGeometry {
    /// Cached vectors per token position across the model and batch.
    fn lanes(&self) -> u64 {
        self.num_heads * self.num_layers * self.batch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum FootprintMethod {
    Fp16,
    /// Sparse codes of `s * s_n` (u16 index, f16 coefficient) entries per vector, plus fp16 online
    /// atoms per `(layer, head, chunk)` of each sequence, plus the fp16 offline dictionary shared by
    /// the whole batch (`offline_atoms_per_head` atoms per head and chunk, for `merged_groups`
    /// groups).
    Csr {
        s: u64,
        s_n: u64,
        online_atoms_per_head: u64,
        offline_atoms_per_head: u64,
        merged_groups: u64,
    },
    /// A `bits`-per-channel quantised cache; storage only, no scales or zero points.
    KBit {
        bits: f64,
    },
}

impl FootprintMethod {
    pub fn name(&self) -> String {
        match *self {
            FootprintMethod::Fp16 => "fp16".into(),
            FootprintMethod::Csr { s, s_n, .. } => format!("csr(s={s},s_n={s_n})"),
            FootprintMethod::KBit { bits } => format!("{bits}-bit"),
        }
    }

    /// Bytes per cached vector, excluding length-independent overhead.
    fn bytes_per_vector(&self, g: &ModelGeometry) -> f64 {
        match *self {
            FootprintMethod::Fp16 => (2 * g.head_dim) as f64,
            FootprintMethod::Csr { s, s_n, .. } => (4 * s * s_n) as f64,
            FootprintMethod::KBit { bits } => bits * g.head_dim as f64 / 8.0,
        }
    }

    /// Length-independent bytes: online atoms for every sequence plus the shared offline part.
    fn constant_bytes(&self, g: &ModelGeometry) -> f64 {
        match *self {
            FootprintMethod::Csr { online_atoms_per_head, offline_atoms_per_head, merged_groups, .. } => {
                // Chunks split head_dim, so atoms of all chunks of one head add up to head_dim values.
                let online = 2 * online_atoms_per_head * g.head_dim * g.lanes();
                let offline = 2 * offline_atoms_per_head * g.head_dim * g.num_heads * merged_groups;
                (online + offline) as f64
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintRow {
    pub seq_len: u64,
    pub method: String,
    pub bytes: f64,
}

pub const FOOTPRINT_CSV_HEADER: &str = "seq_len,method,bytes";

pub fn bytes_at(g: &ModelGeometry, method: &FootprintMethod, seq_len: u64) -> f64 {
    method.bytes_per_vector(g) * (g.lanes() * seq_len) as f64 + method.constant_bytes(g)
}

/// fp16 bytes over `method` bytes at `seq_len`, overhead included.
pub fn compression_ratio_at(g: &ModelGeometry, method: &FootprintMethod, seq_len: u64) -> f64 {
    bytes_at(g, &FootprintMethod::Fp16, seq_len) / bytes_at(g, method, seq_len)
}

/// fp16 bytes over `method` bytes as the sequence grows without bound.
pub fn asymptotic_ratio(g: &ModelGeometry, method: &FootprintMethod) -> f64 {
    FootprintMethod::Fp16.bytes_per_vector(g) / method.bytes_per_vector(g)
}

/// One row per `(length, method)` pair, lengths outermost.
pub fn footprint_curve(seq_lengths: &[u64], g: &ModelGeometry, methods: &[FootprintMethod]) -> Vec<FootprintRow> {
    let mut rows = Vec::with_capacity(seq_lengths.len() * methods.len());
    for &len in seq_lengths {
        for m in methods {
            rows.push(FootprintRow { seq_len: len, method: m.name(), bytes: bytes_at(g, m, len) });
        }
    }
    rows
}

pub fn footprint_csv(rows: &[FootprintRow]) -> String {
    let mut out = format!("{FOOTPRINT_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.seq_len, r.method, r.bytes);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const G: ModelGeometry = ModelGeometry { head_dim: 128, num_heads: 32, num_layers: 32, batch: 4 };

    fn csr(s: u64, online: u64) -> FootprintMethod {
        FootprintMethod::Csr { s, s_n: 1, online_atoms_per_head: online, offline_atoms_per_head: 0, merged_groups: 0 }
    }

    #[test]
    fn fp16_is_hand_arithmetic() {
        assert_eq!(bytes_at(&G, &FootprintMethod::Fp16, 1000), (2 * 128 * 32 * 32 * 1000 * 4) as f64);
        assert_eq!(bytes_at(&G, &FootprintMethod::Fp16, 0), 0.0);
        let a = bytes_at(&G, &FootprintMethod::Fp16, 3000);
        assert_eq!(bytes_at(&G, &FootprintMethod::Fp16, 6000), 2.0 * a);
    }

    #[test]
    fn csr_starts_at_overhead_and_approaches_bit_ratio() {
        let m = csr(8, 256);
        assert_eq!(bytes_at(&G, &m, 0), (2 * 256 * 128 * 32 * 32 * 4) as f64);
        assert_eq!(asymptotic_ratio(&G, &csr(8, 0)), 8.0);
        assert_eq!(asymptotic_ratio(&G, &csr(4, 0)), 16.0);
        assert_eq!(asymptotic_ratio(&G, &FootprintMethod::KBit { bits: 2.0 }), 8.0);
        assert!(compression_ratio_at(&G, &m, 1 << 20) < 8.0);
        assert!(compression_ratio_at(&G, &m, 1 << 20) > 7.9);
    }

    #[test]
    fn curve_layout() {
        let rows = footprint_curve(&[0, 10], &G, &[FootprintMethod::Fp16, csr(8, 0)]);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1].method, "csr(s=8,s_n=1)");
        let csv = footprint_csv(&rows);
        assert!(csv.starts_with("seq_len,method,bytes\n0,fp16,0\n"));
    }
}
