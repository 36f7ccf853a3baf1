//! Sparse-representation compression for transformer key/value caches.
//!
//! Cache vectors are expressed as a handful of `(atom index, coefficient)` pairs over a
//! dictionary of unit-norm atoms. The crate is organised around the pipeline:
//!
//! - [`capture`]: the `CSRC` capture file format and synthetic calibration data.
//! - [`merge`]: per-layer 2-D histograms, Jensen-Shannon divergence and layer merge plans.
//! - [`neural_dict`]: offline dictionary training (k-means init, MP-in-the-loop gradient descent)
//!   and the `CSRD` dictionary file.
//! - [`codec`]: matching-pursuit encoding and de-sparse decoding, with channel chunking and an
//!   outlier escape.
//! - [`runtime`]: the per-prompt compressed cache with online atoms and memory accounting.
//! - [`eval`]: reconstruction and attention fidelity, footprint curves and ablations.

pub mod capture;
pub mod codec;
pub mod eval;
pub mod merge;
pub mod neural_dict;
pub mod runtime;

mod io_util;
mod rng;

use serde::{Deserialize, Serialize};

/// Which half of the attention cache a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CacheKind {
    Key,
    Value,
}

impl std::fmt::Display for CacheKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CacheKind::Key => f.write_str("key"),
            CacheKind::Value => f.write_str("value"),
        }
    }
}

impl std::str::FromStr for CacheKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "key" | "k" => Ok(CacheKind::Key),
            "value" | "v" => Ok(CacheKind::Value),
            other => Err(format!("unknown cache kind `{other}` (expected key or value)")),
        }
    }
}
