//! The run configuration file. Every field has a default; flags override file values, and the
//! resolved result is echoed next to each run's outputs.

use std::path::{Path, PathBuf};

use csr_core::merge::{HeadAggregation, JsdOptions, MergeOptions, DEFAULT_BINS, DEFAULT_DELTA1, DEFAULT_DELTA2};
use csr_core::neural_dict::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Outlier threshold used when outliers are switched on without an explicit value.
pub const DEFAULT_OUTLIER_THRESHOLD: f32 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Training hyperparameters; the key or value defaults are picked from the capture when absent.
    pub train: Option<TrainConfig>,
    pub head_shared: bool,
    pub codec: CodecSection,
    pub merge: MergeSection,
    pub online_size: usize,
    pub eval: EvalSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: None,
            head_shared: false,
            codec: CodecSection::default(),
            merge: MergeSection::default(),
            online_size: 256,
            eval: EvalSection::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub s: usize,
    /// Taken from the dictionary when absent.
    pub s_n: Option<usize>,
    pub outlier_threshold: Option<f32>,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self { s: 8, s_n: None, outlier_threshold: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSection {
    pub delta1: f64,
    pub delta2: f64,
    pub bins: usize,
    pub sample_cap: usize,
    pub aggregation: HeadAggregation,
}

impl Default for MergeSection {
    fn default() -> Self {
        let jsd = JsdOptions::default();
        Self {
            delta1: DEFAULT_DELTA1,
            delta2: DEFAULT_DELTA2,
            bins: DEFAULT_BINS,
            sample_cap: jsd.sample_cap,
            aggregation: jsd.aggregation,
        }
    }
}

impl MergeSection {
    pub fn options(&self, seed: u64) -> MergeOptions {
        MergeOptions {
            delta1: self.delta1,
            delta2: self.delta2,
            jsd: JsdOptions { bins: self.bins, sample_cap: self.sample_cap, seed, aggregation: self.aggregation },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub sweep_s: Vec<usize>,
    pub attention: bool,
    pub causal: bool,
    pub max_queries: usize,
    pub footprint_lengths: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sweep_s: vec![2, 4, 8, 16],
            attention: false,
            causal: false,
            max_queries: 64,
            footprint_lengths: vec![512, 1024, 2048, 4096, 8192, 16384, 32768],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub capture: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub snapshot: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Returns the path or a configuration error naming the missing flag.
pub fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("missing {flag} (flag or paths entry in --config)")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"codec": {"s": 4, "bits": 2}}"#).is_err());
    }

    #[test]
    fn round_trips() {
        let c = RunConfig {
            train: Some(TrainConfig::values()),
            codec: CodecSection { s_n: Some(2), ..CodecSection::default() },
            ..RunConfig::default()
        };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
