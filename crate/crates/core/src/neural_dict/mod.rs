//! Offline dictionary learning.
//!
//! The dictionary is a single bias-free linear map `W` (`chunk_dim x N`, unit columns). Training
//! initialises `W` from k-means centroids, then alternates matching pursuit (codes held fixed)
//! with plain gradient steps on
//!
//! ```text
//! L = sum_x ||x - W r(x)||^2  +  beta * (1/N^2) ||I - W^T W||_F^2
//! beta = min(beta_scale * L_mse / L_div, beta_cap)   (previous batch, detached)
//! ```
//!
//! and renormalises the columns after every step.

mod kmeans;
mod offline;
mod train;

pub use offline::{
    read_csrd, write_csrd, DictKey, OfflineDictionary, OfflineError, OfflineMeta, CSRD_MAGIC, CSRD_VERSION,
};
pub use train::{
    adaptive_beta, div_gradient, grad_step, kmeans_init, loss_div, loss_mse, mse_gradient, renorm, train_neural_dict,
    train_neural_dict_with, train_on_merged_layers, ChunkCode, MergedTraining,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::CaptureError;
use crate::codec::CodecError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training input is empty")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite gradient at step {step} (mse {mse}, div {div}, beta {beta})")]
    NonFiniteGradient { step: u64, mse: f64, div: f64, beta: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("merge plan does not match the capture: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub num_atoms: usize,
    /// MP-level used inside the loss.
    pub s_train: usize,
    pub s_n: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta_cap: f64,
    pub beta_scale: f64,
    pub seed: u64,
    pub kmeans_iters: usize,
    /// Fraction of each (group, head) sample held out for validation.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.1
}

impl TrainConfig {
    /// Key-cache defaults: `s = 8`, one chunk.
    pub fn keys() -> Self {
        Self {
            num_atoms: 256,
            s_train: 8,
            s_n: 1,
            epochs: 10,
            batch_size: 256,
            learning_rate: 0.01,
            beta_cap: 1.0,
            beta_scale: 0.1,
            seed: 0,
            kmeans_iters: 25,
            validation_fraction: default_validation_fraction(),
        }
    }

    /// Value-cache defaults: `s = 4` over two chunks.
    pub fn values() -> Self {
        Self { s_train: 4, s_n: 2, ..Self::keys() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.num_atoms == 0 || self.s_train == 0 || self.s_n == 0 || self.batch_size == 0 {
            return bad("num_atoms, s_train, s_n and batch_size must be positive");
        }
        if self.num_atoms > crate::codec::MAX_ATOMS {
            return bad("num_atoms exceeds the 16-bit index space");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.beta_cap) || !(0.0..).contains(&self.beta_scale) {
            return bad("beta_cap must lie in [0, 1] and beta_scale must be >= 0");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::keys()
    }
}

/// Mutable training state carried between batches.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// `chunk_dim x N`, unit columns after every completed step.
    pub weights: Array2<f64>,
    pub beta: f64,
    pub last_mse: f64,
    pub last_div: f64,
    pub epoch: usize,
    pub step: u64,
}

impl TrainState {
    pub fn new(weights: Array2<f64>) -> Self {
        Self { weights, beta: 0.0, last_mse: 0.0, last_div: 0.0, epoch: 0, step: 0 }
    }
}

/// Per-epoch loss traces. Losses are means per sample; `div_loss` and `beta` are the values after
/// the epoch's last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_train_mse: f64,
    pub initial_val_mse: Option<f64>,
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub div_loss: Vec<f64>,
    pub beta: Vec<f64>,
    pub converged: bool,
    /// Wall-clock seconds per epoch. Not deterministic, unlike every other field.
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.train_mse.len()
    }

    /// Equality ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.initial_train_mse.to_bits() == other.initial_train_mse.to_bits()
            && self.initial_val_mse.map(f64::to_bits) == other.initial_val_mse.map(f64::to_bits)
            && bits(&self.train_mse) == bits(&other.train_mse)
            && bits(&self.val_mse) == bits(&other.val_mse)
            && bits(&self.div_loss) == bits(&other.div_loss)
            && bits(&self.beta) == bits(&other.beta)
            && self.converged == other.converged
    }

    pub fn final_val_mse(&self) -> Option<f64> {
        self.val_mse.last().copied().or(self.initial_val_mse)
    }

    pub fn final_train_mse(&self) -> f64 {
        self.train_mse.last().copied().unwrap_or(self.initial_train_mse)
    }
}
