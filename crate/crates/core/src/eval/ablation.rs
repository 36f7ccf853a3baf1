//! Desk-scale ablations on synthetic data. Each one checks the direction of a finding about
//! dictionary size, channel chunking, the diversity term and the online part.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{EvalError, SCHEMA_VERSION};
use crate::capture::{generate_synthetic, Generator, SyntheticSpec};
use crate::codec::{Codec, CodecConfig};
use crate::merge::MergePlan;
use crate::neural_dict::{train_neural_dict, DictKey, OfflineDictionary, OfflineMeta, TrainConfig};
use crate::runtime::build_prompt_dictionary;
use crate::CacheKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub name: String,
    /// The expected direction, in words.
    pub expectation: String,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub seed: u64,
    pub passed: bool,
    pub ablations: Vec<AblationOutcome>,
}

fn planted(head_dim: u32, atoms: usize, sparsity: usize, tokens: usize, seed: u64) -> Result<Array2<f64>, EvalError> {
    let spec = SyntheticSpec {
        num_layers: 1,
        num_heads: 1,
        head_dim,
        tokens_per_layer: tokens,
        generator: Generator::PlantedDictionary { num_atoms: atoms, sparsity, noise_sigma: 0.01 },
        seed,
        kind: CacheKind::Key,
    };
    let ds = generate_synthetic(&spec).map_err(|e| EvalError::InvalidSweep(e.to_string()))?;
    Ok(ds.blocks()[0].vectors.mapv(f64::from))
}

fn ablation_config(num_atoms: usize, s_train: usize, seed: u64) -> TrainConfig {
    TrainConfig { num_atoms, s_train, epochs: 20, batch_size: 32, learning_rate: 0.05, seed, ..TrainConfig::keys() }
}

/// Final validation MSE after training on the first 90% of rows and validating on the rest.
fn converged_mse(x: ArrayView2<f64>, cfg: &TrainConfig) -> Result<f64, EvalError> {
    let cut = x.nrows() * 9 / 10;
    let (_, report) = train_neural_dict(x.slice(s![..cut, ..]), cfg, x.slice(s![cut.., ..]), CacheKind::Key)?;
    Ok(report.final_val_mse().unwrap_or(report.final_train_mse()))
}

/// Converged loss against dictionary size N in {64, 128, 256}.
pub fn ablation_dictionary_size(seed: u64) -> Result<AblationOutcome, EvalError> {
    let x = planted(16, 256, 3, 5000, seed + 1)?;
    let mut metrics = BTreeMap::new();
    let mut losses = Vec::new();
    for n in [64, 128, 256] {
        let l = converged_mse(x.view(), &ablation_config(n, 4, seed))?;
        metrics.insert(format!("mse_n{n}"), l);
        losses.push(l);
    }
    Ok(AblationOutcome {
        name: "dictionary_size".into(),
        expectation: "converged loss does not increase with the number of atoms".into(),
        passed: losses.windows(2).all(|w| w[1] <= w[0]),
        metrics,
    })
}

/// Two chunks with half the atoms and half the MP-level each, against one full-width dictionary,
/// on data whose halves come from independent planted dictionaries.
pub fn ablation_value_chunking(seed: u64) -> Result<AblationOutcome, EvalError> {
    let a = planted(8, 32, 2, 5000, seed + 2)?;
    let b = planted(8, 32, 2, 5000, seed + 3)?;
    let x = concatenate(Axis(1), &[a.view(), b.view()]).expect("same rows");
    let whole = converged_mse(x.view(), &ablation_config(64, 4, seed))?;
    let half = ablation_config(32, 2, seed);
    let chunked = converged_mse(a.view(), &half)? + converged_mse(b.view(), &half)?;
    Ok(AblationOutcome {
        name: "value_chunking".into(),
        expectation: "s_n = 2 reaches a loss no higher than s_n = 1 at equal atom and coefficient budget".into(),
        passed: chunked <= whole,
        metrics: BTreeMap::from([("mse_sn1".into(), whole), ("mse_sn2".into(), chunked)]),
    })
}

/// Converged loss with and without the diversity term, averaged over five seeds, on planted data
/// with flipped signs on a fixed subset of rows (so k-means tends to produce antipodal, redundant atoms).
pub fn ablation_diversity(seed: u64) -> Result<AblationOutcome, EvalError> {
    let (mut on, mut off) = (0.0, 0.0);
    let runs = 5;
    for k in 0..runs {
        let run_seed = seed + k;
        let mut x = planted(16, 32, 2, 3000, seed + 10 + k)?;
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            if i.wrapping_mul(2654435761) % 7 < 3 {
                row.mapv_inplace(|v| -v);
            }
        }
        let cfg = ablation_config(64, 4, run_seed);
        on += converged_mse(x.view(), &cfg)?;
        off += converged_mse(x.view(), &TrainConfig { beta_cap: 0.0, ..cfg })?;
    }
    let (on, off) = (on / runs as f64, off / runs as f64);
    Ok(AblationOutcome {
        name: "diversity_term".into(),
        expectation: "mean converged loss with the diversity term is no higher than without".into(),
        passed: on <= off + 1e-6,
        metrics: BTreeMap::from([("mse_div_on".into(), on), ("mse_div_off".into(), off)]),
    })
}

/// Mean residual norm with and without online atoms at s = 2 and s = 8, with an offline
/// dictionary trained on differently planted data.
pub fn ablation_online_part(seed: u64) -> Result<AblationOutcome, EvalError> {
    let d = 16u32;
    let train = planted(d, 32, 2, 3000, seed + 20)?;
    let (dict, _) =
        train_neural_dict(train.view(), &ablation_config(32, 4, seed), Array2::zeros((0, 16)).view(), CacheKind::Key)?;
    let meta = OfflineMeta {
        kind: CacheKind::Key,
        chunk_dim: d as usize,
        s_n: 1,
        per_head_atoms: 32,
        num_heads: 1,
        head_shared: false,
        plan: MergePlan::singletons(CacheKind::Key, 1),
        train_config: ablation_config(32, 4, seed),
        seed,
        num_entries: 0,
    };
    let offline = OfflineDictionary::new(meta, BTreeMap::from([(DictKey { group: 0, head: 0, chunk: 0 }, dict)]))
        .map_err(|e| EvalError::InvalidSweep(e.to_string()))?;
    let lane = planted(d, 64, 2, 2000, seed + 21)?.mapv(|v| v as f32);

    let mut metrics = BTreeMap::new();
    for online in [0usize, 256] {
        let pd = build_prompt_dictionary(&offline, 0, 0, lane.view(), online, seed)?;
        for s in [2usize, 8] {
            let codec = Codec::new(CodecConfig::new(d as usize, s, 1), pd.dictionaries().to_vec())?;
            let y = codec.decode_all(&codec.encode_batch(lane.view())?)?;
            let r = &lane - &y;
            let mean = r.rows().into_iter().map(|row| row.dot(&row).sqrt() as f64).sum::<f64>() / lane.nrows() as f64;
            metrics.insert(format!("residual_s{s}_online{online}"), mean);
        }
    }
    let gain = |s: usize| metrics[&format!("residual_s{s}_online0")] - metrics[&format!("residual_s{s}_online256")];
    let (g2, g8) = (gain(2), gain(8));
    metrics.insert("gain_s2".into(), g2);
    metrics.insert("gain_s8".into(), g8);
    Ok(AblationOutcome {
        name: "online_part".into(),
        expectation: "online atoms reduce the mean residual at s = 2".into(),
        passed: g2 >= 0.0,
        metrics,
    })
}

/// Runs all four ablations; `passed` is true iff every direction holds.
pub fn ablation_suite(seed: u64) -> Result<AblationReport, EvalError> {
    let ablations = vec![
        ablation_dictionary_size(seed)?,
        ablation_value_chunking(seed)?,
        ablation_diversity(seed)?,
        ablation_online_part(seed)?,
    ];
    Ok(AblationReport { schema_version: SCHEMA_VERSION, seed, passed: ablations.iter().all(|a| a.passed), ablations })
}
