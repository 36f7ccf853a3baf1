//! Synthetic calibration data and block sampling.

use ndarray::{concatenate, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CaptureBlock, CaptureDataset, CaptureError, CaptureHeader, DType};
use crate::rng::{random_unit, rng_for};
use crate::CacheKind;

/// Mixture geometry used by [`Generator::LayerDrift`].
const DRIFT_COMPONENTS: usize = 6;
const DRIFT_SPREAD: f64 = 0.03;
/// Rotation applied between adjacent layers at `drift_rate = 1`.
const DRIFT_MAX_STEP: f64 = std::f64::consts::FRAC_PI_4;

/// Offset separating per-head streams from per-lane streams.
const HEAD_STREAM_BASE: u64 = 1 << 40;
const BREAK_STREAM_BASE: u64 = 1 << 41;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Generator {
    /// Each vector is a nonnegative `sparsity`-sparse combination of `num_atoms` random unit
    /// atoms (drawn independently per layer and head) plus isotropic Gaussian noise.
    PlantedDictionary { num_atoms: usize, sparsity: usize, noise_sigma: f64 },
    /// Isotropic clusters around random unit centres, shared by every layer of a head.
    GaussianMixture { num_components: usize, spread: f64 },
    /// A tight mixture whose layers are successively rotated by `drift_rate * pi/4`. Layers at or
    /// after `break_layer` draw a fresh set of centres.
    LayerDrift {
        drift_rate: f64,
        #[serde(default)]
        break_layer: Option<u32>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_layers: u32,
    pub num_heads: u32,
    pub head_dim: u32,
    pub tokens_per_layer: usize,
    pub generator: Generator,
    pub seed: u64,
    #[serde(default = "default_kind")]
    pub kind: CacheKind,
}

fn default_kind() -> CacheKind {
    CacheKind::Key
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CaptureError> {
        let bad = |m: String| Err(CaptureError::InvalidSpec(m));
        if self.num_layers == 0 {
            return bad("layers must be positive".into());
        }
        if self.num_heads == 0 {
            return bad("heads must be positive".into());
        }
        if self.head_dim == 0 {
            return bad("head_dim must be positive".into());
        }
        if self.tokens_per_layer == 0 {
            return bad("tokens_per_layer must be positive".into());
        }
        match self.generator {
            Generator::PlantedDictionary { num_atoms, sparsity, noise_sigma } => {
                if num_atoms == 0 || sparsity == 0 {
                    return bad("num_atoms and sparsity must be positive".into());
                }
                if sparsity > num_atoms {
                    return bad(format!("sparsity {sparsity} exceeds num_atoms {num_atoms}"));
                }
                if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                    return bad("noise_sigma must be >= 0".into());
                }
            }
            Generator::GaussianMixture { num_components, spread } => {
                if num_components == 0 {
                    return bad("num_components must be positive".into());
                }
                if !(spread >= 0.0 && spread.is_finite()) {
                    return bad("spread must be >= 0".into());
                }
            }
            Generator::LayerDrift { drift_rate, break_layer } => {
                if !(0.0..=1.0).contains(&drift_rate) {
                    return bad("drift_rate must lie in [0, 1]".into());
                }
                if break_layer.is_some_and(|b| b >= self.num_layers) {
                    return bad("break_layer must be < layers".into());
                }
            }
        }
        Ok(())
    }

    fn lane_stream(&self, layer: u32, head: u32) -> u64 {
        layer as u64 * self.num_heads as u64 + head as u64
    }
}

fn random_units(rng: &mut impl Rng, dim: usize, count: usize) -> Array2<f64> {
    let mut out = Array2::zeros((dim, count));
    for mut col in out.columns_mut() {
        col.assign(&random_unit(rng, dim));
    }
    out
}

/// The atoms (`head_dim x num_atoms`, unit columns) planted in a `PlantedDictionary` lane.
pub fn planted_atoms(spec: &SyntheticSpec, layer: u32, head: u32) -> Option<Array2<f64>> {
    match spec.generator {
        Generator::PlantedDictionary { num_atoms, .. } => {
            let mut rng = rng_for(spec.seed, spec.lane_stream(layer, head));
            Some(random_units(&mut rng, spec.head_dim as usize, num_atoms))
        }
        _ => None,
    }
}

/// Rotates consecutive coordinate pairs `(2i, 2i+1)` by `angle`.
fn rotate_pairs(v: &mut [f64], angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, c) = angle.sin_cos();
    for pair in v.chunks_exact_mut(2) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = c * a - s * b;
        pair[1] = s * a + c * b;
    }
}

/// Deterministically generates a capture described by `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<CaptureDataset, CaptureError> {
    spec.validate()?;
    let dim = spec.head_dim as usize;
    let n = spec.tokens_per_layer;
    let mut blocks = Vec::with_capacity((spec.num_layers * spec.num_heads) as usize);

    for layer in 0..spec.num_layers {
        for head in 0..spec.num_heads {
            let mut vectors = Array2::<f32>::zeros((n, dim));
            match spec.generator {
                Generator::PlantedDictionary { num_atoms, sparsity, noise_sigma } => {
                    let mut rng = rng_for(spec.seed, spec.lane_stream(layer, head));
                    let atoms = random_units(&mut rng, dim, num_atoms);
                    for mut row in vectors.rows_mut() {
                        let mut acc = vec![0.0f64; dim];
                        for a in index::sample(&mut rng, num_atoms, sparsity) {
                            let c: f64 = rng.random_range(0.5..1.5);
                            for (o, w) in acc.iter_mut().zip(atoms.column(a)) {
                                *o += c * w;
                            }
                        }
                        for (o, v) in row.iter_mut().zip(acc) {
                            let noise: f64 = rng.sample(StandardNormal);
                            *o = (v + noise_sigma * noise) as f32;
                        }
                    }
                }
                Generator::GaussianMixture { num_components, spread } => {
                    let mut head_rng = rng_for(spec.seed, HEAD_STREAM_BASE + head as u64);
                    let centres = random_units(&mut head_rng, dim, num_components);
                    let mut rng = rng_for(spec.seed, spec.lane_stream(layer, head));
                    fill_mixture(&mut vectors, &centres, spread, 0.0, &mut rng);
                }
                Generator::LayerDrift { drift_rate, break_layer } => {
                    let after_break = break_layer.is_some_and(|b| layer >= b);
                    let base = if after_break { BREAK_STREAM_BASE } else { HEAD_STREAM_BASE };
                    let mut head_rng = rng_for(spec.seed, base + head as u64);
                    let centres = random_units(&mut head_rng, dim, DRIFT_COMPONENTS);
                    let mut rng = rng_for(spec.seed, spec.lane_stream(layer, head));
                    let angle = layer as f64 * drift_rate * DRIFT_MAX_STEP;
                    fill_mixture(&mut vectors, &centres, DRIFT_SPREAD, angle, &mut rng);
                }
            }
            blocks.push(CaptureBlock { layer, head, vectors });
        }
    }

    let header = CaptureHeader {
        model_name: "synthetic".into(),
        num_layers: spec.num_layers,
        num_heads: spec.num_heads,
        head_dim: spec.head_dim,
        kind: spec.kind,
        pre_rope: spec.kind == CacheKind::Key,
        dtype: DType::F32,
    };
    CaptureDataset::new(header, blocks)
}

fn fill_mixture(out: &mut Array2<f32>, centres: &Array2<f64>, spread: f64, angle: f64, rng: &mut impl Rng) {
    let k = centres.ncols();
    let mut buf = vec![0.0f64; centres.nrows()];
    for mut row in out.rows_mut() {
        let c = rng.random_range(0..k);
        for (b, &m) in buf.iter_mut().zip(centres.column(c)) {
            let noise: f64 = rng.sample(StandardNormal);
            *b = m + spread * noise;
        }
        rotate_pairs(&mut buf, angle);
        for (o, &b) in row.iter_mut().zip(&buf) {
            *o = b as f32;
        }
    }
}

/// Concatenates the `head` blocks of `layers` (in the given order) and, when there are more than
/// `max_count` rows, keeps a uniform sample without replacement in original order.
pub fn sample_vectors(
    dataset: &CaptureDataset,
    layers: &[u32],
    head: u32,
    max_count: usize,
    seed: u64,
) -> Result<Array2<f32>, CaptureError> {
    let views = layers
        .iter()
        .map(|&l| dataset.require_block(l, head).map(|b| b.vectors.view()))
        .collect::<Result<Vec<_>, _>>()?;
    let all = if views.is_empty() {
        Array2::zeros((0, dataset.head_dim()))
    } else {
        concatenate(Axis(0), &views).expect("blocks share head_dim")
    };
    if all.nrows() <= max_count {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, all.nrows(), max_count).into_vec();
    picked.sort_unstable();
    Ok(all.select(Axis(0), &picked))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted(noise: f64, sparsity: usize) -> SyntheticSpec {
        SyntheticSpec {
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            tokens_per_layer: 200,
            generator: Generator::PlantedDictionary { num_atoms: 12, sparsity, noise_sigma: noise },
            seed: 7,
            kind: CacheKind::Key,
        }
    }

    #[test]
    fn noiseless_one_sparse_vectors_are_atom_multiples() {
        let spec = planted(0.0, 1);
        let d = generate_synthetic(&spec).unwrap();
        for b in d.blocks() {
            let atoms = planted_atoms(&spec, b.layer, b.head).unwrap();
            for row in b.vectors.rows() {
                let x = row.mapv(f64::from);
                let xn = &x / x.dot(&x).sqrt();
                let best = atoms
                    .columns()
                    .into_iter()
                    .map(|a| {
                        let c = a.dot(&xn).clamp(-1.0, 1.0);
                        c.acos()
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 1e-5, "angular distance {best}");
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = planted(0.1, 3);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let mut other = spec.clone();
        other.seed = 8;
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = planted(0.0, 1);
        s.num_layers = 0;
        assert!(matches!(generate_synthetic(&s), Err(CaptureError::InvalidSpec(m)) if m.contains("layers")));
        let mut s = planted(0.0, 1);
        s.generator = Generator::LayerDrift { drift_rate: 1.5, break_layer: None };
        assert!(generate_synthetic(&s).is_err());
        let mut s = planted(-1.0, 1);
        s.generator = Generator::PlantedDictionary { num_atoms: 4, sparsity: 1, noise_sigma: -1.0 };
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn sampling_contracts() {
        let spec = planted(0.1, 2);
        let d = generate_synthetic(&spec).unwrap();
        let b0 = &d.block(0, 0).unwrap().vectors;
        let b1 = &d.block(1, 0).unwrap().vectors;

        assert_eq!(&sample_vectors(&d, &[0], 0, 1000, 1).unwrap(), b0);

        let both = sample_vectors(&d, &[0, 1], 0, 400, 1).unwrap();
        assert_eq!(both.nrows(), 400);
        assert_eq!(both.slice(ndarray::s![..200, ..]), b0.view());
        assert_eq!(both.slice(ndarray::s![200.., ..]), b1.view());

        let one = sample_vectors(&d, &[0], 0, 1, 3).unwrap();
        assert_eq!(one.nrows(), 1);
        assert!(b0.rows().into_iter().any(|r| r == one.row(0)));

        assert_eq!(sample_vectors(&d, &[0, 1], 1, 50, 9).unwrap(), sample_vectors(&d, &[0, 1], 1, 50, 9).unwrap());
        assert!(matches!(sample_vectors(&d, &[0], 5, 10, 0), Err(CaptureError::MissingBlock { layer: 0, head: 5 })));
    }

    #[test]
    fn drift_zero_layers_share_distribution_parameters() {
        let spec = SyntheticSpec {
            num_layers: 3,
            num_heads: 1,
            head_dim: 8,
            tokens_per_layer: 10,
            generator: Generator::LayerDrift { drift_rate: 0.0, break_layer: None },
            seed: 1,
            kind: CacheKind::Value,
        };
        let d = generate_synthetic(&spec).unwrap();
        assert!(!d.header().pre_rope);
        // Distinct samples, same centres: rows sit near unit-norm centres.
        for b in d.blocks() {
            for r in b.vectors.rows() {
                let n = r.dot(&r).sqrt();
                assert!((n - 1.0).abs() < 0.5);
            }
        }
        assert_ne!(d.blocks()[0].vectors, d.blocks()[1].vectors);
    }
}
