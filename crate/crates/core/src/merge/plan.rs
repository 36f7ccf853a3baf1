use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::MergeError;
use crate::CacheKind;

/// A partition of the transformer layers into contiguous groups that share one offline
/// dictionary, together with the divergence thresholds it was built under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergePlan {
    pub kind: CacheKind,
    /// Maximum pairwise divergence inside a group.
    pub delta1: f64,
    /// Maximum sum of consecutive divergences inside a group; `null` in JSON means unbounded.
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub delta2: f64,
    pub groups: Vec<Vec<u32>>,
}

fn ser_threshold<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

impl MergePlan {
    /// Every layer on its own.
    pub fn singletons(kind: CacheKind, num_layers: u32) -> Self {
        Self { kind, delta1: 0.0, delta2: 0.0, groups: (0..num_layers).map(|l| vec![l]).collect() }
    }

    /// All layers in one group.
    pub fn single_group(kind: CacheKind, num_layers: u32) -> Self {
        Self { kind, delta1: 1.0, delta2: f64::INFINITY, groups: vec![(0..num_layers).collect()] }
    }

    pub fn num_layers(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// Index of the group containing `layer`.
    pub fn group_of(&self, layer: u32) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&layer))
    }

    /// Structural checks: groups are non-empty, ascending, contiguous, disjoint and together cover
    /// `0..num_layers` in order.
    pub fn validate(&self, num_layers: u32) -> Result<(), MergeError> {
        let mut next = 0u32;
        for (i, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                return Err(MergeError::InvalidPlan(format!("group {i} is empty")));
            }
            for &l in g {
                if l != next {
                    return Err(MergeError::InvalidPlan(format!(
                        "group {i} breaks contiguous coverage at layer {l} (expected {next})"
                    )));
                }
                next += 1;
            }
        }
        if next != num_layers {
            return Err(MergeError::InvalidPlan(format!("plan covers {next} layers, model has {num_layers}")));
        }
        Ok(())
    }

    /// Re-checks both divergence constraints with `jsd(a, b)` on every group.
    pub fn check_constraints<F>(&self, mut jsd: F) -> Result<(), MergeError>
    where
        F: FnMut(u32, u32) -> Result<f64, MergeError>,
    {
        for g in &self.groups {
            let mut chain = 0.0;
            for (i, &a) in g.iter().enumerate() {
                for &b in &g[i + 1..] {
                    let d = jsd(a, b)?;
                    if d > self.delta1 {
                        return Err(MergeError::ConstraintViolated(format!(
                            "JSD({a}, {b}) = {d} exceeds delta1 = {}",
                            self.delta1
                        )));
                    }
                    if b == a + 1 {
                        chain += d;
                    }
                }
            }
            if chain > self.delta2 {
                return Err(MergeError::ConstraintViolated(format!(
                    "chain sum {chain} of group {g:?} exceeds delta2 = {}",
                    self.delta2
                )));
            }
        }
        Ok(())
    }
}
