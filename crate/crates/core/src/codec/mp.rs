//! Plain matching pursuit over a column dictionary.

use ndarray::{Array1, ArrayView1, ArrayView2, LinalgScalar};

/// Float types the pursuit runs in. Codec paths use `f32`; training and gradient checks use
/// `f64`.
pub trait Scalar: LinalgScalar + PartialOrd + Send + Sync + std::fmt::Debug {
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// One pursuit iteration: the chosen atom, its signed coefficient and the residual norm after
/// removing it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpStep<T> {
    pub index: usize,
    pub coeff: T,
    pub residual_norm: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpOutcome<T> {
    /// Distinct atoms in first-selection order; re-selections accumulate into the same entry.
    pub entries: Vec<(usize, T)>,
    pub steps: Vec<MpStep<T>>,
    pub residual: Array1<T>,
}

impl<T: Scalar> MpOutcome<T> {
    pub fn residual_norm(&self) -> T {
        self.residual.dot(&self.residual).sqrt()
    }
}

/// Runs up to `s` iterations of matching pursuit of `x` against the unit columns of `atoms`
/// (`dim x N`).
///
/// Each iteration picks the atom with the largest `|R . d|` (lowest index on ties), takes the
/// signed inner product as coefficient and subtracts its projection. Stops early once the
/// residual is orthogonal to every atom, which includes the zero residual.
pub fn matching_pursuit<T: Scalar>(x: ArrayView1<T>, atoms: ArrayView2<T>, s: usize) -> MpOutcome<T> {
    debug_assert_eq!(x.len(), atoms.nrows());
    let mut residual = x.to_owned();
    let mut entries: Vec<(usize, T)> = Vec::with_capacity(s);
    let mut steps = Vec::with_capacity(s);

    for _ in 0..s {
        let corr = atoms.t().dot(&residual);
        let mut best = 0usize;
        let mut best_abs = T::zero();
        for (n, &c) in corr.iter().enumerate() {
            let a = c.abs();
            if a > best_abs {
                best = n;
                best_abs = a;
            }
        }
        if best_abs == T::zero() {
            break;
        }
        let coeff = corr[best];
        residual.scaled_add(T::zero() - coeff, &atoms.column(best));
        match entries.iter_mut().find(|(i, _)| *i == best) {
            Some((_, c)) => *c = *c + coeff,
            None => entries.push((best, coeff)),
        }
        steps.push(MpStep { index: best, coeff, residual_norm: residual.dot(&residual).sqrt() });
    }

    MpOutcome { entries, steps, residual }
}
