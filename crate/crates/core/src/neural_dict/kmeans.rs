//! k-means++ seeded Lloyd iterations used to initialise the dictionary.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::rng::random_unit;

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding. Returns fewer than `k` centres when the data has fewer distinct points.
fn seed_centres(x: ArrayView2<f64>, k: usize, rng: &mut impl Rng) -> Vec<Array1<f64>> {
    let n = x.nrows();
    let mut centres = vec![x.row(rng.random_range(0..n)).to_owned()];
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, centres[0].view())).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
                pick = i;
            }
        }
        let c = x.row(pick).to_owned();
        for (dist, r) in d2.iter_mut().zip(x.rows()) {
            *dist = dist.min(sq_dist(r, c.view()));
        }
        centres.push(c);
    }
    centres
}

fn nearest(row: ndarray::ArrayView1<f64>, centres: &Array2<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centres.columns().into_iter().enumerate() {
        let d = sq_dist(row, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Cluster centres of the rows of `x` as columns of a `d x k` matrix (not normalised). When the
/// data has fewer than `k` distinct rows, the missing columns are random unit vectors.
pub(crate) fn kmeans_centres(x: ArrayView2<f64>, k: usize, iters: usize, rng: &mut impl Rng) -> Array2<f64> {
    let d = x.ncols();
    let seeds = seed_centres(x, k, rng);
    let found = seeds.len();
    let mut centres = Array2::zeros((d, found));
    for (j, c) in seeds.iter().enumerate() {
        centres.column_mut(j).assign(c);
    }

    for _ in 0..iters {
        let assign: Vec<usize> = (0..x.nrows()).into_par_iter().map(|i| nearest(x.row(i), &centres)).collect();
        let mut sums = Array2::<f64>::zeros((d, found));
        let mut counts = vec![0usize; found];
        for (row, &a) in x.rows().into_iter().zip(&assign) {
            sums.column_mut(a).scaled_add(1.0, &row);
            counts[a] += 1;
        }
        let mut moved = false;
        for (j, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = sums.column(j).mapv(|v| v / count as f64);
                if mean != centres.column(j) {
                    moved = true;
                    centres.column_mut(j).assign(&mean);
                }
            }
        }
        if !moved {
            break;
        }
    }

    if found < k {
        let extra: Vec<Array1<f64>> = (found..k).map(|_| random_unit(rng, d)).collect();
        let views: Vec<_> = extra.iter().map(|v| v.view().insert_axis(Axis(1))).collect();
        let mut all = vec![centres.view()];
        all.extend(views);
        centres = ndarray::concatenate(Axis(1), &all).expect("same row count");
    }
    centres
}
