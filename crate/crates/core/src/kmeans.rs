//! Seeded Lloyd's k-means with k-means++ initialization.
//!
//! Shared by the acoustic codebooks and the semantic codebook. Assignment uses
//! exact squared Euclidean distance with ties resolved toward the lowest index.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Keep centroid 0 fixed at the origin. Residual quantizers use this so that
    /// adding a level can never move a point further from its target.
    pub pin_zero: bool,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 25,
            pin_zero: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Array2<f32>,
    pub assignments: Vec<usize>,
    /// Lloyd iterations actually run.
    pub iterations: usize,
}

/// Squared Euclidean distance. Eight independent accumulators keep the loop
/// vectorizable while the summation order stays fixed.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for i in 0..8 {
            let d = xa[i] - xb[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        let d = a[i] - b[i];
        tail += d * d;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Index and squared distance of the nearest centroid; lowest index wins ties.
pub fn nearest_centroid(centroids: ArrayView2<'_, f32>, x: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (j, c) in centroids.outer_iter().enumerate() {
        let d = squared_distance(c.as_slice().expect("standard layout"), x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Clusters the rows of `points` into `k` groups.
pub fn fit(points: ArrayView2<'_, f32>, k: usize, params: &KMeansParams, rng: &mut impl Rng) -> Result<KMeansFit> {
    let (n, dim) = points.dim();
    if k == 0 {
        return Err(CoreError::Domain("k must be at least 1".into()));
    }
    if n < k {
        return Err(CoreError::InsufficientData {
            what: "points",
            needed: k,
            got: n,
        });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Domain("k-means input contains non-finite values".into()));
    }
    let points = points.as_standard_layout();
    let rows: Vec<&[f32]> = (0..n)
        .map(|i| &points.as_slice().expect("standard layout")[i * dim..(i + 1) * dim])
        .collect();

    let mut centroids = init_plus_plus(&rows, dim, k, params.pin_zero, rng);
    let first_free = usize::from(params.pin_zero);
    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;

    for _ in 0..params.max_iters {
        iterations += 1;
        let nearest: Vec<(usize, f32)> = rows
            .par_iter()
            .map(|x| nearest_centroid(centroids.view(), x))
            .collect();
        let changed = nearest
            .iter()
            .zip(&assignments)
            .any(|((j, _), a)| j != a);
        for (a, (j, _)) in assignments.iter_mut().zip(&nearest) {
            *a = *j;
        }
        if !changed {
            break;
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (x, &j) in rows.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(*x) {
                *s += *v as f64;
            }
        }
        let mut distances: Vec<f32> = nearest.iter().map(|(_, d)| *d).collect();
        for j in first_free..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in centroids.row_mut(j).iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = (s * inv) as f32;
                }
            } else {
                // Empty cluster: reseed at the point currently worst served.
                let far = argmax_lowest(&distances);
                centroids.row_mut(j).assign(&ndarray::ArrayView1::from(rows[far]));
                distances[far] = 0.0;
            }
        }
    }

    for (a, x) in assignments.iter_mut().zip(&rows) {
        *a = nearest_centroid(centroids.view(), x).0;
    }
    separate_duplicates(&mut centroids, first_free);
    Ok(KMeansFit {
        centroids,
        assignments,
        iterations,
    })
}

fn argmax_lowest(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn init_plus_plus(rows: &[&[f32]], dim: usize, k: usize, pin_zero: bool, rng: &mut impl Rng) -> Array2<f32> {
    let n = rows.len();
    let mut centroids = Array2::<f32>::zeros((k, dim));
    let mut start = 0;
    if !pin_zero {
        let first = rng.random_range(0..n);
        centroids.row_mut(0).assign(&ndarray::ArrayView1::from(rows[first]));
    }
    // With a pinned origin, row 0 is already zero and seeds the D^2 weights.
    let mut min_dist: Vec<f64> = rows
        .iter()
        .map(|x| squared_distance(x, centroids.row(0).as_slice().unwrap()) as f64)
        .collect();
    start += 1;
    for j in start..k {
        let total: f64 = min_dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in min_dist.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(j).assign(&ndarray::ArrayView1::from(rows[pick]));
        let c = centroids.row(j).to_owned();
        let c = c.as_slice().unwrap();
        for (m, x) in min_dist.iter_mut().zip(rows) {
            let d = squared_distance(x, c) as f64;
            if d < *m {
                *m = d;
            }
        }
    }
    centroids
}

/// Degenerate inputs (fewer distinct points than clusters) leave coincident
/// centroids; nudge later copies so every code stays distinct.
fn separate_duplicates(centroids: &mut Array2<f32>, first_free: usize) {
    let (k, dim) = centroids.dim();
    for j in first_free.max(1)..k {
        let mut bump = 0usize;
        while (0..j).any(|i| centroids.row(i) == centroids.row(j)) {
            bump += 1;
            let axis = (j + bump) % dim;
            let v = centroids[[j, axis]];
            centroids[[j, axis]] = v + 1e-6 * (1.0 + v.abs()) * (j as f32);
        }
    }
}
