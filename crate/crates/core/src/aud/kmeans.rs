//! K-means with k-means++ seeding and Lloyd iterations.
//!
//! The assignment step runs in parallel over fixed-size chunks of rows; the
//! per-chunk partial sums are reduced in chunk order, so the fitted
//! centroids are bit-identical whatever the number of worker threads.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AudError, Codebook};
use crate::rng::{substream, tag};

const CHUNK_ROWS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Convergence threshold on the largest centroid shift (Euclidean).
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 50, seed: 0, max_iters: 300, tol: 1e-4 }
    }
}

/// A fitted codebook with its training trace.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Cluster index of every training row under the final centroids.
    pub assignments: Vec<u32>,
    /// Inertia after each assignment step, first entry for the seeding.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one assignment step")
    }
}

struct Partial {
    assignments: Vec<u32>,
    distances: Vec<f64>,
    sums: Vec<f64>,
    counts: Vec<usize>,
    inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub(crate) fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(centroid, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(data: &[f64], dim: usize, centroids: &[f64], k: usize) -> Vec<Partial> {
    data.par_chunks(CHUNK_ROWS * dim)
        .map(|chunk| {
            let rows = chunk.len() / dim;
            let mut p = Partial {
                assignments: Vec::with_capacity(rows),
                distances: Vec::with_capacity(rows),
                sums: vec![0.0; k * dim],
                counts: vec![0; k],
                inertia: 0.0,
            };
            for x in chunk.chunks_exact(dim) {
                let (c, d) = nearest(centroids, dim, x);
                p.assignments.push(c as u32);
                p.distances.push(d);
                p.counts[c] += 1;
                for (s, v) in p.sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *s += v;
                }
                p.inertia += d;
            }
            p
        })
        .collect()
}

fn kmeans_plus_plus(data: &[f64], n: usize, dim: usize, k: usize, seed: u64) -> Vec<f64> {
    let mut rng = substream(seed, tag::KMEANS, 0);
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = data.par_chunks(dim).map(|x| sq_dist(x, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let new = data[pick * dim..(pick + 1) * dim].to_vec();
        d2.par_iter_mut().zip(data.par_chunks(dim)).for_each(|(d, x)| {
            let nd = sq_dist(x, &new);
            if nd < *d {
                *d = nd;
            }
        });
        centroids.extend_from_slice(&new);
    }
    centroids
}

/// Fits `config.k` centroids to the rows of `frames`.
pub fn kmeans_fit(frames: ArrayView2<'_, f32>, config: &KMeansConfig) -> Result<KMeansFit, AudError> {
    let (n, dim) = frames.dim();
    let k = config.k;
    if k == 0 {
        return Err(AudError::InvalidConfig("k must be >= 1".into()));
    }
    if n < k {
        return Err(AudError::TooFewPoints { n, k });
    }
    if !(config.tol >= 0.0) {
        return Err(AudError::InvalidConfig("tol must be >= 0".into()));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(AudError::NonFinite);
    }
    let data: Vec<f64> = frames.iter().map(|&v| f64::from(v)).collect();

    let mut centroids = kmeans_plus_plus(&data, n, dim, k, config.seed);
    let mut inertia_history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut assignments;
    loop {
        let partials = assign(&data, dim, &centroids, k);
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        let mut inertia = 0.0;
        assignments = Vec::with_capacity(n);
        let mut distances = Vec::with_capacity(n);
        for p in partials {
            for (s, v) in sums.iter_mut().zip(&p.sums) {
                *s += v;
            }
            for (c, v) in counts.iter_mut().zip(&p.counts) {
                *c += v;
            }
            inertia += p.inertia;
            assignments.extend(p.assignments);
            distances.extend(p.distances);
        }
        if let Some(&prev) = inertia_history.last() {
            debug_assert!(
                inertia <= prev * (1.0 + 1e-12) + 1e-12,
                "inertia increased from {prev} to {inertia}"
            );
        }
        inertia_history.push(inertia);
        if converged || iterations >= config.max_iters {
            break;
        }

        reseed_empty(&data, dim, &mut assignments, &mut distances, &mut sums, &mut counts);

        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let new: Vec<f64> = sums[c * dim..(c + 1) * dim].iter().map(|s| s * inv).collect();
            shift = shift.max(sq_dist(&new, &centroids[c * dim..(c + 1) * dim]).sqrt());
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&new);
        }
        iterations += 1;
        // One more assignment pass follows so that the returned assignments
        // and inertia correspond to the final centroids.
        converged = shift < config.tol;
    }

    let centroids_f32 = Array2::from_shape_vec((k, dim), centroids.iter().map(|&v| v as f32).collect())
        .expect("shape");
    Ok(KMeansFit {
        codebook: Codebook::new(centroids_f32, false, Some(config.seed))?,
        assignments,
        inertia_history,
        iterations,
        converged,
    })
}

/// Moves each empty cluster onto the point farthest from its own centroid.
fn reseed_empty(
    data: &[f64],
    dim: usize,
    assignments: &mut [u32],
    distances: &mut [f64],
    sums: &mut [f64],
    counts: &mut [usize],
) {
    let empty: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == 0).collect();
    for c in empty {
        let far = (0..distances.len())
            .filter(|&i| counts[assignments[i] as usize] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if distances[b] >= distances[i] => Some(b),
                _ => Some(i),
            });
        let Some(i) = far else { return };
        if distances[i] == 0.0 {
            return;
        }
        let old = assignments[i] as usize;
        let x = &data[i * dim..(i + 1) * dim];
        for j in 0..dim {
            sums[old * dim + j] -= x[j];
            sums[c * dim + j] = x[j];
        }
        counts[old] -= 1;
        counts[c] = 1;
        assignments[i] = c as u32;
        distances[i] = 0.0;
    }
}
