//! Clustering quality against reference labels: ARI, AMI, homogeneity and
//! completeness, all computed from the contingency table.
//!
//! Entropies use natural logarithms. AMI uses the arithmetic mean of the two
//! entropies as normalizer and the exact hypergeometric expectation of the
//! mutual information.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::AudError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetricsReport {
    pub ari: f64,
    pub ami: f64,
    pub homogeneity: f64,
    pub completeness: f64,
    pub n_frames: usize,
    pub n_classes: usize,
    pub n_clusters: usize,
}

/// Dense contingency table between two labelings.
#[derive(Debug, Clone)]
pub struct Contingency {
    pub n: usize,
    /// `table[i * n_clusters + j]`: items with class i and cluster j.
    pub table: Vec<usize>,
    pub class_sums: Vec<usize>,
    pub cluster_sums: Vec<usize>,
}

fn dense_ids<T: Hash + Eq>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut map: HashMap<&T, usize> = HashMap::new();
    let ids = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

impl Contingency {
    pub fn new<A: Hash + Eq, B: Hash + Eq>(classes: &[A], clusters: &[B]) -> Result<Self, AudError> {
        if classes.len() != clusters.len() {
            return Err(AudError::LengthMismatch { left: classes.len(), right: clusters.len() });
        }
        let (ci, nc) = dense_ids(classes);
        let (ki, nk) = dense_ids(clusters);
        let mut table = vec![0; nc * nk];
        let mut class_sums = vec![0; nc];
        let mut cluster_sums = vec![0; nk];
        for (&c, &k) in ci.iter().zip(&ki) {
            table[c * nk + k] += 1;
            class_sums[c] += 1;
            cluster_sums[k] += 1;
        }
        Ok(Self { n: classes.len(), table, class_sums, cluster_sums })
    }

    fn nonzero(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let nk = self.cluster_sums.len();
        self.table.iter().enumerate().filter(|(_, &v)| v > 0).map(move |(idx, &v)| (idx / nk, idx % nk, v))
    }
}

fn comb2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

fn entropy(sums: &[usize], n: usize) -> f64 {
    let n = n as f64;
    sums.iter().filter(|&&c| c > 0).map(|&c| {
        let p = c as f64 / n;
        -p * p.ln()
    }).sum()
}

/// Adjusted Rand index by pair counting on the contingency table.
pub fn adjusted_rand_index(c: &Contingency) -> f64 {
    let index: f64 = c.table.iter().map(|&v| comb2(v)).sum();
    let a: f64 = c.class_sums.iter().map(|&v| comb2(v)).sum();
    let b: f64 = c.cluster_sums.iter().map(|&v| comb2(v)).sum();
    let total = comb2(c.n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = a * b / total;
    let max = 0.5 * (a + b);
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}

pub fn mutual_information(c: &Contingency) -> f64 {
    let n = c.n as f64;
    c.nonzero()
        .map(|(i, j, v)| {
            let v = v as f64;
            v / n * (n * v / (c.class_sums[i] as f64 * c.cluster_sums[j] as f64)).ln()
        })
        .sum()
}

/// `ln k!` for k = 0..=n.
fn log_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Expected mutual information under the hypergeometric model of random
/// labelings with the observed marginals.
pub fn expected_mutual_information(c: &Contingency) -> f64 {
    let n = c.n;
    let lf = log_factorials(n);
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in &c.class_sums {
        for &b in &c.cluster_sums {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            let fixed = lf[a] + lf[b] + lf[n - a] + lf[n - b] - lf[n];
            for nij in lo..=hi {
                let p = (fixed - lf[nij] - lf[a - nij] - lf[b - nij] - lf[n + nij - a - b]).exp();
                let v = nij as f64;
                emi += v / nf * (nf * v / (a as f64 * b as f64)).ln() * p;
            }
        }
    }
    emi
}

pub fn adjusted_mutual_information(c: &Contingency) -> f64 {
    let (nc, nk) = (c.class_sums.len(), c.cluster_sums.len());
    if (nc == 1 && nk == 1) || (nc == 0 && nk == 0) {
        return 1.0;
    }
    let mi = mutual_information(c);
    let emi = expected_mutual_information(c);
    let normalizer = 0.5 * (entropy(&c.class_sums, c.n) + entropy(&c.cluster_sums, c.n));
    let denominator = normalizer - emi;
    // Chance agreement equals the normalizer only when every relabeling
    // agrees perfectly (both labelings all singletons).
    if denominator.abs() <= 1e-12 * normalizer.max(1.0) {
        return 1.0;
    }
    (mi - emi) / denominator
}

/// Homogeneity and completeness.
pub fn homogeneity_completeness(c: &Contingency) -> (f64, f64) {
    let h_class = entropy(&c.class_sums, c.n);
    let h_cluster = entropy(&c.cluster_sums, c.n);
    let mi = mutual_information(c);
    // H(class | cluster) = H(class) - MI.
    let homogeneity = if h_class == 0.0 { 1.0 } else { (mi / h_class).clamp(0.0, 1.0) };
    let completeness = if h_cluster == 0.0 { 1.0 } else { (mi / h_cluster).clamp(0.0, 1.0) };
    (homogeneity, completeness)
}

/// All four metrics for reference `classes` and predicted `clusters`.
pub fn clustering_metrics<A: Hash + Eq, B: Hash + Eq>(
    classes: &[A],
    clusters: &[B],
) -> Result<ClusterMetricsReport, AudError> {
    if classes.is_empty() && clusters.is_empty() {
        return Err(AudError::Empty);
    }
    let c = Contingency::new(classes, clusters)?;
    if c.n < 2 {
        return Err(AudError::InvalidConfig("clustering metrics need at least 2 frames".into()));
    }
    let (homogeneity, completeness) = homogeneity_completeness(&c);
    Ok(ClusterMetricsReport {
        ari: adjusted_rand_index(&c),
        ami: adjusted_mutual_information(&c),
        homogeneity,
        completeness,
        n_frames: c.n,
        n_classes: c.class_sums.len(),
        n_clusters: c.cluster_sums.len(),
    })
}
