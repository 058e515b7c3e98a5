//! Slow, direct reference implementations for cross-checking the toolkit.
//!
//! Nothing here shares code with `spknorm`: every quantity is recomputed
//! from its definition (path enumeration, pair enumeration, explicit
//! binomial sums, quadratic threshold sweeps).

use std::collections::BTreeMap;

/// `1 - cos(a, b)`, 0 for two zero vectors, 1 for one zero vector.
pub fn cosine_cost(a: &[f32], b: &[f32]) -> f64 {
    let na: f64 = a.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
            (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
        }
    }
}

/// Every monotone path from (0, 0) to (n-1, m-1) with steps (1,0), (0,1),
/// (1,1), as its list of cells.
pub fn all_paths(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    fn walk(i: usize, j: usize, n: usize, m: usize, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        cur.push((i, j));
        if i == n - 1 && j == m - 1 {
            out.push(cur.clone());
        } else {
            if i + 1 < n {
                walk(i + 1, j, n, m, cur, out);
            }
            if j + 1 < m {
                walk(i, j + 1, n, m, cur, out);
            }
            if i + 1 < n && j + 1 < m {
                walk(i + 1, j + 1, n, m, cur, out);
            }
        }
        cur.pop();
    }
    let mut out = Vec::new();
    if n > 0 && m > 0 {
        walk(0, 0, n, m, &mut Vec::new(), &mut out);
    }
    out
}

/// DTW distance by enumerating all alignment paths: the path with the
/// smallest summed cost (fewest cells among ties) gives sum / cells.
pub fn dtw_bruteforce(x: &[Vec<f32>], y: &[Vec<f32>]) -> f64 {
    let mut best: Option<(f64, usize)> = None;
    for path in all_paths(x.len(), y.len()) {
        let sum: f64 = path.iter().map(|&(i, j)| cosine_cost(&x[i], &y[j])).sum();
        let len = path.len();
        best = match best {
            Some((s, l)) if s < sum || (s == sum && l <= len) => Some((s, l)),
            _ => Some((sum, len)),
        };
    }
    let (s, l) = best.expect("non-empty sequences");
    s / l as f64
}

/// ARI from explicit counts over all item pairs (Hubert-Arabie form).
pub fn ari_pairs(classes: &[u32], clusters: &[u32]) -> f64 {
    let n = classes.len();
    let (mut ss, mut sd, mut ds, mut dd) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            match (classes[i] == classes[j], clusters[i] == clusters[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    let denom = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
    if denom == 0.0 {
        return 1.0;
    }
    2.0 * (ss * dd - sd * ds) / denom
}

fn counts(labels: &[u32]) -> BTreeMap<u32, usize> {
    let mut m = BTreeMap::new();
    for &l in labels {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

fn joint(a: &[u32], b: &[u32]) -> BTreeMap<(u32, u32), usize> {
    let mut m = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *m.entry((x, y)).or_insert(0) += 1;
    }
    m
}

/// Shannon entropy (nats) of a labeling.
pub fn entropy(labels: &[u32]) -> f64 {
    let n = labels.len() as f64;
    counts(labels).values().map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// `H(a | b)` from the joint and the marginal of `b`.
pub fn conditional_entropy(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len() as f64;
    let mb = counts(b);
    joint(a, b)
        .iter()
        .map(|(&(_, y), &c)| {
            let p_xy = c as f64 / n;
            let p_y = mb[&y] as f64 / n;
            -p_xy * (p_xy / p_y).ln()
        })
        .sum()
}

/// `I(a; b) = H(a) - H(a | b)`.
pub fn mutual_information(a: &[u32], b: &[u32]) -> f64 {
    entropy(a) - conditional_entropy(a, b)
}

/// Exact binomial coefficient; fine for the small n used here.
pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * u128::from(n - i) / u128::from(i + 1);
    }
    r
}

/// Expected mutual information over random labelings with the observed
/// marginals: explicit hypergeometric sum with integer binomials.
pub fn expected_mi(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len() as u64;
    let nf = n as f64;
    let ma = counts(a);
    let mb = counts(b);
    let mut emi = 0.0;
    for &ai in ma.values() {
        for &bj in mb.values() {
            let (ai, bj) = (ai as u64, bj as u64);
            let total = binomial(n, bj) as f64;
            for nij in 1..=ai.min(bj) {
                if ai + bj > n + nij {
                    continue;
                }
                let ways = binomial(ai, nij) * binomial(n - ai, bj - nij);
                if ways == 0 {
                    continue;
                }
                let p = ways as f64 / total;
                let v = nij as f64;
                emi += p * v / nf * (nf * v / (ai as f64 * bj as f64)).ln();
            }
        }
    }
    emi
}

fn n_distinct(labels: &[u32]) -> usize {
    counts(labels).len()
}

/// AMI with arithmetic-mean normalizer. Labelings that agree perfectly under
/// every relabeling (both a single cluster, or both all singletons) score 1.
pub fn ami(classes: &[u32], clusters: &[u32]) -> f64 {
    let n = classes.len();
    let (nc, nk) = (n_distinct(classes), n_distinct(clusters));
    if (nc == 1 && nk == 1) || (nc == n && nk == n) {
        return 1.0;
    }
    let mi = mutual_information(classes, clusters);
    let emi = expected_mi(classes, clusters);
    let mean_h = 0.5 * (entropy(classes) + entropy(clusters));
    (mi - emi) / (mean_h - emi)
}

/// `1 - H(class | cluster) / H(class)`, 1 when `H(class) = 0`.
pub fn homogeneity(classes: &[u32], clusters: &[u32]) -> f64 {
    let h = entropy(classes);
    if h == 0.0 {
        1.0
    } else {
        1.0 - conditional_entropy(classes, clusters) / h
    }
}

/// `1 - H(cluster | class) / H(cluster)`, 1 when `H(cluster) = 0`.
pub fn completeness(classes: &[u32], clusters: &[u32]) -> f64 {
    homogeneity(clusters, classes)
}

/// EER by a quadratic sweep. Thresholds: -inf, midpoints of consecutive
/// distinct scores, +inf. Each threshold recounts every score; the first
/// threshold minimizing |FRR - FAR| (compared as exact rationals) wins.
/// Returns `(eer, threshold)`.
pub fn eer_sweep(scores: &[f64], is_target: &[bool]) -> (f64, f64) {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    for w in distinct.windows(2) {
        thresholds.push(0.5 * (w[0] + w[1]));
    }
    thresholds.push(f64::INFINITY);
    let n_t = is_target.iter().filter(|&&t| t).count() as i128;
    let n_i = is_target.len() as i128 - n_t;
    let mut best: Option<(i128, f64, i128, i128)> = None;
    for &t in &thresholds {
        let mut frr = 0i128;
        let mut far = 0i128;
        for (&s, &tgt) in scores.iter().zip(is_target) {
            if tgt && s < t {
                frr += 1;
            }
            if !tgt && s >= t {
                far += 1;
            }
        }
        let gap = (frr * n_i - far * n_t).abs();
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, t, frr, far));
        }
    }
    let (_, t, frr, far) = best.expect("at least two thresholds");
    (0.5 * (frr as f64 / n_t as f64 + far as f64 / n_i as f64), t)
}

/// Average ranks by counting: `1 + #less + (#equal - 1) / 2`.
pub fn count_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Pearson correlation, two-pass.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

/// Spearman correlation: rank by counting, then Pearson.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&count_ranks(x), &count_ranks(y))
}
