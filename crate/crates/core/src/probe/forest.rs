//! Random forest of CART trees on Gini impurity, used to rank feature
//! dimensions by how much they help predict the speaker.

use ndarray::ArrayView2;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::rng::{derive_seed, substream, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Candidate dimensions per split; `round(sqrt(d))` when unset.
    pub features_per_split: Option<usize>,
    pub min_samples_leaf: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: 12, features_per_split: None, min_samples_leaf: 5, bootstrap: true, seed: 0 }
    }
}

impl ForestConfig {
    pub fn features_per_split_for(&self, dim: usize) -> usize {
        self.features_per_split.unwrap_or_else(|| ((dim as f64).sqrt().round() as usize).max(1))
    }

    fn validate(&self, dim: usize) -> Result<(), ProbeError> {
        let m = self.features_per_split_for(dim);
        if self.n_trees == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 || m == 0 {
            return Err(ProbeError::InvalidConfig("forest parameters must be positive".into()));
        }
        if m > dim {
            return Err(ProbeError::InvalidConfig(format!("features_per_split {m} exceeds dimension {dim}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { class: u32 },
    /// Samples with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub seed: u64,
    /// Weighted Gini decrease per dimension, unnormalized.
    pub importance: Vec<f64>,
}

impl Tree {
    pub fn predict(&self, frame: &[f32]) -> u32 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { class } => return *class,
                Node::Split { feature, threshold, left, right } => {
                    i = if f64::from(frame[*feature]) <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// Training rows drawn for a tree: `n` draws with replacement under
/// bootstrap, otherwise all rows in order.
pub fn bootstrap_indices(tree_seed: u64, n: usize, bootstrap: bool) -> Vec<usize> {
    if !bootstrap {
        return (0..n).collect();
    }
    let mut rng = substream(tree_seed, tag::TREE, 0);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_classes: usize,
    pub dim: usize,
}

impl Forest {
    /// Majority vote; ties go to the lowest class.
    pub fn predict(&self, frame: &[f32]) -> u32 {
        let mut votes = vec![0usize; self.n_classes];
        for t in &self.trees {
            votes[t.predict(frame) as usize] += 1;
        }
        let mut best = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        best as u32
    }

    /// Total weighted Gini decrease per dimension over all trees, summing to
    /// 1. Uniform when no tree made a split.
    pub fn importance(&self) -> Vec<f64> {
        let mut total = vec![0.0; self.dim];
        for t in &self.trees {
            for (a, b) in total.iter_mut().zip(&t.importance) {
                *a += b;
            }
        }
        let sum: f64 = total.iter().sum();
        if sum > 0.0 {
            total.iter_mut().for_each(|v| *v /= sum);
        } else {
            total.iter_mut().for_each(|v| *v = 1.0 / self.dim as f64);
        }
        total
    }
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize]) -> u32 {
    let mut best = 0;
    for (c, &v) in counts.iter().enumerate() {
        if v > counts[best] {
            best = c;
        }
    }
    best as u32
}

struct Builder<'a> {
    data: &'a [f32],
    dim: usize,
    labels: &'a [u32],
    n_classes: usize,
    max_depth: usize,
    min_leaf: usize,
    m: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    importance: Vec<f64>,
}

struct BestSplit {
    decrease: f64,
    feature: usize,
    threshold: f64,
    n_left: usize,
}

impl Builder<'_> {
    fn value(&self, row: usize, feature: usize) -> f32 {
        self.data[row * self.dim + feature]
    }

    fn build(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let mut counts = vec![0usize; self.n_classes];
        for &r in rows.iter() {
            counts[self.labels[r] as usize] += 1;
        }
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { class: majority(&counts) });
        let n = rows.len();
        let impurity = gini(&counts, n);
        if depth >= self.max_depth || n < 2 * self.min_leaf || impurity == 0.0 {
            return id;
        }
        let Some(best) = self.best_split(rows, &counts, impurity) else {
            return id;
        };
        self.importance[best.feature] += best.decrease;
        let f = best.feature;
        rows.sort_by(|&a, &b| self.value(a, f).total_cmp(&self.value(b, f)).then(a.cmp(&b)));
        let (left_rows, right_rows) = rows.split_at_mut(best.n_left);
        let left = self.build(left_rows, depth + 1);
        let right = self.build(right_rows, depth + 1);
        self.nodes[id] = Node::Split { feature: f, threshold: best.threshold, left, right };
        id
    }

    fn best_split(&mut self, rows: &[usize], counts: &[usize], impurity: f64) -> Option<BestSplit> {
        let n = rows.len();
        let features = sample(&mut self.rng, self.dim, self.m).into_vec();
        let mut best: Option<BestSplit> = None;
        let mut sorted: Vec<(f32, u32)> = Vec::with_capacity(n);
        for f in features {
            sorted.clear();
            sorted.extend(rows.iter().map(|&r| (self.value(r, f), self.labels[r])));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0usize; self.n_classes];
            let mut right = counts.to_vec();
            for i in 0..n - 1 {
                let c = sorted[i].1 as usize;
                left[c] += 1;
                right[c] -= 1;
                let n_left = i + 1;
                if sorted[i].0 == sorted[i + 1].0 || n_left < self.min_leaf || n - n_left < self.min_leaf {
                    continue;
                }
                let decrease = n as f64 * impurity
                    - n_left as f64 * gini(&left, n_left)
                    - (n - n_left) as f64 * gini(&right, n - n_left);
                if decrease > 1e-12 && best.as_ref().is_none_or(|b| decrease > b.decrease) {
                    let threshold = 0.5 * (f64::from(sorted[i].0) + f64::from(sorted[i + 1].0));
                    best = Some(BestSplit { decrease, feature: f, threshold, n_left });
                }
            }
        }
        best
    }
}

/// Fits one tree on the given training rows.
pub fn train_tree(
    frames: ArrayView2<'_, f32>,
    labels: &[u32],
    n_classes: usize,
    config: &ForestConfig,
    tree_seed: u64,
) -> Result<Tree, ProbeError> {
    let dim = frames.ncols();
    config.validate(dim)?;
    let data = frames.as_standard_layout();
    let mut rows = bootstrap_indices(tree_seed, frames.nrows(), config.bootstrap);
    let mut b = Builder {
        data: data.as_slice().expect("standard layout"),
        dim,
        labels,
        n_classes,
        max_depth: config.max_depth,
        min_leaf: config.min_samples_leaf,
        m: config.features_per_split_for(dim),
        rng: substream(tree_seed, tag::TREE, 1),
        nodes: Vec::new(),
        importance: vec![0.0; dim],
    };
    b.build(&mut rows, 0);
    Ok(Tree { nodes: b.nodes, seed: tree_seed, importance: b.importance })
}

pub fn train_forest(
    frames: ArrayView2<'_, f32>,
    labels: &[u32],
    n_classes: usize,
    config: &ForestConfig,
) -> Result<Forest, ProbeError> {
    let (n, dim) = frames.dim();
    if n != labels.len() {
        return Err(ProbeError::LengthMismatch { frames: n, labels: labels.len() });
    }
    if n == 0 {
        return Err(ProbeError::Empty);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(ProbeError::LabelOutOfRange { label: bad, n_classes });
    }
    if labels.iter().any(|&l| l != labels[0]) {
        config.validate(dim)?;
    } else {
        return Err(ProbeError::SingleClass);
    }
    let data = frames.as_standard_layout();
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| train_tree(data.view(), labels, n_classes, config, derive_seed(config.seed, tag::TREE, t as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Forest { trees, n_classes, dim })
}

/// Dimensions ranked by speaker importance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRanking {
    pub importance: Vec<f64>,
    /// Dimensions by descending importance, ties by dimension index.
    pub order: Vec<usize>,
}

impl ImportanceRanking {
    pub fn from_importance(importance: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..importance.len()).collect();
        order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
        Self { importance, order }
    }

    /// The `n_keep` least important dimensions, in ascending index order.
    pub fn keep(&self, n_keep: usize) -> Result<Vec<usize>, ProbeError> {
        let d = self.order.len();
        if n_keep == 0 || n_keep > d {
            return Err(ProbeError::KeepOutOfRange { n_keep, dim: d });
        }
        let mut kept = self.order[d - n_keep..].to_vec();
        kept.sort_unstable();
        Ok(kept)
    }
}

pub fn forest_importance(
    frames: ArrayView2<'_, f32>,
    labels: &[u32],
    n_classes: usize,
    config: &ForestConfig,
) -> Result<ImportanceRanking, ProbeError> {
    let forest = train_forest(frames, labels, n_classes, config)?;
    Ok(ImportanceRanking::from_importance(forest.importance()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn keep_rule() {
        let r = ImportanceRanking { importance: vec![0.3, 0.1, 0.4, 0.2], order: vec![2, 0, 3, 1] };
        assert_eq!(r.keep(2).unwrap(), vec![1, 3]);
        assert_eq!(r.keep(4).unwrap(), vec![0, 1, 2, 3]);
        assert!(r.keep(0).is_err());
        assert!(r.keep(5).is_err());
    }

    #[test]
    fn ranking_ties_by_index() {
        let r = ImportanceRanking::from_importance(vec![0.25, 0.5, 0.25]);
        assert_eq!(r.order, vec![1, 0, 2]);
    }

    #[test]
    fn separable_single_feature() {
        let x = Array2::from_shape_fn((40, 2), |(i, j)| if j == 0 { (i / 20) as f32 } else { (i % 7) as f32 });
        let y: Vec<u32> = (0..40).map(|i| (i / 20) as u32).collect();
        let cfg = ForestConfig { n_trees: 10, features_per_split: Some(2), ..Default::default() };
        let forest = train_forest(x.view(), &y, 2, &cfg).unwrap();
        let imp = forest.importance();
        assert!(imp[0] > 0.99, "{imp:?}");
        for i in 0..40 {
            assert_eq!(forest.predict(x.row(i).as_slice().unwrap()), y[i]);
        }
    }

    #[test]
    fn single_class_rejected() {
        let x = Array2::<f32>::zeros((10, 2));
        assert!(matches!(train_forest(x.view(), &[0; 10], 1, &ForestConfig::default()), Err(ProbeError::SingleClass)));
    }
}
