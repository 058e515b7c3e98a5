//! Similarity judgments: cosine similarity of pooled utterance vectors,
//! compared with human scores by Spearman rank correlation.

use std::collections::HashMap;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SimiItem, SlmError};
use crate::corpus::FeatureArchive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Min,
    Mean,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min" => Ok(Pooling::Min),
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(format!("unknown pooling `{other}`")),
        }
    }
}

/// Source of one fixed-size vector per utterance.
pub trait PooledRepr: Sync {
    fn pooled(&self, utt_id: &str) -> Option<Array1<f64>>;
}

/// Unit count vectors of width K.
pub struct UnitCountRepr<'a> {
    pub sequences: &'a HashMap<String, Vec<u32>>,
    pub k: usize,
}

impl PooledRepr for UnitCountRepr<'_> {
    fn pooled(&self, utt_id: &str) -> Option<Array1<f64>> {
        let units = self.sequences.get(utt_id)?;
        let mut v = Array1::zeros(self.k);
        for &u in units {
            if (u as usize) < self.k {
                v[u as usize] += 1.0;
            }
        }
        Some(v)
    }
}

/// Per-frame vectors from an archive, pooled over time.
pub struct FramePoolRepr<'a> {
    pub archive: &'a FeatureArchive,
    pub pooling: Pooling,
}

impl PooledRepr for FramePoolRepr<'_> {
    fn pooled(&self, utt_id: &str) -> Option<Array1<f64>> {
        let utt = self.archive.get(utt_id)?;
        let frames = utt.frames.mapv(f64::from);
        let axis = ndarray::Axis(0);
        Some(match self.pooling {
            Pooling::Min => frames.fold_axis(axis, f64::INFINITY, |a, &b| a.min(b)),
            Pooling::Max => frames.fold_axis(axis, f64::NEG_INFINITY, |a, &b| a.max(b)),
            Pooling::Mean => frames.mean_axis(axis)?,
        })
    }
}

/// 1-based ranks, ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, SlmError> {
    if x.len() != y.len() {
        return Err(SlmError::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 2 {
        return Err(SlmError::TooFewItems { found: x.len(), needed: 2 });
    }
    pearson(&average_ranks(x), &average_ranks(y)).ok_or(SlmError::ConstantRanks)
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Option<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.dot(b) / (na * nb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimiReport {
    pub spearman: f64,
    pub n_items: usize,
    pub n_used: usize,
    /// Pair ids skipped because a pooled vector had zero norm.
    pub skipped: Vec<String>,
}

/// Spearman correlation between model cosine similarities and human scores.
pub fn semantic_similarity(repr: &dyn PooledRepr, items: &[SimiItem]) -> Result<SimiReport, SlmError> {
    let scored = items
        .par_iter()
        .map(|it| {
            let a = repr.pooled(&it.utt_a).ok_or_else(|| SlmError::UnknownUtt { pair_id: it.pair_id.clone(), utt_id: it.utt_a.clone() })?;
            let b = repr.pooled(&it.utt_b).ok_or_else(|| SlmError::UnknownUtt { pair_id: it.pair_id.clone(), utt_id: it.utt_b.clone() })?;
            if a.len() != b.len() {
                return Err(SlmError::LengthMismatch { left: a.len(), right: b.len() });
            }
            Ok(cosine(&a, &b))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut model = Vec::new();
    let mut human = Vec::new();
    let mut skipped = Vec::new();
    for (it, s) in items.iter().zip(scored) {
        match s {
            Some(s) => {
                model.push(s);
                human.push(it.human_score);
            }
            None => skipped.push(it.pair_id.clone()),
        }
    }
    if model.len() < 3 {
        return Err(SlmError::TooFewItems { found: model.len(), needed: 3 });
    }
    Ok(SimiReport { spearman: spearman(&model, &human)?, n_items: items.len(), n_used: model.len(), skipped })
}
