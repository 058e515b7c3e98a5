//! Per-utterance and per-speaker standardization of feature frames.
//!
//! Speaker identity is largely carried by the per-utterance mean of the
//! features, so subtracting that mean and scaling each dimension to unit
//! variance strips most speaker information while keeping phonetic contrasts.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, FeatureArchive, Manifest, Provenance, Utterance};

/// Lower bound applied to standard deviations before dividing.
pub const STD_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("no frames to compute statistics from")]
    Empty,
    #[error("dimension mismatch: frames have {found} columns, statistics have {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("utterance `{0}` is not in the manifest")]
    UnknownUtt(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Population mean and standard deviation per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub n_frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Statistics from each utterance alone.
    #[default]
    Utterance,
    /// Statistics pooled over all utterances of the utterance's speaker.
    Speaker,
}

/// Arithmetic mean of the frames, per dimension.
pub fn utterance_mean(frames: ArrayView2<'_, f32>) -> Result<Array1<f64>, NormalizeError> {
    if frames.nrows() == 0 {
        return Err(NormalizeError::Empty);
    }
    let mut sum = Array1::<f64>::zeros(frames.ncols());
    for row in frames.rows() {
        for (s, &v) in sum.iter_mut().zip(row.iter()) {
            *s += f64::from(v);
        }
    }
    Ok(sum / frames.nrows() as f64)
}

/// Statistics of one frame matrix.
pub fn fit_stats(frames: ArrayView2<'_, f32>) -> Result<NormStats, NormalizeError> {
    fit_stats_pooled(std::iter::once(frames))
}

/// Statistics of the concatenation of several frame matrices.
pub fn fit_stats_pooled<'a>(
    parts: impl IntoIterator<Item = ArrayView2<'a, f32>> + Clone,
) -> Result<NormStats, NormalizeError> {
    let mut dim = None;
    let mut n = 0usize;
    for p in parts.clone() {
        match dim {
            None => dim = Some(p.ncols()),
            Some(d) if d != p.ncols() => return Err(NormalizeError::DimMismatch { expected: d, found: p.ncols() }),
            _ => {}
        }
        n += p.nrows();
    }
    let dim = dim.ok_or(NormalizeError::Empty)?;
    if n == 0 {
        return Err(NormalizeError::Empty);
    }
    // Two passes: mean first, then squared deviations.
    let mut mean = Array1::<f64>::zeros(dim);
    for p in parts.clone() {
        for row in p.rows() {
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += f64::from(v);
            }
        }
    }
    mean /= n as f64;
    let mut var = Array1::<f64>::zeros(dim);
    for p in parts {
        for row in p.rows() {
            for ((s, &m), &v) in var.iter_mut().zip(mean.iter()).zip(row.iter()) {
                let d = f64::from(v) - m;
                *s += d * d;
            }
        }
    }
    let std = var.mapv(|s| (s / n as f64).sqrt());
    Ok(NormStats { mean, std, n_frames: n })
}

/// `(x - mean) / max(std, STD_EPS)`, element-wise per dimension.
pub fn standardize(frames: ArrayView2<'_, f32>, stats: &NormStats) -> Result<Array2<f32>, NormalizeError> {
    if frames.ncols() != stats.mean.len() {
        return Err(NormalizeError::DimMismatch { expected: stats.mean.len(), found: frames.ncols() });
    }
    let scale: Vec<f64> = stats.std.iter().map(|&s| 1.0 / s.max(STD_EPS)).collect();
    let mut out = Array2::<f32>::zeros(frames.raw_dim());
    for (mut o, row) in out.rows_mut().into_iter().zip(frames.rows()) {
        for (j, (o, &v)) in o.iter_mut().zip(row.iter()).enumerate() {
            *o = ((f64::from(v) - stats.mean[j]) * scale[j]) as f32;
        }
    }
    Ok(out)
}

/// Standardizes every utterance of an archive.
///
/// `Speaker` mode needs a manifest to group utterances.
pub fn normalize_archive(
    archive: &FeatureArchive,
    mode: NormMode,
    manifest: Option<&Manifest>,
) -> Result<FeatureArchive, NormalizeError> {
    let speaker_stats: HashMap<&str, NormStats> = match mode {
        NormMode::Utterance => HashMap::new(),
        NormMode::Speaker => {
            let manifest = manifest.ok_or_else(|| {
                NormalizeError::Corpus(CorpusError::InvalidConfig("per-speaker normalization needs a manifest".into()))
            })?;
            let mut groups: HashMap<&str, Vec<ArrayView2<'_, f32>>> = HashMap::new();
            for utt in archive.utterances() {
                let rec = manifest.get(&utt.id).ok_or_else(|| NormalizeError::UnknownUtt(utt.id.clone()))?;
                groups.entry(rec.speaker_id.as_str()).or_default().push(utt.frames.view());
            }
            groups
                .into_par_iter()
                .map(|(spk, views)| fit_stats_pooled(views.iter().cloned()).map(|s| (spk, s)))
                .collect::<Result<_, _>>()?
        }
    };
    let utterances: Vec<Utterance> = archive
        .utterances()
        .par_iter()
        .map(|utt| {
            let stats = match mode {
                NormMode::Utterance => fit_stats(utt.frames.view())?,
                NormMode::Speaker => {
                    let spk = &manifest.expect("checked above").get(&utt.id).expect("checked above").speaker_id;
                    speaker_stats[spk.as_str()].clone()
                }
            };
            Ok(Utterance::new(utt.id.clone(), standardize(utt.frames.view(), &stats)?))
        })
        .collect::<Result<_, NormalizeError>>()?;
    Ok(FeatureArchive::from_utterances(archive.dim(), archive.frame_period_us(), utterances)?
        .with_provenance(Provenance::Standardized))
}
