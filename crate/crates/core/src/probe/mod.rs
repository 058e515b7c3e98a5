//! Frame-level probing classifiers and random-forest dimension ranking.

mod classifier;
mod forest;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aud::{one_hot, AudError};
use crate::corpus::{CorpusError, FeatureArchive, Utterance};

pub use classifier::{evaluate_probe, train_probe, train_probe_run, Classifier, ProbeConfig, ProbeKind};
pub use forest::{
    bootstrap_indices, forest_importance, train_forest, train_tree, Forest, ForestConfig, ImportanceRanking, Node, Tree,
};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("{frames} frames but {labels} labels")]
    LengthMismatch { frames: usize, labels: usize },
    #[error("dimension mismatch: probe expects {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: u32, n_classes: usize },
    #[error("no frames")]
    Empty,
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("n_keep {n_keep} out of range 1..={dim}")]
    KeepOutOfRange { n_keep: usize, dim: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Aud(#[from] AudError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Dense class ids for string labels, in sorted label order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelEncoder {
    pub classes: Vec<String>,
}

impl LabelEncoder {
    pub fn fit<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let set: std::collections::BTreeSet<&str> = labels.into_iter().collect();
        Self { classes: set.into_iter().map(String::from).collect() }
    }

    pub fn encode(&self, label: &str) -> Option<u32> {
        self.classes.binary_search_by(|c| c.as_str().cmp(label)).ok().map(|i| i as u32)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Mean test accuracy over runs.
    pub accuracy: f64,
    pub run_accuracies: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
}

/// Trains `config.n_runs` probes with derived seeds and averages their test
/// accuracies.
pub fn probe_accuracy(
    train_x: ArrayView2<'_, f32>,
    train_y: &[u32],
    test_x: ArrayView2<'_, f32>,
    test_y: &[u32],
    n_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult, ProbeError> {
    config.validate()?;
    let run_accuracies = (0..config.n_runs as u64)
        .into_par_iter()
        .map(|run| {
            let clf = train_probe_run(train_x, train_y, n_classes, config, run)?;
            evaluate_probe(&clf, test_x, test_y)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProbeResult {
        accuracy: run_accuracies.iter().sum::<f64>() / run_accuracies.len() as f64,
        run_accuracies,
        n_train: train_y.len(),
        n_test: test_y.len(),
        n_classes,
    })
}

/// Probe over one-hot unit codes of width `k`.
pub fn probe_on_units(
    train_units: &[u32],
    train_y: &[u32],
    test_units: &[u32],
    test_y: &[u32],
    k: usize,
    n_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult, ProbeError> {
    let train_x = one_hot(train_units, k)?;
    let test_x = one_hot(test_units, k)?;
    probe_accuracy(train_x.view(), train_y, test_x.view(), test_y, n_classes, config)
}

/// Keeps the `n_keep` least speaker-important dimensions, in their
/// original order.
pub fn prune(archive: &FeatureArchive, ranking: &ImportanceRanking, n_keep: usize) -> Result<FeatureArchive, ProbeError> {
    if ranking.order.len() != archive.dim() {
        return Err(ProbeError::DimMismatch { expected: archive.dim(), found: ranking.order.len() });
    }
    let kept = ranking.keep(n_keep)?;
    let utts = archive.utterances().par_iter().map(|u| {
        let frames = Array2::from_shape_fn((u.num_frames(), kept.len()), |(t, j)| u.frames[[t, kept[j]]]);
        Utterance::new(u.id.clone(), frames)
    });
    let utts: Vec<Utterance> = utts.collect();
    Ok(FeatureArchive::from_utterances(n_keep, archive.frame_period_us(), utts)?.with_provenance(archive.provenance()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn prune_keeps_original_order() {
        let a = FeatureArchive::from_utterances(4, 10_000, [Utterance::new("u", array![[0.0f32, 1.0, 2.0, 3.0]])]).unwrap();
        let r = ImportanceRanking { importance: vec![0.3, 0.1, 0.4, 0.2], order: vec![2, 0, 3, 1] };
        let p = prune(&a, &r, 2).unwrap();
        assert_eq!(p.dim(), 2);
        assert_eq!(p.utterances()[0].frames, array![[1.0f32, 3.0]]);
        assert_eq!(prune(&a, &r, 4).unwrap(), a);
        assert!(matches!(prune(&a, &r, 5), Err(ProbeError::KeepOutOfRange { .. })));
    }

    #[test]
    fn constant_features_predict_majority() {
        let x = Array2::<f32>::ones((100, 3));
        let y: Vec<u32> = (0..100).map(|i| u32::from(i >= 80)).collect();
        let cfg = ProbeConfig { epochs: 50, batch_size: 10, learning_rate: 0.1, n_runs: 1, ..Default::default() };
        let r = probe_accuracy(x.view(), &y, x.view(), &y, 2, &cfg).unwrap();
        assert_eq!(r.accuracy, 0.8);
    }

    #[test]
    fn units_equal_to_labels() {
        let units: Vec<u32> = (0..300).map(|i| (i % 3) as u32).collect();
        let cfg = ProbeConfig { epochs: 20, batch_size: 16, learning_rate: 0.5, n_runs: 2, ..Default::default() };
        let r = probe_on_units(&units, &units, &units, &units, 3, 3, &cfg).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(matches!(
            probe_on_units(&[3], &[0], &[0], &[0], 3, 3, &cfg),
            Err(ProbeError::Aud(AudError::UnitOutOfRange { .. }))
        ));
    }

    #[test]
    fn label_encoder_sorted() {
        let e = LabelEncoder::fit(["spk2", "spk1", "spk2"]);
        assert_eq!(e.classes, vec!["spk1", "spk2"]);
        assert_eq!(e.encode("spk2"), Some(1));
        assert_eq!(e.encode("x"), None);
    }
}
