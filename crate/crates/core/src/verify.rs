//! Speaker verification from per-utterance feature means.
//!
//! Each speaker is enrolled as the mean of a few utterance means; every
//! held-out utterance is compared to every enrolled speaker by Euclidean
//! distance. Closed-set accuracy picks the nearest speaker, and the EER is
//! read off a threshold sweep over all trials.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array1;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, FeatureArchive, Manifest};
use crate::normalize::{utterance_mean, NormalizeError};
use crate::rng::{fnv1a, substream, tag};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("speaker `{speaker}` has {found} utterances, need more than {n_enroll}")]
    TooFewUtterances { speaker: String, found: usize, n_enroll: usize },
    #[error("n_enroll must be at least 1")]
    ZeroEnroll,
    #[error("utterance `{0}` has no features")]
    MissingFeatures(String),
    #[error("dimension mismatch: {expected} vs {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("utterance `{utt_id}` is missing trials for {missing} speakers")]
    MissingTrials { utt_id: String, missing: usize },
    #[error("utterance `{0}` has no target trial")]
    NoTargetTrial(String),
    #[error("EER needs at least one target and one impostor trial")]
    SingleClass,
    #[error("length mismatch: {scores} scores, {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score")]
    NonFinite,
    #[error(transparent)]
    Normalize(#[from] NormalizeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub speaker_id: String,
    pub embedding: Array1<f64>,
    pub n_enrolled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestUtterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub mean: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enrollment {
    /// Sorted by speaker id.
    pub embeddings: Vec<SpeakerEmbedding>,
    pub tests: Vec<TestUtterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub speaker_id: String,
    pub utt_id: String,
    pub distance: f64,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub eer: f64,
    /// Distance threshold at the EER operating point: trials with distance
    /// at most this value are accepted.
    pub eer_threshold: f64,
    pub accuracy: f64,
    pub n_trials: usize,
    pub n_tests: usize,
    pub n_speakers: usize,
    pub n_enroll: usize,
    pub seed: u64,
}

/// Picks `n_enroll` utterances per speaker at random and averages their
/// means; the rest become test utterances.
///
/// The choice for a speaker depends only on the seed, the speaker id and the
/// speaker's utterance list in manifest order.
pub fn enroll(archive: &FeatureArchive, manifest: &Manifest, n_enroll: usize, seed: u64) -> Result<Enrollment, VerifyError> {
    if n_enroll == 0 {
        return Err(VerifyError::ZeroEnroll);
    }
    let by_speaker = manifest.by_speaker();
    for (spk, utts) in &by_speaker {
        if utts.len() <= n_enroll {
            return Err(VerifyError::TooFewUtterances { speaker: spk.to_string(), found: utts.len(), n_enroll });
        }
    }
    let per_speaker: Vec<(SpeakerEmbedding, Vec<TestUtterance>)> = by_speaker
        .par_iter()
        .map(|(spk, utts)| {
            let mut order: Vec<&str> = utts.clone();
            order.shuffle(&mut substream(seed, tag::ENROLL, fnv1a(spk.as_bytes())));
            let mean_of = |id: &str| -> Result<Array1<f64>, VerifyError> {
                let utt = archive.get(id).ok_or_else(|| VerifyError::MissingFeatures(id.to_string()))?;
                Ok(utterance_mean(utt.frames.view())?)
            };
            let mut embedding = Array1::<f64>::zeros(archive.dim());
            for id in &order[..n_enroll] {
                embedding += &mean_of(id)?;
            }
            embedding /= n_enroll as f64;
            // Test utterances keep manifest order.
            let enrolled: BTreeSet<&str> = order[..n_enroll].iter().copied().collect();
            let tests = utts
                .iter()
                .filter(|id| !enrolled.contains(*id))
                .map(|id| Ok(TestUtterance { utt_id: id.to_string(), speaker_id: spk.to_string(), mean: mean_of(id)? }))
                .collect::<Result<Vec<_>, VerifyError>>()?;
            Ok((SpeakerEmbedding { speaker_id: spk.to_string(), embedding, n_enrolled: n_enroll }, tests))
        })
        .collect::<Result<_, VerifyError>>()?;
    let mut embeddings = Vec::with_capacity(per_speaker.len());
    let mut tests = Vec::new();
    for (e, t) in per_speaker {
        embeddings.push(e);
        tests.extend(t);
    }
    Ok(Enrollment { embeddings, tests })
}

/// One trial per (test utterance, enrolled speaker), utterance-major.
pub fn score_trials(embeddings: &[SpeakerEmbedding], tests: &[TestUtterance]) -> Result<Vec<Trial>, VerifyError> {
    let dim = embeddings.first().map(|e| e.embedding.len()).unwrap_or(0);
    for d in embeddings.iter().map(|e| e.embedding.len()).chain(tests.iter().map(|t| t.mean.len())) {
        if d != dim {
            return Err(VerifyError::DimMismatch { expected: dim, found: d });
        }
    }
    Ok(tests
        .par_iter()
        .flat_map_iter(|t| {
            embeddings.iter().map(move |e| Trial {
                speaker_id: e.speaker_id.clone(),
                utt_id: t.utt_id.clone(),
                distance: e.embedding.iter().zip(&t.mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                is_target: e.speaker_id == t.speaker_id,
            })
        })
        .collect())
}

/// Fraction of test utterances whose nearest speaker is the true one.
/// Distance ties go to the lexicographically smallest speaker id.
pub fn closed_set_accuracy(trials: &[Trial]) -> Result<f64, VerifyError> {
    let speakers: BTreeSet<&str> = trials.iter().map(|t| t.speaker_id.as_str()).collect();
    let mut by_utt: BTreeMap<&str, Vec<&Trial>> = BTreeMap::new();
    for t in trials {
        by_utt.entry(&t.utt_id).or_default().push(t);
    }
    if by_utt.is_empty() {
        return Err(VerifyError::SingleClass);
    }
    let mut correct = 0usize;
    for (utt, ts) in &by_utt {
        let covered: BTreeSet<&str> = ts.iter().map(|t| t.speaker_id.as_str()).collect();
        if covered.len() != speakers.len() {
            return Err(VerifyError::MissingTrials { utt_id: utt.to_string(), missing: speakers.len() - covered.len() });
        }
        if !ts.iter().any(|t| t.is_target) {
            return Err(VerifyError::NoTargetTrial(utt.to_string()));
        }
        let best = ts
            .iter()
            .min_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.speaker_id.cmp(&b.speaker_id)))
            .expect("non-empty");
        if best.is_target {
            correct += 1;
        }
    }
    Ok(correct as f64 / by_utt.len() as f64)
}

/// Equal error rate of `scores` (larger means more likely target).
///
/// Candidate thresholds are -inf, the midpoints of consecutive sorted unique
/// scores, and +inf. At threshold t, FRR is the fraction of targets scoring
/// below t and FAR the fraction of impostors scoring at least t. Returns
/// `(FRR + FAR) / 2` and t at the first threshold (ascending) minimizing
/// `|FRR - FAR|`.
pub fn compute_eer(scores: &[f64], is_target: &[bool]) -> Result<(f64, f64), VerifyError> {
    if scores.len() != is_target.len() {
        return Err(VerifyError::LengthMismatch { scores: scores.len(), labels: is_target.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(VerifyError::NonFinite);
    }
    let n_t = is_target.iter().filter(|&&t| t).count();
    let n_i = is_target.len() - n_t;
    if n_t == 0 || n_i == 0 {
        return Err(VerifyError::SingleClass);
    }
    let mut sorted: Vec<(f64, bool)> = scores.iter().copied().zip(is_target.iter().copied()).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Rejected targets below and accepted impostors at or above the threshold.
    let (mut rejected, mut accepted) = (0usize, n_i);
    // |FRR - FAR| compared exactly as |rejected * n_i - accepted * n_t|.
    let gap = |r: usize, a: usize| (r as i128 * n_i as i128 - a as i128 * n_t as i128).abs();
    let mut best = (gap(rejected, accepted), f64::NEG_INFINITY, rejected, accepted);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                rejected += 1;
            } else {
                accepted -= 1;
            }
            i += 1;
        }
        let threshold = if i < sorted.len() { 0.5 * (v + sorted[i].0) } else { f64::INFINITY };
        let g = gap(rejected, accepted);
        if g < best.0 {
            best = (g, threshold, rejected, accepted);
        }
    }
    let (_, threshold, r, a) = best;
    let eer = 0.5 * (r as f64 / n_t as f64 + a as f64 / n_i as f64);
    Ok((eer, threshold))
}

/// Enrollment, exhaustive trials, accuracy and EER in one call.
pub fn verify(archive: &FeatureArchive, manifest: &Manifest, n_enroll: usize, seed: u64) -> Result<VerifyReport, VerifyError> {
    let enrollment = enroll(archive, manifest, n_enroll, seed)?;
    let trials = score_trials(&enrollment.embeddings, &enrollment.tests)?;
    let accuracy = closed_set_accuracy(&trials)?;
    let scores: Vec<f64> = trials.iter().map(|t| -t.distance).collect();
    let labels: Vec<bool> = trials.iter().map(|t| t.is_target).collect();
    let (eer, threshold) = compute_eer(&scores, &labels)?;
    Ok(VerifyReport {
        eer,
        eer_threshold: -threshold,
        accuracy,
        n_trials: trials.len(),
        n_tests: enrollment.tests.len(),
        n_speakers: enrollment.embeddings.len(),
        n_enroll,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Gender, ManifestRecord, Utterance};
    use ndarray::{array, Array2};

    fn corpus(utts: &[(&str, &str, Array2<f32>)]) -> (FeatureArchive, Manifest) {
        let archive =
            FeatureArchive::from_utterances(2, 10_000, utts.iter().map(|(u, _, f)| Utterance::new(*u, f.clone()))).unwrap();
        let manifest = Manifest::from_records(utts.iter().map(|(u, s, f)| ManifestRecord {
            utt_id: u.to_string(),
            speaker_id: s.to_string(),
            gender: Gender::F,
            num_frames: f.nrows(),
        }))
        .unwrap();
        (archive, manifest)
    }

    #[test]
    fn embedding_is_mean_of_means() {
        let (a, m) = corpus(&[
            ("u1", "s", array![[0.0f32, 0.0]]),
            ("u2", "s", array![[2.0f32, 2.0], [2.0, 2.0]]),
            ("u3", "s", array![[9.0f32, 9.0]]),
        ]);
        // Enroll two of three; try seeds until u3 is held out.
        let e = (0..64)
            .map(|seed| enroll(&a, &m, 2, seed).unwrap())
            .find(|e| e.tests[0].utt_id == "u3")
            .unwrap();
        assert_eq!(e.embeddings[0].embedding, array![1.0, 1.0]);
        assert_eq!(e.embeddings[0].n_enrolled, 2);
    }

    #[test]
    fn split_is_seeded() {
        let utts: Vec<(String, Array2<f32>)> =
            (0..10).map(|i| (format!("u{i}"), Array2::from_elem((1, 2), i as f32))).collect();
        let rows: Vec<(&str, &str, Array2<f32>)> = utts.iter().map(|(u, f)| (u.as_str(), "s", f.clone())).collect();
        let (a, m) = corpus(&rows);
        assert_eq!(enroll(&a, &m, 5, 3).unwrap(), enroll(&a, &m, 5, 3).unwrap());
    }

    #[test]
    fn too_few_utterances() {
        let rows: Vec<(String, Array2<f32>)> = (0..5).map(|i| (format!("u{i}"), Array2::zeros((1, 2)))).collect();
        let rows: Vec<(&str, &str, Array2<f32>)> = rows.iter().map(|(u, f)| (u.as_str(), "spk7", f.clone())).collect();
        let (a, m) = corpus(&rows);
        match enroll(&a, &m, 5, 0) {
            Err(VerifyError::TooFewUtterances { speaker, .. }) => assert_eq!(speaker, "spk7"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn emb(spk: &str, v: Array1<f64>) -> SpeakerEmbedding {
        SpeakerEmbedding { speaker_id: spk.into(), embedding: v, n_enrolled: 1 }
    }

    fn test_utt(utt: &str, spk: &str, v: Array1<f64>) -> TestUtterance {
        TestUtterance { utt_id: utt.into(), speaker_id: spk.into(), mean: v }
    }

    #[test]
    fn trials_and_accuracy() {
        let embs = vec![emb("a", array![0.0, 0.0]), emb("b", array![3.0, 4.0])];
        let tests = vec![
            test_utt("t1", "a", array![0.0, 0.0]),
            test_utt("t2", "b", array![3.0, 4.0]),
            test_utt("t3", "b", array![3.0, 4.0]),
        ];
        let trials = score_trials(&embs, &tests).unwrap();
        assert_eq!(trials.len(), 6);
        assert_eq!(trials[0].distance, 0.0);
        assert!(trials[0].is_target);
        assert_eq!(trials[1].distance, 5.0);
        assert!(trials.iter().all(|t| t.distance >= 0.0));
        assert_eq!(closed_set_accuracy(&trials).unwrap(), 1.0);
        let bad = vec![test_utt("t", "a", array![0.0])];
        assert!(matches!(score_trials(&embs, &bad), Err(VerifyError::DimMismatch { .. })));
    }

    #[test]
    fn accuracy_tie_goes_to_smallest_speaker_id() {
        let embs = vec![emb("b", array![1.0]), emb("a", array![-1.0])];
        let tests = vec![test_utt("t", "b", array![0.0])];
        let trials = score_trials(&embs, &tests).unwrap();
        assert_eq!(closed_set_accuracy(&trials).unwrap(), 0.0);
    }

    #[test]
    fn missing_trials() {
        let mut trials = score_trials(
            &[emb("a", array![0.0]), emb("b", array![1.0])],
            &[test_utt("t1", "a", array![0.0]), test_utt("t2", "b", array![1.0])],
        )
        .unwrap();
        trials.pop();
        assert!(matches!(closed_set_accuracy(&trials), Err(VerifyError::MissingTrials { .. })));
    }

    #[test]
    fn eer_examples() {
        let (eer, _) = compute_eer(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(eer, 0.0);
        let (eer, t) = compute_eer(&[3.0, 2.0, 1.0, 2.5, 0.5, 0.2], &[true, true, true, false, false, false]).unwrap();
        assert!((eer - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t, 1.5);
        assert!(matches!(compute_eer(&[1.0, 2.0], &[true, true]), Err(VerifyError::SingleClass)));
    }

    #[test]
    fn eer_with_ties_across_classes() {
        // One shared score: the only thresholds are -inf, +inf.
        let (eer, t) = compute_eer(&[1.0, 1.0], &[true, false]).unwrap();
        assert_eq!(t, f64::NEG_INFINITY);
        assert_eq!(eer, 0.5);
    }
}
