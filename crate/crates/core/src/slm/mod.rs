//! Spoken language modeling over discovered units: chain-rule sequence
//! scoring behind a conditional-probability interface, an interpolated
//! Kneser–Ney n-gram model, and the lexical, syntactic and semantic task
//! evaluators.

mod ngram;
mod semantic;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ngram::{NgramLm, NgramLmFile};
pub use semantic::{
    average_ranks, semantic_similarity, spearman, FramePoolRepr, PooledRepr, Pooling, SimiReport, UnitCountRepr,
};

#[derive(Debug, Error)]
pub enum SlmError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("unit {unit} out of range for K={k}")]
    UnitOutOfRange { unit: u32, k: usize },
    #[error("pair `{pair_id}`: unknown utterance `{utt_id}`")]
    UnknownUtt { pair_id: String, utt_id: String },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{found} usable items, need at least {needed}")]
    TooFewItems { found: usize, needed: usize },
    #[error("scores have constant ranks; correlation undefined")]
    ConstantRanks,
    #[error("no pairs to score")]
    NoPairs,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A positive/negative stimulus pair (word vs non-word, grammatical vs
/// ungrammatical sentence).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPair {
    pub pair_id: String,
    pub pos_utt_id: String,
    pub neg_utt_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimiItem {
    pub pair_id: String,
    pub utt_a: String,
    pub utt_b: String,
    pub human_score: f64,
}

/// Conditional log-probabilities over unit ids `0..vocab_size()`.
pub trait UnitLm: Sync {
    fn vocab_size(&self) -> usize;

    /// Whether the model predicts an end-of-sequence event.
    fn scores_end(&self) -> bool;

    /// `ln P(next | prefix)`; `None` is the end of the sequence.
    fn cond_logprob(&self, prefix: &[u32], next: Option<u32>) -> f64;
}

/// Flat distribution over K units with no end event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformLm {
    pub k: usize,
}

impl UnitLm for UniformLm {
    fn vocab_size(&self) -> usize {
        self.k
    }

    fn scores_end(&self) -> bool {
        false
    }

    fn cond_logprob(&self, _prefix: &[u32], _next: Option<u32>) -> f64 {
        -(self.k as f64).ln()
    }
}

fn check_units(lm: &dyn UnitLm, units: &[u32]) -> Result<(), SlmError> {
    let k = lm.vocab_size();
    match units.iter().find(|&&u| u as usize >= k) {
        Some(&unit) => Err(SlmError::UnitOutOfRange { unit, k }),
        None => Ok(()),
    }
}

/// Sum of conditional log-probabilities of the units, without the end event.
pub fn prefix_logprob(lm: &dyn UnitLm, units: &[u32]) -> Result<f64, SlmError> {
    check_units(lm, units)?;
    Ok((0..units.len()).map(|i| lm.cond_logprob(&units[..i], Some(units[i]))).sum())
}

/// Chain-rule log-probability of a whole sequence, including the end event
/// when the model scores one.
pub fn sequence_logprob(lm: &dyn UnitLm, units: &[u32]) -> Result<f64, SlmError> {
    let mut lp = prefix_logprob(lm, units)?;
    if lm.scores_end() {
        lp += lm.cond_logprob(units, None);
    }
    Ok(lp)
}

/// Number of scored events in a sequence.
fn n_events(lm: &dyn UnitLm, units: &[u32]) -> usize {
    units.len() + usize::from(lm.scores_end())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseReport {
    pub accuracy: f64,
    pub n_pairs: usize,
    pub length_normalized: bool,
}

/// Fraction of pairs where the positive stimulus scores higher; ties count
/// one half. With `length_normalized` the per-event mean log-probability is
/// compared instead of the sum.
pub fn pairwise_accuracy(
    lm: &dyn UnitLm,
    pairs: &[TaskPair],
    sequences: &HashMap<String, Vec<u32>>,
    length_normalized: bool,
) -> Result<PairwiseReport, SlmError> {
    if pairs.is_empty() {
        return Err(SlmError::NoPairs);
    }
    let score = |pair_id: &str, utt: &str| -> Result<f64, SlmError> {
        let units = sequences
            .get(utt)
            .ok_or_else(|| SlmError::UnknownUtt { pair_id: pair_id.to_string(), utt_id: utt.to_string() })?;
        let lp = sequence_logprob(lm, units)?;
        Ok(if length_normalized { lp / n_events(lm, units).max(1) as f64 } else { lp })
    };
    let points = pairs
        .par_iter()
        .map(|p| {
            let pos = score(&p.pair_id, &p.pos_utt_id)?;
            let neg = score(&p.pair_id, &p.neg_utt_id)?;
            Ok(if pos > neg {
                2u64
            } else if pos == neg {
                1
            } else {
                0
            })
        })
        .collect::<Result<Vec<u64>, SlmError>>()?;
    // Half-points summed as integers so the result is order-independent.
    let total: u64 = points.iter().sum();
    Ok(PairwiseReport { accuracy: total as f64 / (2 * pairs.len()) as f64, n_pairs: pairs.len(), length_normalized })
}

fn csv_rows<'a>(text: &'a str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>, SlmError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((i, h)) => {
            return Err(SlmError::Malformed { line: i + 1, message: format!("expected header `{header}`, got `{h}`") })
        }
        None => return Err(SlmError::Malformed { line: 1, message: "missing header".into() }),
    }
    let width = header.split(',').count();
    lines
        .map(|(i, l)| {
            let fields: Vec<&str> = l.split(',').map(str::trim).collect();
            if fields.len() != width {
                return Err(SlmError::Malformed { line: i + 1, message: format!("expected {width} fields, got {}", fields.len()) });
            }
            Ok((i + 1, fields))
        })
        .collect()
}

pub const PAIRS_HEADER: &str = "pair_id,pos_utt_id,neg_utt_id";
pub const SIMI_HEADER: &str = "pair_id,utt_a,utt_b,human_score";

pub fn parse_pairs(text: &str) -> Result<Vec<TaskPair>, SlmError> {
    Ok(csv_rows(text, PAIRS_HEADER)?
        .into_iter()
        .map(|(_, f)| TaskPair { pair_id: f[0].into(), pos_utt_id: f[1].into(), neg_utt_id: f[2].into() })
        .collect())
}

pub fn parse_simi(text: &str) -> Result<Vec<SimiItem>, SlmError> {
    csv_rows(text, SIMI_HEADER)?
        .into_iter()
        .map(|(line, f)| {
            let human_score = f[3]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| SlmError::Malformed { line, message: format!("bad human_score `{}`", f[3]) })?;
            Ok(SimiItem { pair_id: f[0].into(), utt_a: f[1].into(), utt_b: f[2].into(), human_score })
        })
        .collect()
}

pub fn pairs_to_csv(pairs: &[TaskPair]) -> String {
    let mut out = format!("{PAIRS_HEADER}\n");
    for p in pairs {
        out.push_str(&format!("{},{},{}\n", p.pair_id, p.pos_utt_id, p.neg_utt_id));
    }
    out
}

pub fn simi_to_csv(items: &[SimiItem]) -> String {
    let mut out = format!("{SIMI_HEADER}\n");
    for s in items {
        out.push_str(&format!("{},{},{},{}\n", s.pair_id, s.utt_a, s.utt_b, s.human_score));
    }
    out
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<TaskPair>, SlmError> {
    parse_pairs(&fs::read_to_string(path)?)
}

pub fn load_simi(path: impl AsRef<Path>) -> Result<Vec<SimiItem>, SlmError> {
    parse_simi(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_length_four() {
        let lm = UniformLm { k: 50 };
        let lp = sequence_logprob(&lm, &[1, 2, 3, 4]).unwrap();
        assert!((lp - 4.0 * (1.0f64 / 50.0).ln()).abs() < 1e-12);
        assert!(matches!(sequence_logprob(&lm, &[50]), Err(SlmError::UnitOutOfRange { unit: 50, k: 50 })));
    }

    #[test]
    fn chain_rule_with_carried_context() {
        let lm = NgramLm::train([&[0u32, 1, 2, 0, 1][..], &[2, 1, 0]], 3, 3, 0.75).unwrap();
        let s = [0u32, 1, 2, 2, 1];
        let whole = prefix_logprob(&lm, &s).unwrap();
        let head = prefix_logprob(&lm, &s[..2]).unwrap();
        let tail: f64 = (2..s.len()).map(|i| lm.cond_logprob(&s[..i], Some(s[i]))).sum();
        assert!((whole - (head + tail)).abs() < 1e-12);
        assert!(sequence_logprob(&lm, &s).unwrap() <= 0.0);
    }

    fn seqs(items: &[(&str, &[u32])]) -> HashMap<String, Vec<u32>> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
    }

    #[test]
    fn identical_stimuli_tie() {
        let lm = UniformLm { k: 4 };
        let s = seqs(&[("a", &[1, 2]), ("b", &[1, 2])]);
        let pairs = vec![TaskPair { pair_id: "p".into(), pos_utt_id: "a".into(), neg_utt_id: "b".into() }];
        assert_eq!(pairwise_accuracy(&lm, &pairs, &s, false).unwrap().accuracy, 0.5);
    }

    #[test]
    fn unknown_id_names_pair() {
        let lm = UniformLm { k: 4 };
        let pairs = vec![TaskPair { pair_id: "p9".into(), pos_utt_id: "a".into(), neg_utt_id: "zz".into() }];
        match pairwise_accuracy(&lm, &pairs, &seqs(&[("a", &[1])]), false) {
            Err(SlmError::UnknownUtt { pair_id, .. }) => assert_eq!(pair_id, "p9"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn length_normalization_can_flip_decisions() {
        // Under a flat model the shorter stimulus wins by sum; per event the
        // two are equal.
        let lm = UniformLm { k: 4 };
        let s = seqs(&[("pos", &[1, 1]), ("neg", &[0, 1, 2, 3, 0, 1, 2, 3, 0, 1])]);
        let pairs = vec![TaskPair { pair_id: "p".into(), pos_utt_id: "pos".into(), neg_utt_id: "neg".into() }];
        assert_eq!(pairwise_accuracy(&lm, &pairs, &s, false).unwrap().accuracy, 1.0);
        assert_eq!(pairwise_accuracy(&lm, &pairs, &s, true).unwrap().accuracy, 0.5);
    }

    #[test]
    fn csv_round_trips() {
        let pairs = vec![TaskPair { pair_id: "p1".into(), pos_utt_id: "a".into(), neg_utt_id: "b".into() }];
        assert_eq!(parse_pairs(&pairs_to_csv(&pairs)).unwrap(), pairs);
        let simi = vec![SimiItem { pair_id: "s1".into(), utt_a: "a".into(), utt_b: "b".into(), human_score: 3.25 }];
        assert_eq!(parse_simi(&simi_to_csv(&simi)).unwrap(), simi);
        assert!(matches!(parse_pairs("a,b\n"), Err(SlmError::Malformed { line: 1, .. })));
        assert!(matches!(
            parse_simi("pair_id,utt_a,utt_b,human_score\ns,a,b,x\n"),
            Err(SlmError::Malformed { line: 2, .. })
        ));
    }
}
