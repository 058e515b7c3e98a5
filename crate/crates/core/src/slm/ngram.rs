//! Interpolated Kneser–Ney n-gram model over unit ids.
//!
//! Sequences are padded with `order - 1` start symbols and closed by an end
//! symbol. Predicted outcomes are the K units plus the end symbol. The
//! highest order uses raw counts; lower orders use continuation counts
//! (number of distinct left extensions), except for n-grams beginning with
//! the start symbol, which keep raw counts since nothing can precede them.
//! The unigram level is interpolated with the uniform distribution.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{SlmError, UnitLm};

/// Adjusted counts of one order, plus per-history totals.
#[derive(Debug, Clone, Default, PartialEq)]
struct Level {
    counts: HashMap<Vec<u32>, u64>,
    /// history -> (sum of counts, number of distinct continuations)
    histories: HashMap<Vec<u32>, (u64, u64)>,
}

impl Level {
    fn from_counts(counts: HashMap<Vec<u32>, u64>) -> Self {
        let mut histories: HashMap<Vec<u32>, (u64, u64)> = HashMap::new();
        for (gram, &c) in &counts {
            let e = histories.entry(gram[..gram.len() - 1].to_vec()).or_insert((0, 0));
            e.0 += c;
            e.1 += 1;
        }
        Self { counts, histories }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramLm {
    order: usize,
    k: usize,
    discount: f64,
    /// `levels[m - 1]` holds m-grams.
    levels: Vec<Level>,
}

/// Serialized form: sorted count tables per order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramLmFile {
    pub order: usize,
    pub k: usize,
    pub discount: f64,
    pub counts: Vec<Vec<(Vec<u32>, u64)>>,
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// End-of-sequence symbol id.
    pub fn eos(&self) -> u32 {
        self.k as u32
    }

    /// Start symbol id; only ever appears in histories.
    pub fn bos(&self) -> u32 {
        self.k as u32 + 1
    }

    /// Number of predicted outcomes: K units plus the end symbol.
    pub fn n_outcomes(&self) -> usize {
        self.k + 1
    }

    /// Trains on unit sequences with vocabulary `0..k`.
    pub fn train<'a>(
        sequences: impl IntoIterator<Item = &'a [u32]>,
        k: usize,
        order: usize,
        discount: f64,
    ) -> Result<Self, SlmError> {
        if order == 0 {
            return Err(SlmError::InvalidConfig("order must be at least 1".into()));
        }
        if k == 0 {
            return Err(SlmError::InvalidConfig("vocabulary must be non-empty".into()));
        }
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(SlmError::InvalidConfig(format!("discount must be in (0, 1], got {discount}")));
        }
        let (eos, bos) = (k as u32, k as u32 + 1);
        // Raw counts of every m-gram ending at a predicted position.
        let mut raw: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
        let mut n_seqs = 0usize;
        for seq in sequences {
            n_seqs += 1;
            if let Some(&u) = seq.iter().find(|&&u| u as usize >= k) {
                return Err(SlmError::UnitOutOfRange { unit: u, k });
            }
            let mut padded = vec![bos; order - 1];
            padded.extend_from_slice(seq);
            padded.push(eos);
            for i in order - 1..padded.len() {
                for m in 1..=order {
                    *raw[m - 1].entry(padded[i + 1 - m..=i].to_vec()).or_insert(0) += 1;
                }
            }
        }
        if n_seqs == 0 {
            return Err(SlmError::EmptyCorpus);
        }

        let mut levels = Vec::with_capacity(order);
        for m in 1..=order {
            let counts = if m == order {
                raw[m - 1].clone()
            } else {
                let mut cont: HashMap<Vec<u32>, u64> = HashMap::new();
                for gram in raw[m].keys() {
                    *cont.entry(gram[1..].to_vec()).or_insert(0) += 1;
                }
                for (gram, &c) in &raw[m - 1] {
                    if gram[0] == bos {
                        cont.insert(gram.clone(), c);
                    }
                }
                cont
            };
            levels.push(Level::from_counts(counts));
        }
        Ok(Self { order, k, discount, levels })
    }

    /// `P(w | history)` where `history` holds the `order - 1` preceding
    /// symbols (start symbols included).
    pub fn prob(&self, history: &[u32], w: u32) -> f64 {
        debug_assert_eq!(history.len(), self.order - 1);
        self.prob_at(self.order, history, w)
    }

    fn prob_at(&self, m: usize, history: &[u32], w: u32) -> f64 {
        if m == 0 {
            return 1.0 / self.n_outcomes() as f64;
        }
        let h = &history[history.len() + 1 - m..];
        let lower = self.prob_at(m - 1, history, w);
        let level = &self.levels[m - 1];
        match level.histories.get(h) {
            None => lower,
            Some(&(total, types)) => {
                let mut key = Vec::with_capacity(m);
                key.extend_from_slice(h);
                key.push(w);
                let c = level.counts.get(&key).copied().unwrap_or(0) as f64;
                let total = total as f64;
                (c - self.discount).max(0.0) / total + self.discount * types as f64 / total * lower
            }
        }
    }

    /// The padded history preceding position `units.len()`.
    fn history_of(&self, units: &[u32]) -> Vec<u32> {
        let n = self.order - 1;
        let mut h = vec![self.bos(); n.saturating_sub(units.len())];
        h.extend_from_slice(&units[units.len().saturating_sub(n)..]);
        h
    }

    /// Histories of every order-1 length seen in training, including the
    /// all-start history.
    pub fn seen_histories(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = self.levels[self.order - 1].histories.keys().cloned().collect();
        out.sort();
        out
    }

    pub fn to_file(&self) -> NgramLmFile {
        let counts = self
            .levels
            .iter()
            .map(|l| {
                let mut v: Vec<(Vec<u32>, u64)> = l.counts.iter().map(|(g, &c)| (g.clone(), c)).collect();
                v.sort();
                v
            })
            .collect();
        NgramLmFile { order: self.order, k: self.k, discount: self.discount, counts }
    }

    pub fn from_file(file: NgramLmFile) -> Result<Self, SlmError> {
        if file.order == 0 || file.counts.len() != file.order || file.k == 0 {
            return Err(SlmError::InvalidConfig("inconsistent model file".into()));
        }
        if !(file.discount > 0.0 && file.discount <= 1.0) {
            return Err(SlmError::InvalidConfig(format!("discount must be in (0, 1], got {}", file.discount)));
        }
        let mut levels = Vec::with_capacity(file.order);
        for (m, table) in file.counts.into_iter().enumerate() {
            let mut counts = HashMap::with_capacity(table.len());
            for (gram, c) in table {
                if gram.len() != m + 1 || c == 0 || gram.iter().any(|&u| u as usize > file.k + 1) {
                    return Err(SlmError::InvalidConfig(format!("bad {}-gram entry {gram:?}", m + 1)));
                }
                counts.insert(gram, c);
            }
            levels.push(Level::from_counts(counts));
        }
        Ok(Self { order: file.order, k: file.k, discount: file.discount, levels })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, SlmError> {
        let file: NgramLmFile = serde_json::from_str(text).map_err(|e| SlmError::InvalidConfig(e.to_string()))?;
        Self::from_file(file)
    }
}

impl UnitLm for NgramLm {
    fn vocab_size(&self) -> usize {
        self.k
    }

    fn scores_end(&self) -> bool {
        true
    }

    fn cond_logprob(&self, prefix: &[u32], next: Option<u32>) -> f64 {
        let w = next.unwrap_or(self.eos());
        self.prob(&self.history_of(prefix), w).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train(seqs: &[&[u32]], k: usize, order: usize) -> NgramLm {
        NgramLm::train(seqs.iter().copied(), k, order, 0.75).unwrap()
    }

    fn dist_sum(lm: &NgramLm, h: &[u32]) -> f64 {
        (0..lm.n_outcomes() as u32).map(|w| lm.prob(h, w)).sum()
    }

    #[test]
    fn unigram_normalizes() {
        let lm = train(&[&[0, 0, 1]], 2, 1);
        assert!((dist_sum(&lm, &[]) - 1.0).abs() < 1e-12);
        // Raw counts 2, 1, 1 (end) over 4 tokens.
        let p0 = (2.0 - 0.75) / 4.0 + 0.75 * 3.0 / 4.0 / 3.0;
        assert!((lm.prob(&[], 0) - p0).abs() < 1e-12);
    }

    #[test]
    fn alternating_corpus_bigram() {
        let seq: Vec<u32> = (0..200).map(|i| i % 2).collect();
        let lm = train(&[&seq], 2, 2);
        assert!(lm.prob(&[0], 1) >= 0.9);
    }

    #[test]
    fn all_seen_histories_normalize() {
        let lm = train(&[&[0, 1, 2, 1, 0], &[2, 2, 1], &[1]], 3, 3);
        for h in lm.seen_histories() {
            assert!((dist_sum(&lm, &h) - 1.0).abs() < 1e-12, "{h:?}");
        }
        // Unseen history backs off and still normalizes.
        assert!((dist_sum(&lm, &[2, 0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let lm = train(&[&[0, 1, 2, 1, 0], &[2, 2, 1]], 3, 3);
        let back = NgramLm::from_json(&lm.to_json()).unwrap();
        assert_eq!(back, lm);
    }

    #[test]
    fn errors() {
        let empty: [&[u32]; 0] = [];
        assert!(matches!(NgramLm::train(empty, 3, 2, 0.75), Err(SlmError::EmptyCorpus)));
        assert!(matches!(NgramLm::train([&[5u32][..]], 3, 2, 0.75), Err(SlmError::UnitOutOfRange { unit: 5, k: 3 })));
        assert!(NgramLm::train([&[0u32][..]], 3, 0, 0.75).is_err());
        assert!(NgramLm::train([&[0u32][..]], 3, 2, 1.5).is_err());
    }
}
