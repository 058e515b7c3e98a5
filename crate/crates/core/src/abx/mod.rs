//! ABX phone discrimination over triphone items.
//!
//! An ABX triple asks whether X, an instance of triphone `a`, is closer to
//! another instance A of `a` than to an instance B of a minimal-pair triphone
//! `b` (same left and right phones, different center). Distances are DTW
//! averages of frame-wise cosine distances.
//!
//! Cells group triples by triphone pair and speaker context: `(spk)` in the
//! within-speaker test, `(spk_AB, spk_X)` in the across-speaker test. The
//! reported error is the mean over speaker contexts per ordered triphone
//! pair, averaged with the reversed pair, then averaged over pairs.

mod dtw;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{is_silence, Alignment, FeatureArchive, Manifest};
use crate::rng::{fnv1a, substream, tag};

pub use dtw::{dtw_distance, dtw_normed, NormedFrames};

#[derive(Debug, Error)]
pub enum AbxError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("utterance `{0}` not found in the manifest")]
    UnknownSpeaker(String),
    #[error("utterance `{0}` has no features")]
    MissingFeatures(String),
    #[error("item span [{start}, {end}) exceeds the {frames} frames of `{utt_id}`")]
    SpanOutOfBounds { utt_id: String, start: usize, end: usize, frames: usize },
    #[error("no valid ABX cells ({skipped} candidate cells skipped)")]
    NoValidCells { skipped: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbxMode {
    Within,
    Across,
}

impl std::str::FromStr for AbxMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "within" => Ok(AbxMode::Within),
            "across" => Ok(AbxMode::Across),
            other => Err(format!("unknown ABX mode `{other}`")),
        }
    }
}

/// One triphone token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbxItem {
    pub utt_id: String,
    pub speaker_id: String,
    pub left: String,
    pub center: String,
    pub right: String,
    /// Frames `[start, end)` covering all three phones.
    pub start: usize,
    pub end: usize,
}

type Triphone = (String, String, String);

impl AbxItem {
    fn triphone(&self) -> Triphone {
        (self.left.clone(), self.center.clone(), self.right.clone())
    }
}

/// One item per window of three consecutive segments, skipping windows whose
/// center phone is silence.
pub fn extract_items(alignment: &Alignment, manifest: &Manifest) -> Result<Vec<AbxItem>, AbxError> {
    let mut items = Vec::new();
    for (utt_id, segs) in alignment.iter() {
        let speaker = &manifest.get(utt_id).ok_or_else(|| AbxError::UnknownSpeaker(utt_id.to_string()))?.speaker_id;
        for w in segs.windows(3) {
            if is_silence(&w[1].phone) {
                continue;
            }
            items.push(AbxItem {
                utt_id: utt_id.to_string(),
                speaker_id: speaker.clone(),
                left: w[0].phone.clone(),
                center: w[1].phone.clone(),
                right: w[2].phone.clone(),
                start: w[0].start,
                end: w[2].end,
            });
        }
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbxConfig {
    pub mode: AbxMode,
    /// Maximum X instances per across-speaker cell.
    pub x_cap: usize,
    pub seed: u64,
}

impl Default for AbxConfig {
    fn default() -> Self {
        Self { mode: AbxMode::Within, x_cap: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbxCell {
    pub triphone_a: [String; 3],
    pub triphone_b: [String; 3],
    pub speaker_ab: String,
    pub speaker_x: String,
    pub error: f64,
    pub n_triples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbxReport {
    pub mode: AbxMode,
    pub error_rate: f64,
    pub n_cells: usize,
    pub n_triples: usize,
    /// Unordered triphone pairs contributing to the error rate.
    pub n_pairs: usize,
    pub skipped_cells: usize,
    pub x_cap: usize,
    pub seed: u64,
    pub cells: Vec<AbxCell>,
}

impl AbxReport {
    /// Error rate recomputed from the per-cell breakdown.
    pub fn recompute_error_rate(&self) -> Option<f64> {
        aggregate(&self.cells).map(|(e, _)| e)
    }

    /// The report without its per-cell breakdown.
    pub fn summary(&self) -> AbxReport {
        AbxReport { cells: Vec::new(), ..self.clone() }
    }
}

/// Mean over speaker contexts, then symmetrized over pair direction, then
/// mean over unordered pairs. Returns the error and the number of pairs.
fn aggregate(cells: &[AbxCell]) -> Option<(f64, usize)> {
    let mut by_pair: BTreeMap<(&[String; 3], &[String; 3]), (f64, usize)> = BTreeMap::new();
    for c in cells {
        let e = by_pair.entry((&c.triphone_a, &c.triphone_b)).or_insert((0.0, 0));
        e.0 += c.error;
        e.1 += 1;
    }
    let mut unordered: BTreeMap<(&[String; 3], &[String; 3]), (f64, usize)> = BTreeMap::new();
    for ((a, b), (sum, n)) in by_pair {
        let key = if a <= b { (a, b) } else { (b, a) };
        let e = unordered.entry(key).or_insert((0.0, 0));
        e.0 += sum / n as f64;
        e.1 += 1;
    }
    if unordered.is_empty() {
        return None;
    }
    let n_pairs = unordered.len();
    let total: f64 = unordered.values().map(|(s, n)| s / *n as f64).sum();
    Some((total / n_pairs as f64, n_pairs))
}

struct CellSpec {
    a: usize,
    b: usize,
    speaker_ab: usize,
    speaker_x: usize,
    a_items: Vec<usize>,
    b_items: Vec<usize>,
    x_items: Vec<usize>,
}

/// Scores items against their features and aggregates the error rate.
pub fn abx_score(items: &[AbxItem], features: &FeatureArchive, config: &AbxConfig) -> Result<AbxReport, AbxError> {
    let normed: Vec<NormedFrames> = items
        .par_iter()
        .map(|it| {
            let utt = features.get(&it.utt_id).ok_or_else(|| AbxError::MissingFeatures(it.utt_id.clone()))?;
            if it.end > utt.num_frames() || it.end <= it.start {
                return Err(AbxError::SpanOutOfBounds {
                    utt_id: it.utt_id.clone(),
                    start: it.start,
                    end: it.end,
                    frames: utt.num_frames(),
                });
            }
            Ok(NormedFrames::new(utt.frames.slice(ndarray::s![it.start..it.end, ..])))
        })
        .collect::<Result<_, _>>()?;

    // Interned triphones and speakers, in sorted order.
    let triphones: Vec<Triphone> = items.iter().map(AbxItem::triphone).collect::<BTreeSet<_>>().into_iter().collect();
    let speakers: Vec<&str> = items.iter().map(|i| i.speaker_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let tri_id = |t: &Triphone| triphones.binary_search(t).expect("interned");
    let spk_id = |s: &str| speakers.binary_search(&s).expect("interned");

    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut spk_of_tri: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        let (t, s) = (tri_id(&it.triphone()), spk_id(&it.speaker_id));
        groups.entry((t, s)).or_default().push(i);
        spk_of_tri.entry(t).or_default().insert(s);
    }
    let mut by_context: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (t, tp) in triphones.iter().enumerate() {
        by_context.entry((tp.0.as_str(), tp.2.as_str())).or_default().push(t);
    }

    let mut specs = Vec::new();
    let mut skipped = 0usize;
    for centers in by_context.values() {
        for &a in centers {
            for &b in centers {
                if a == b {
                    continue;
                }
                let (spk_a, spk_b) = (&spk_of_tri[&a], &spk_of_tri[&b]);
                match config.mode {
                    AbxMode::Within => {
                        for &s in spk_a.intersection(spk_b) {
                            let a_items = &groups[&(a, s)];
                            if a_items.len() < 2 {
                                skipped += 1;
                                continue;
                            }
                            specs.push(CellSpec {
                                a,
                                b,
                                speaker_ab: s,
                                speaker_x: s,
                                a_items: a_items.clone(),
                                b_items: groups[&(b, s)].clone(),
                                x_items: a_items.clone(),
                            });
                        }
                    }
                    AbxMode::Across => {
                        for &s in spk_b {
                            for &sx in spk_a {
                                if sx == s {
                                    continue;
                                }
                                let Some(a_items) = groups.get(&(a, s)) else {
                                    skipped += 1;
                                    continue;
                                };
                                let mut x_items = groups[&(a, sx)].clone();
                                if x_items.len() > config.x_cap {
                                    let key = format!("{a}|{b}|{s}|{sx}");
                                    let mut rng = substream(config.seed, tag::ABX, fnv1a(key.as_bytes()));
                                    x_items.shuffle(&mut rng);
                                    x_items.truncate(config.x_cap);
                                    x_items.sort_unstable();
                                }
                                specs.push(CellSpec {
                                    a,
                                    b,
                                    speaker_ab: s,
                                    speaker_x: sx,
                                    a_items: a_items.clone(),
                                    b_items: groups[&(b, s)].clone(),
                                    x_items,
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    let to_array = |t: &Triphone| [t.0.clone(), t.1.clone(), t.2.clone()];
    let cells: Vec<AbxCell> = specs
        .par_iter()
        .map(|spec| {
            let (error, n_triples) = score_cell(spec, &normed);
            AbxCell {
                triphone_a: to_array(&triphones[spec.a]),
                triphone_b: to_array(&triphones[spec.b]),
                speaker_ab: speakers[spec.speaker_ab].to_string(),
                speaker_x: speakers[spec.speaker_x].to_string(),
                error,
                n_triples,
            }
        })
        .filter(|c| c.n_triples > 0)
        .collect();

    let (error_rate, n_pairs) = aggregate(&cells).ok_or(AbxError::NoValidCells { skipped })?;
    Ok(AbxReport {
        mode: config.mode,
        error_rate,
        n_cells: cells.len(),
        n_triples: cells.iter().map(|c| c.n_triples).sum(),
        n_pairs,
        skipped_cells: skipped,
        x_cap: config.x_cap,
        seed: config.seed,
        cells,
    })
}

/// Mean triple score of a cell: 1 when X is closer to B, 0.5 on ties.
fn score_cell(spec: &CellSpec, normed: &[NormedFrames]) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0usize;
    for &x in &spec.x_items {
        let d_bx: Vec<f64> = spec.b_items.iter().map(|&b| dtw_normed(&normed[b], &normed[x])).collect();
        for &a in &spec.a_items {
            if a == x {
                continue;
            }
            let d_ax = dtw_normed(&normed[a], &normed[x]);
            for &d_b in &d_bx {
                total += if d_ax > d_b {
                    1.0
                } else if d_ax == d_b {
                    0.5
                } else {
                    0.0
                };
                count += 1;
            }
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (total / count as f64, count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Segment, Utterance};
    use ndarray::Array2;

    fn alignment_of(utts: &[(&str, &[&str])]) -> Alignment {
        let mut a = Alignment::default();
        for (id, phones) in utts {
            let segs = phones
                .iter()
                .enumerate()
                .map(|(i, p)| Segment { phone: p.to_string(), start: 2 * i, end: 2 * i + 2 })
                .collect();
            a.insert(*id, segs).unwrap();
        }
        a
    }

    fn manifest_of(pairs: &[(&str, &str)]) -> Manifest {
        let mut text = String::from("utt_id,speaker_id,gender,num_frames\n");
        for (u, s) in pairs {
            text.push_str(&format!("{u},{s},F,0\n"));
        }
        Manifest::parse(&text).unwrap()
    }

    #[test]
    fn windowing() {
        let a = alignment_of(&[("u", &["sil", "b", "eh", "g", "sil"])]);
        let items = extract_items(&a, &manifest_of(&[("u", "s")])).unwrap();
        let tri: Vec<_> = items.iter().map(|i| (i.left.as_str(), i.center.as_str(), i.right.as_str())).collect();
        assert_eq!(tri, vec![("sil", "b", "eh"), ("b", "eh", "g"), ("eh", "g", "sil")]);
        assert_eq!((items[1].start, items[1].end), (2, 8));
    }

    #[test]
    fn short_utterance_and_silence_center() {
        let a = alignment_of(&[("u", &["b", "eh"]), ("v", &["b", "sil", "g"])]);
        let items = extract_items(&a, &manifest_of(&[("u", "s"), ("v", "s")])).unwrap();
        assert!(items.is_empty());
    }

    /// Features equal to the one-hot code of each frame's phone.
    fn phone_onehot_archive(alignment: &Alignment) -> FeatureArchive {
        let phones = alignment.phone_set();
        let utts = alignment.iter().map(|(id, _)| {
            let labels = alignment.frame_labels(id).unwrap();
            let mut m = Array2::<f32>::zeros((labels.len(), phones.len()));
            for (t, l) in labels.iter().enumerate() {
                m[[t, phones.binary_search(l).unwrap()]] = 1.0;
            }
            Utterance::new(id, m)
        });
        FeatureArchive::from_utterances(phones.len(), 10_000, utts).unwrap()
    }

    #[test]
    fn onehot_phone_features_give_zero_error() {
        let a = alignment_of(&[
            ("u1", &["b", "eh", "g"]),
            ("u2", &["b", "ae", "g"]),
            ("u3", &["b", "eh", "g"]),
            ("u4", &["b", "ae", "g"]),
            ("v1", &["b", "eh", "g"]),
            ("v2", &["b", "ae", "g"]),
        ]);
        let m = manifest_of(&[("u1", "s1"), ("u2", "s1"), ("u3", "s1"), ("u4", "s1"), ("v1", "s2"), ("v2", "s2")]);
        let items = extract_items(&a, &m).unwrap();
        let feats = phone_onehot_archive(&a);
        for mode in [AbxMode::Within, AbxMode::Across] {
            let r = abx_score(&items, &feats, &AbxConfig { mode, ..Default::default() }).unwrap();
            assert_eq!(r.error_rate, 0.0, "{mode:?}");
            assert_eq!(r.recompute_error_rate(), Some(r.error_rate));
        }
        let within = abx_score(&items, &feats, &AbxConfig::default()).unwrap();
        // Speaker s2 has single instances: its two candidate cells are skipped.
        assert_eq!(within.n_cells, 2);
        assert_eq!(within.skipped_cells, 2);
        // 2 (a, x) orderings x 2 b instances per cell.
        assert!(within.cells.iter().all(|c| c.n_triples == 4));
    }

    #[test]
    fn no_cells_is_an_error() {
        let a = alignment_of(&[("u1", &["b", "eh", "g"])]);
        let items = extract_items(&a, &manifest_of(&[("u1", "s")])).unwrap();
        let feats = phone_onehot_archive(&a);
        assert!(matches!(abx_score(&items, &feats, &AbxConfig::default()), Err(AbxError::NoValidCells { .. })));
    }

    #[test]
    fn aggregation_hierarchy() {
        let t = |c: &str| ["l".to_string(), c.to_string(), "r".to_string()];
        let cell = |a: &str, b: &str, s: &str, e: f64| AbxCell {
            triphone_a: t(a),
            triphone_b: t(b),
            speaker_ab: s.into(),
            speaker_x: s.into(),
            error: e,
            n_triples: 1,
        };
        // (x,y): speakers average to 0.5; (y,x): 0.1 -> pair 0.3.
        // (x,z): 1.0 only one direction -> pair 1.0. Overall (0.3 + 1.0) / 2.
        let cells = vec![
            cell("x", "y", "s1", 0.0),
            cell("x", "y", "s2", 1.0),
            cell("y", "x", "s1", 0.1),
            cell("x", "z", "s1", 1.0),
        ];
        let (e, n) = aggregate(&cells).unwrap();
        assert_eq!(n, 2);
        assert!((e - 0.65).abs() < 1e-12);
    }
}
