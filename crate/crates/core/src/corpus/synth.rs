//! Synthetic corpus with known speaker, gender and phone structure.
//!
//! Each frame is `s_i + g_i + p_k + n`: a speaker offset constant over all of
//! a speaker's utterances, a gender offset, the vector of the phone being
//! spoken and i.i.d. Gaussian noise. Utterances are sequences of phone
//! segments whose durations are drawn uniformly from a frame range.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Alignment, CorpusError, FeatureArchive, Gender, Manifest, ManifestRecord, Provenance, Segment, Utterance};
use crate::rng::{substream, tag};
use crate::slm::{SimiItem, TaskPair};

/// Frame period of generated archives (10 ms).
pub const SYNTH_FRAME_PERIOD_US: u32 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub n_phones: usize,
    pub dim: usize,
    pub utterances_per_speaker: usize,
    pub segments_per_utterance: usize,
    pub min_frames_per_segment: usize,
    pub max_frames_per_segment: usize,
    pub sigma_speaker: f64,
    pub sigma_phone: f64,
    pub sigma_gender: f64,
    pub sigma_noise: f64,
    pub seed: u64,
    /// When non-zero, utterances are built from a lexicon of this many
    /// phone strings chained by a fixed successor rule, which gives unit
    /// language models structure to learn. Zero draws phones uniformly.
    pub lexicon_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            n_phones: 10,
            dim: 16,
            utterances_per_speaker: 20,
            segments_per_utterance: 25,
            min_frames_per_segment: 3,
            max_frames_per_segment: 10,
            sigma_speaker: 1.0,
            sigma_phone: 1.0,
            sigma_gender: 0.5,
            sigma_noise: 0.1,
            seed: 0,
            lexicon_size: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let counts = [
            ("n_speakers", self.n_speakers),
            ("n_phones", self.n_phones),
            ("dim", self.dim),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("segments_per_utterance", self.segments_per_utterance),
            ("min_frames_per_segment", self.min_frames_per_segment),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CorpusError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.max_frames_per_segment < self.min_frames_per_segment {
            return Err(CorpusError::InvalidConfig("frames_per_segment range is empty".into()));
        }
        for (name, v) in [
            ("sigma_speaker", self.sigma_speaker),
            ("sigma_phone", self.sigma_phone),
            ("sigma_gender", self.sigma_gender),
            ("sigma_noise", self.sigma_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CorpusError::InvalidConfig(format!("{name} must be a non-negative real")));
            }
        }
        if self.lexicon_size != 0 && self.lexicon_size < 5 {
            return Err(CorpusError::InvalidConfig("lexicon_size must be 0 or >= 5".into()));
        }
        if self.lexicon_size != 0 && self.n_phones < 3 {
            return Err(CorpusError::InvalidConfig("a lexicon needs at least 3 phones".into()));
        }
        Ok(())
    }

    pub fn speaker_id(&self, i: usize) -> String {
        format!("spk{i:03}")
    }

    pub fn phone_label(&self, k: usize) -> String {
        format!("ph{k:02}")
    }

    pub fn gender_of(&self, speaker: usize) -> Gender {
        if speaker % 2 == 0 {
            Gender::F
        } else {
            Gender::M
        }
    }
}

/// The latent vectors the corpus was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub speaker_vectors: Array2<f64>,
    /// Row 0 is the F offset, row 1 the M offset.
    pub gender_vectors: Array2<f64>,
    pub phone_vectors: Array2<f64>,
    /// Phone index strings of the lexicon (empty without one).
    pub lexicon: Vec<Vec<usize>>,
}

impl SynthTruth {
    /// `s_i + g_i` for a speaker.
    pub fn speaker_offset(&self, config: &SynthConfig, speaker: usize) -> Vec<f64> {
        let g = match config.gender_of(speaker) {
            Gender::F => 0,
            Gender::M => 1,
        };
        self.speaker_vectors
            .row(speaker)
            .iter()
            .zip(self.gender_vectors.row(g).iter())
            .map(|(s, g)| s + g)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub archive: FeatureArchive,
    pub manifest: Manifest,
    pub alignment: Alignment,
    pub truth: SynthTruth,
    /// Phone index sequence (one entry per segment) of every utterance.
    pub phone_sequences: Vec<Vec<usize>>,
}

/// Stimuli for the unit language-model tasks, rendered with corpus speakers.
#[derive(Debug, Clone)]
pub struct SyntheticTasks {
    pub archive: FeatureArchive,
    pub manifest: Manifest,
    pub alignment: Alignment,
    pub lexical: Vec<TaskPair>,
    pub syntactic: Vec<TaskPair>,
    pub simi: Vec<SimiItem>,
}

fn gaussian_rows(seed: u64, stream: u64, rows: usize, dim: usize, sigma: f64) -> Array2<f64> {
    let mut out = Array2::zeros((rows, dim));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let mut rng = substream(seed, stream, i as u64);
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = sigma * z;
        }
    }
    out
}

fn build_truth(config: &SynthConfig) -> SynthTruth {
    let lexicon = if config.lexicon_size > 0 { build_lexicon(config) } else { Vec::new() };
    SynthTruth {
        speaker_vectors: gaussian_rows(config.seed, tag::SPEAKER, config.n_speakers, config.dim, config.sigma_speaker),
        gender_vectors: gaussian_rows(config.seed, tag::GENDER, 2, config.dim, config.sigma_gender),
        phone_vectors: gaussian_rows(config.seed, tag::PHONE, config.n_phones, config.dim, config.sigma_phone),
        lexicon,
    }
}

fn build_lexicon(config: &SynthConfig) -> Vec<Vec<usize>> {
    let mut rng = substream(config.seed, tag::LEXICON, 0);
    let mut words: Vec<Vec<usize>> = Vec::with_capacity(config.lexicon_size);
    let mut attempts = 0usize;
    while words.len() < config.lexicon_size {
        attempts += 1;
        let len = rng.random_range(3..=5);
        let word = random_phones(&mut rng, config.n_phones, len, None);
        // Small inventories cannot always supply enough distinct words.
        if !words.contains(&word) || attempts > 100 * config.lexicon_size {
            words.push(word);
        }
    }
    words
}

/// Phone indices with no immediate repetition (when the inventory allows).
fn random_phones<R: Rng>(rng: &mut R, n_phones: usize, len: usize, mut prev: Option<usize>) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let p = match prev {
            Some(p) if n_phones > 1 => {
                let q = rng.random_range(0..n_phones - 1);
                if q >= p { q + 1 } else { q }
            }
            _ => rng.random_range(0..n_phones),
        };
        out.push(p);
        prev = Some(p);
    }
    out
}

fn successor<R: Rng>(rng: &mut R, word: usize, lexicon_size: usize) -> usize {
    (word + 1 + rng.random_range(0..2)) % lexicon_size
}

fn utterance_phones<R: Rng>(rng: &mut R, config: &SynthConfig, truth: &SynthTruth) -> Vec<usize> {
    let n = config.segments_per_utterance;
    if truth.lexicon.is_empty() {
        return random_phones(rng, config.n_phones, n, None);
    }
    let mut phones = Vec::with_capacity(n + 5);
    let mut word = rng.random_range(0..truth.lexicon.len());
    while phones.len() < n {
        phones.extend_from_slice(&truth.lexicon[word]);
        word = successor(rng, word, truth.lexicon.len());
    }
    phones.truncate(n);
    phones
}

/// Renders a phone sequence for one speaker: durations, frames and segments.
fn render<R: Rng>(
    rng: &mut R,
    config: &SynthConfig,
    truth: &SynthTruth,
    speaker: usize,
    phones: &[usize],
) -> (Array2<f32>, Vec<Segment>) {
    let offset = truth.speaker_offset(config, speaker);
    let mut segments = Vec::with_capacity(phones.len());
    let mut start = 0;
    for &p in phones {
        let len = rng.random_range(config.min_frames_per_segment..=config.max_frames_per_segment);
        segments.push(Segment { phone: config.phone_label(p), start, end: start + len });
        start += len;
    }
    let mut frames = Array2::<f32>::zeros((start, config.dim));
    for (seg, &p) in segments.iter().zip(phones) {
        let phone = truth.phone_vectors.row(p);
        for t in seg.start..seg.end {
            for j in 0..config.dim {
                let z: f64 = rng.sample(StandardNormal);
                frames[[t, j]] = (offset[j] + phone[j] + config.sigma_noise * z) as f32;
            }
        }
    }
    (frames, segments)
}

/// Generates a corpus; output depends only on `config`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticCorpus, CorpusError> {
    config.validate()?;
    let truth = build_truth(config);
    let n_utts = config.n_speakers * config.utterances_per_speaker;
    let rendered: Vec<_> = (0..n_utts)
        .into_par_iter()
        .map(|u| {
            let speaker = u / config.utterances_per_speaker;
            let mut rng = substream(config.seed, tag::UTTERANCE, u as u64);
            let phones = utterance_phones(&mut rng, config, &truth);
            let (frames, segments) = render(&mut rng, config, &truth, speaker, &phones);
            (speaker, u % config.utterances_per_speaker, phones, frames, segments)
        })
        .collect();

    let mut archive = FeatureArchive::new(config.dim, SYNTH_FRAME_PERIOD_US)?;
    let mut manifest = Manifest::default();
    let mut alignment = Alignment::default();
    let mut phone_sequences = Vec::with_capacity(n_utts);
    for (speaker, local, phones, frames, segments) in rendered {
        let speaker_id = config.speaker_id(speaker);
        let utt_id = format!("{speaker_id}_u{local:04}");
        manifest.push(ManifestRecord {
            utt_id: utt_id.clone(),
            speaker_id,
            gender: config.gender_of(speaker),
            num_frames: frames.nrows(),
        })?;
        alignment.insert(utt_id.clone(), segments)?;
        archive.push(Utterance::new(utt_id, frames))?;
        phone_sequences.push(phones);
    }
    Ok(SyntheticCorpus {
        archive: archive.with_provenance(Provenance::Raw),
        manifest,
        alignment,
        truth,
        phone_sequences,
    })
}

/// Generates lexical, syntactic and semantic stimuli for a lexicon corpus.
///
/// * lexical: a lexicon word versus a phone permutation of it that is not a word;
/// * syntactic: three words obeying the successor rule versus the same words reversed;
/// * semantic: word pairs scored by the Jaccard overlap of their phone sets.
pub fn generate_synthetic_tasks(
    config: &SynthConfig,
    truth: &SynthTruth,
    n_lexical: usize,
    n_syntactic: usize,
    n_simi: usize,
) -> Result<SyntheticTasks, CorpusError> {
    config.validate()?;
    if truth.lexicon.is_empty() {
        return Err(CorpusError::InvalidConfig("task stimuli need lexicon_size > 0".into()));
    }
    let lexicon = &truth.lexicon;
    let l = lexicon.len();
    let mut rng = substream(config.seed, tag::STIMULUS, 0);

    // (utt_id, speaker, phones)
    let mut stimuli: Vec<(String, usize, Vec<usize>)> = Vec::new();
    let mut lexical = Vec::with_capacity(n_lexical);
    for i in 0..n_lexical {
        let w = rng.random_range(0..l);
        let word = lexicon[w].clone();
        let nonword = permuted_nonword(&mut rng, &word, lexicon);
        let speaker = i % config.n_speakers;
        let (pos, neg) = (format!("lex{i:05}_w"), format!("lex{i:05}_nw"));
        stimuli.push((pos.clone(), speaker, word));
        stimuli.push((neg.clone(), speaker, nonword));
        lexical.push(TaskPair { pair_id: format!("lex{i:05}"), pos_utt_id: pos, neg_utt_id: neg });
    }
    let mut syntactic = Vec::with_capacity(n_syntactic);
    for i in 0..n_syntactic {
        let w0 = rng.random_range(0..l);
        let w1 = successor(&mut rng, w0, l);
        let w2 = successor(&mut rng, w1, l);
        let speaker = i % config.n_speakers;
        let good: Vec<usize> = [w0, w1, w2].iter().flat_map(|&w| lexicon[w].iter().copied()).collect();
        let bad: Vec<usize> = [w2, w1, w0].iter().flat_map(|&w| lexicon[w].iter().copied()).collect();
        let (pos, neg) = (format!("syn{i:05}_g"), format!("syn{i:05}_u"));
        stimuli.push((pos.clone(), speaker, good));
        stimuli.push((neg.clone(), speaker, bad));
        syntactic.push(TaskPair { pair_id: format!("syn{i:05}"), pos_utt_id: pos, neg_utt_id: neg });
    }
    let mut simi = Vec::with_capacity(n_simi);
    for i in 0..n_simi {
        let a = rng.random_range(0..l);
        let b = (a + 1 + rng.random_range(0..l - 1)) % l;
        let speaker = i % config.n_speakers;
        let (ua, ub) = (format!("sim{i:05}_a"), format!("sim{i:05}_b"));
        stimuli.push((ua.clone(), speaker, lexicon[a].clone()));
        stimuli.push((ub.clone(), (speaker + 1) % config.n_speakers, lexicon[b].clone()));
        simi.push(SimiItem {
            pair_id: format!("sim{i:05}"),
            utt_a: ua,
            utt_b: ub,
            human_score: jaccard(&lexicon[a], &lexicon[b]),
        });
    }

    let rendered: Vec<_> = stimuli
        .par_iter()
        .enumerate()
        .map(|(i, (_, speaker, phones))| {
            let mut rng = substream(config.seed, tag::STIMULUS, 1 + i as u64);
            render(&mut rng, config, truth, *speaker, phones)
        })
        .collect();
    let mut archive = FeatureArchive::new(config.dim, SYNTH_FRAME_PERIOD_US)?;
    let mut manifest = Manifest::default();
    let mut alignment = Alignment::default();
    for ((utt_id, speaker, _), (frames, segments)) in stimuli.into_iter().zip(rendered) {
        manifest.push(ManifestRecord {
            utt_id: utt_id.clone(),
            speaker_id: config.speaker_id(speaker),
            gender: config.gender_of(speaker),
            num_frames: frames.nrows(),
        })?;
        alignment.insert(utt_id.clone(), segments)?;
        archive.push(Utterance::new(utt_id, frames))?;
    }
    Ok(SyntheticTasks {
        archive: archive.with_provenance(Provenance::Raw),
        manifest,
        alignment,
        lexical,
        syntactic,
        simi,
    })
}

fn permuted_nonword<R: Rng>(rng: &mut R, word: &[usize], lexicon: &[Vec<usize>]) -> Vec<usize> {
    let mut candidate = word.to_vec();
    for _ in 0..50 {
        candidate.shuffle(rng);
        if !lexicon.contains(&candidate) {
            return candidate;
        }
    }
    // Fall back to replacing the first phone.
    let mut out = word.to_vec();
    out[0] = (out[0] + 1) % (word.iter().max().copied().unwrap_or(0) + 2);
    out
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let mut sa = a.to_vec();
    sa.sort_unstable();
    sa.dedup();
    let mut sb = b.to_vec();
    sb.sort_unstable();
    sb.dedup();
    let inter = sa.iter().filter(|p| sb.contains(p)).count();
    let union = sa.len() + sb.len() - inter;
    inter as f64 / union as f64
}
