use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{CorpusError, FeatureArchive, Manifest};

/// Phone labels treated as silence by the ABX item extractor and the
/// clustering metrics.
pub const SILENCE_LABELS: &[&str] = &["sil", "SIL", "sp", "spn", "<sil>"];

pub fn is_silence(phone: &str) -> bool {
    SILENCE_LABELS.contains(&phone)
}

/// A phone occupying frames `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub phone: String,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Frame-level phone segmentation per utterance, at the archive frame rate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Alignment {
    utterances: Vec<(String, Vec<Segment>)>,
    index: HashMap<String, usize>,
}

impl Alignment {
    /// Adds one utterance's segments, which must tile `[0, T)` without gaps.
    pub fn insert(&mut self, utt_id: impl Into<String>, segments: Vec<Segment>) -> Result<(), CorpusError> {
        let utt_id = utt_id.into();
        if self.index.contains_key(&utt_id) {
            return Err(CorpusError::DuplicateUttId(utt_id));
        }
        let mut expected = 0;
        for seg in &segments {
            check_next(&utt_id, expected, seg, 0)?;
            expected = seg.end;
        }
        if segments.is_empty() {
            return Err(CorpusError::EmptyUtterance(utt_id));
        }
        self.index.insert(utt_id.clone(), self.utterances.len());
        self.utterances.push((utt_id, segments));
        Ok(())
    }

    pub fn get(&self, utt_id: &str) -> Option<&[Segment]> {
        self.index.get(utt_id).map(|&i| self.utterances[i].1.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Segment])> {
        self.utterances.iter().map(|(id, s)| (id.as_str(), s.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Total frame count of an utterance (end of its last segment).
    pub fn num_frames(&self, utt_id: &str) -> Option<usize> {
        self.get(utt_id).and_then(|s| s.last()).map(|s| s.end)
    }

    /// Phone label of every frame of an utterance.
    pub fn frame_labels(&self, utt_id: &str) -> Option<Vec<&str>> {
        let segs = self.get(utt_id)?;
        let mut out = Vec::with_capacity(segs.last().map_or(0, |s| s.end));
        for s in segs {
            out.extend(std::iter::repeat_n(s.phone.as_str(), s.len()));
        }
        Some(out)
    }

    /// Sorted, de-duplicated phone inventory.
    pub fn phone_set(&self) -> Vec<&str> {
        let mut phones: Vec<&str> =
            self.utterances.iter().flat_map(|(_, s)| s.iter().map(|s| s.phone.as_str())).collect();
        phones.sort_unstable();
        phones.dedup();
        phones
    }

    /// Checks that every archive utterance is aligned over exactly its frames.
    pub fn validate_against(&self, archive: &FeatureArchive) -> Result<(), CorpusError> {
        for utt in archive.utterances() {
            let n = self.num_frames(&utt.id).ok_or_else(|| CorpusError::UnknownUtt(utt.id.clone()))?;
            if n != utt.num_frames() {
                return Err(CorpusError::FrameCountMismatch {
                    utt_id: utt.id.clone(),
                    what: "alignment",
                    expected: utt.num_frames(),
                    found: n,
                });
            }
        }
        Ok(())
    }

    /// Checks that every aligned utterance appears in the manifest.
    pub fn validate_against_manifest(&self, manifest: &Manifest) -> Result<(), CorpusError> {
        for (id, _) in &self.utterances {
            if manifest.get(id).is_none() {
                return Err(CorpusError::UnknownUtt(id.clone()));
            }
        }
        Ok(())
    }

    /// Parses `utt_id phone start_frame end_frame` lines. Segments of one
    /// utterance must appear in order.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut pending: Vec<(String, Vec<Segment>)> = Vec::new();
        let mut open: HashMap<String, usize> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            let malformed = |message: String| CorpusError::Malformed { line: line_no, message };
            if fields.len() != 4 {
                return Err(malformed(format!("expected 4 fields, found {}", fields.len())));
            }
            let start: usize = fields[2].parse().map_err(|_| malformed(format!("bad start frame `{}`", fields[2])))?;
            let end: usize = fields[3].parse().map_err(|_| malformed(format!("bad end frame `{}`", fields[3])))?;
            let seg = Segment { phone: fields[1].to_string(), start, end };
            let slot = *open.entry(fields[0].to_string()).or_insert_with(|| {
                pending.push((fields[0].to_string(), Vec::new()));
                pending.len() - 1
            });
            let segs = &mut pending[slot].1;
            let expected = segs.last().map_or(0, |s| s.end);
            check_next(fields[0], expected, &seg, line_no)?;
            segs.push(seg);
        }
        let mut alignment = Alignment::default();
        for (id, segs) in pending {
            alignment.insert(id, segs)?;
        }
        Ok(alignment)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, segs) in &self.utterances {
            for s in segs {
                out.push_str(&format!("{id} {} {} {}\n", s.phone, s.start, s.end));
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        Ok(fs::write(path, self.to_text())?)
    }
}

fn check_next(utt_id: &str, expected: usize, seg: &Segment, line: usize) -> Result<(), CorpusError> {
    if seg.start > expected {
        return Err(CorpusError::AlignmentGap { line, utt_id: utt_id.to_string(), expected, found: seg.start });
    }
    if seg.start < expected {
        return Err(CorpusError::AlignmentOverlap { line, utt_id: utt_id.to_string(), expected, found: seg.start });
    }
    if seg.end <= seg.start {
        return Err(CorpusError::Malformed {
            line,
            message: format!("segment [{}, {}) of `{utt_id}` is empty", seg.start, seg.end),
        });
    }
    Ok(())
}
