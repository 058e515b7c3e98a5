//! Feature archives, utterance manifests and phone alignments.
//!
//! Also hosts the synthetic corpus generator, whose speaker, gender and phone
//! offsets are known exactly and serve as ground truth for the evaluators.

mod alignment;
mod archive;
mod manifest;
mod synth;

use thiserror::Error;

pub use alignment::{Alignment, Segment, SILENCE_LABELS, is_silence};
pub use archive::{FeatureArchive, Provenance, Utterance, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use manifest::{Gender, Manifest, ManifestRecord};
pub use synth::{
    generate_synthetic, generate_synthetic_tasks, SynthConfig, SynthTruth, SyntheticCorpus,
    SyntheticTasks,
};

/// Errors raised by corpus readers, writers and constructors.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected {expected:?}", expected = ARCHIVE_MAGIC)]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated stream while reading {0}")]
    Truncated(&'static str),
    #[error("duplicate utterance id `{0}`")]
    DuplicateUttId(String),
    #[error("utterance `{utt_id}` has dimension {found}, archive dimension is {expected}")]
    DimMismatch { utt_id: String, expected: usize, found: usize },
    #[error("utterance `{0}` has no frames")]
    EmptyUtterance(String),
    #[error("invalid archive header: {0}")]
    InvalidHeader(String),
    #[error("utterance id is not valid UTF-8")]
    InvalidUtf8,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: gap in alignment of `{utt_id}`: segment starts at {found}, previous ended at {expected}")]
    AlignmentGap { line: usize, utt_id: String, expected: usize, found: usize },
    #[error("line {line}: overlap in alignment of `{utt_id}`: segment starts at {found}, previous ended at {expected}")]
    AlignmentOverlap { line: usize, utt_id: String, expected: usize, found: usize },
    #[error("unknown utterance id `{0}`")]
    UnknownUtt(String),
    #[error("utterance `{utt_id}`: {what} has {found} frames, expected {expected}")]
    FrameCountMismatch { utt_id: String, what: &'static str, expected: usize, found: usize },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}
