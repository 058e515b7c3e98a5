//! Acoustic unit discovery: K-means codebooks over feature frames,
//! quantization to discrete unit sequences, one-hot encoding and clustering
//! quality against phone alignments.

mod kmeans;
mod metrics;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{is_silence, Alignment, CorpusError, FeatureArchive, Provenance, Utterance};

pub use kmeans::{kmeans_fit, KMeansConfig, KMeansFit};
pub use metrics::{
    adjusted_mutual_information, adjusted_rand_index, clustering_metrics, expected_mutual_information,
    homogeneity_completeness, mutual_information, ClusterMetricsReport, Contingency,
};

pub const CODEBOOK_MAGIC: [u8; 4] = *b"ZRCB";
pub const CODEBOOK_VERSION: u32 = 1;
const FLAG_STANDARDIZED: u32 = 1;

#[derive(Debug, Error)]
pub enum AudError {
    #[error("need at least k={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: codebook has {expected}, features have {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("codebook was fit on {codebook} features but the archive is {archive}")]
    ProvenanceMismatch { codebook: &'static str, archive: &'static str },
    #[error("unit {unit} out of range for K={k}")]
    UnitOutOfRange { unit: u32, k: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no alignment for utterance `{0}`")]
    MissingAlignment(String),
    #[error("empty input")]
    Empty,
    #[error("bad codebook magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported codebook version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated codebook stream")]
    Truncated,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// K centroids in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Array2<f32>,
    pub standardized_input: bool,
    /// Fitting seed; not stored in the file format.
    pub seed: Option<u64>,
}

impl Codebook {
    pub fn new(centroids: Array2<f32>, standardized_input: bool, seed: Option<u64>) -> Result<Self, AudError> {
        if centroids.nrows() == 0 {
            return Err(AudError::InvalidConfig("codebook needs K >= 1".into()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(AudError::NonFinite);
        }
        let centroids = centroids.as_standard_layout().into_owned();
        Ok(Self { centroids, standardized_input, seed })
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn centroids(&self) -> &Array2<f32> {
        &self.centroids
    }

    /// Nearest centroid of one frame; ties go to the lowest index.
    pub fn assign(&self, frame: &[f32]) -> u32 {
        let mut best = (0u32, f64::INFINITY);
        for (c, row) in self.centroids.rows().into_iter().enumerate() {
            let d: f64 = row
                .iter()
                .zip(frame)
                .map(|(&a, &b)| {
                    let diff = f64::from(a) - f64::from(b);
                    diff * diff
                })
                .sum();
            if d < best.1 {
                best = (c as u32, d);
            }
        }
        best.0
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), AudError> {
        w.write_all(&CODEBOOK_MAGIC)?;
        w.write_all(&CODEBOOK_VERSION.to_le_bytes())?;
        w.write_all(&(self.k() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        let flags = if self.standardized_input { FLAG_STANDARDIZED } else { 0 };
        w.write_all(&flags.to_le_bytes())?;
        for v in self.centroids.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, AudError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let word = |i: usize| -> Result<u32, AudError> {
            bytes.get(i..i + 4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes"))).ok_or(AudError::Truncated)
        };
        let magic: [u8; 4] = bytes.get(0..4).ok_or(AudError::Truncated)?.try_into().expect("4 bytes");
        if magic != CODEBOOK_MAGIC {
            return Err(AudError::BadMagic(magic));
        }
        let version = word(4)?;
        if version != CODEBOOK_VERSION {
            return Err(AudError::UnsupportedVersion(version));
        }
        let (k, dim, flags) = (word(8)? as usize, word(12)? as usize, word(16)?);
        let body = bytes.get(20..20 + k * dim * 4).ok_or(AudError::Truncated)?;
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let centroids = Array2::from_shape_vec((k, dim), data).expect("shape");
        Self::new(centroids, flags & FLAG_STANDARDIZED != 0, None)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AudError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AudError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Discrete unit id per frame of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSequence {
    pub utt_id: String,
    pub units: Vec<u32>,
}

fn provenance_name(p: Provenance) -> &'static str {
    match p {
        Provenance::Unknown => "unknown",
        Provenance::Raw => "raw",
        Provenance::Standardized => "standardized",
    }
}

/// Maps every frame of every utterance to its nearest centroid.
///
/// Fails if the archive's known provenance disagrees with the features the
/// codebook was fit on. Archives of unknown provenance are accepted.
pub fn quantize(archive: &FeatureArchive, codebook: &Codebook) -> Result<Vec<UnitSequence>, AudError> {
    if archive.dim() != codebook.dim() {
        return Err(AudError::DimMismatch { expected: codebook.dim(), found: archive.dim() });
    }
    let expected = if codebook.standardized_input { Provenance::Standardized } else { Provenance::Raw };
    if archive.provenance() != Provenance::Unknown && archive.provenance() != expected {
        return Err(AudError::ProvenanceMismatch {
            codebook: provenance_name(expected),
            archive: provenance_name(archive.provenance()),
        });
    }
    Ok(archive
        .utterances()
        .par_iter()
        .map(|utt| UnitSequence {
            utt_id: utt.id.clone(),
            units: (0..utt.num_frames()).map(|t| codebook.assign(utt.frame(t))).collect(),
        })
        .collect())
}

/// `T x k` matrix whose row t is the standard basis vector of `units[t]`.
pub fn one_hot(units: &[u32], k: usize) -> Result<Array2<f32>, AudError> {
    let mut out = Array2::zeros((units.len(), k));
    for (t, &u) in units.iter().enumerate() {
        if u as usize >= k {
            return Err(AudError::UnitOutOfRange { unit: u, k });
        }
        out[[t, u as usize]] = 1.0;
    }
    Ok(out)
}

/// One-hot archive of unit sequences, for ABX over discrete codes.
pub fn one_hot_archive(seqs: &[UnitSequence], k: usize, frame_period_us: u32) -> Result<FeatureArchive, AudError> {
    let utts = seqs
        .iter()
        .map(|s| Ok(Utterance::new(s.utt_id.clone(), one_hot(&s.units, k)?)))
        .collect::<Result<Vec<_>, AudError>>()?;
    Ok(FeatureArchive::from_utterances(k, frame_period_us, utts)?)
}

/// `(unit, phone)` per frame of one utterance.
pub fn frame_pairs<'a>(
    units: &[u32],
    phones: &[&'a str],
    exclude_silence: bool,
) -> Result<Vec<(u32, &'a str)>, AudError> {
    if units.len() != phones.len() {
        return Err(AudError::LengthMismatch { left: units.len(), right: phones.len() });
    }
    Ok(units
        .iter()
        .zip(phones)
        .filter(|(_, p)| !(exclude_silence && is_silence(p)))
        .map(|(&u, &p)| (u, p))
        .collect())
}

/// Clustering metrics of unit sequences against the phone alignment,
/// pooled over all utterances.
pub fn corpus_cluster_metrics(
    seqs: &[UnitSequence],
    alignment: &Alignment,
    exclude_silence: bool,
) -> Result<ClusterMetricsReport, AudError> {
    let mut phones: Vec<&str> = Vec::new();
    let mut units: Vec<u32> = Vec::new();
    for s in seqs {
        let labels = alignment.frame_labels(&s.utt_id).ok_or_else(|| AudError::MissingAlignment(s.utt_id.clone()))?;
        for (u, p) in frame_pairs(&s.units, &labels, exclude_silence)? {
            units.push(u);
            phones.push(p);
        }
    }
    clustering_metrics(&phones, &units)
}

pub fn units_to_text(seqs: &[UnitSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&s.utt_id);
        for u in &s.units {
            out.push(' ');
            out.push_str(&u.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn parse_units(text: &str) -> Result<Vec<UnitSequence>, AudError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(utt_id) = fields.next() else { continue };
        let units = fields
            .map(|f| f.parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| AudError::Malformed { line: i + 1, message: format!("bad unit: {e}") })?;
        out.push(UnitSequence { utt_id: utt_id.to_string(), units });
    }
    Ok(out)
}

pub fn save_units(seqs: &[UnitSequence], path: impl AsRef<Path>) -> Result<(), AudError> {
    Ok(fs::write(path, units_to_text(seqs))?)
}

pub fn load_units(path: impl AsRef<Path>) -> Result<Vec<UnitSequence>, AudError> {
    parse_units(&fs::read_to_string(path)?)
}

/// Frames of the given utterances stacked into one matrix.
pub fn stack_frames<'a>(archive: &FeatureArchive, ids: impl IntoIterator<Item = &'a str>) -> Result<Array2<f32>, AudError> {
    let mut data = Vec::new();
    let mut n = 0;
    for id in ids {
        let utt = archive.get(id).ok_or_else(|| CorpusError::UnknownUtt(id.to_string()))?;
        data.extend_from_slice(utt.frames.as_slice().expect("standard layout"));
        n += utt.num_frames();
    }
    Ok(Array2::from_shape_vec((n, archive.dim()), data).expect("shape"))
}

/// Fits a codebook; the provenance flag is copied from the archive.
pub fn fit_codebook(frames: ArrayView2<'_, f32>, standardized: bool, config: &KMeansConfig) -> Result<KMeansFit, AudError> {
    let mut fit = kmeans_fit(frames, config)?;
    fit.codebook.standardized_input = standardized;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn archive(frames: Array2<f32>, p: Provenance) -> FeatureArchive {
        FeatureArchive::from_utterances(frames.ncols(), 10_000, [Utterance::new("u", frames)]).unwrap().with_provenance(p)
    }

    #[test]
    fn quantize_nearest() {
        let cb = Codebook::new(array![[0.0f32], [10.0]], false, None).unwrap();
        let q = quantize(&archive(array![[1.0f32], [9.0]], Provenance::Raw), &cb).unwrap();
        assert_eq!(q[0].units, vec![0, 1]);
    }

    #[test]
    fn quantize_tie_goes_to_lowest_index() {
        let cb = Codebook::new(array![[100.0f32], [100.0], [-1.0], [50.0], [50.0], [1.0]], false, None).unwrap();
        let q = quantize(&archive(array![[0.0f32]], Provenance::Unknown), &cb).unwrap();
        assert_eq!(q[0].units, vec![2]);
    }

    #[test]
    fn quantize_checks_dim_and_provenance() {
        let cb = Codebook::new(array![[0.0f32, 1.0]], true, None).unwrap();
        assert!(matches!(quantize(&archive(array![[1.0f32]], Provenance::Standardized), &cb), Err(AudError::DimMismatch { .. })));
        assert!(matches!(
            quantize(&archive(array![[1.0f32, 0.0]], Provenance::Raw), &cb),
            Err(AudError::ProvenanceMismatch { .. })
        ));
        assert!(quantize(&archive(array![[1.0f32, 0.0]], Provenance::Standardized), &cb).is_ok());
    }

    #[test]
    fn one_hot_rows() {
        assert_eq!(one_hot(&[0, 2], 3).unwrap(), array![[1.0f32, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(one_hot(&[], 4).unwrap().dim(), (0, 4));
        assert!(matches!(one_hot(&[3], 3), Err(AudError::UnitOutOfRange { unit: 3, k: 3 })));
        let m = one_hot(&[1, 1, 0, 4], 5).unwrap();
        assert!(m.rows().into_iter().all(|r| r.sum() == 1.0));
    }

    #[test]
    fn frame_pairing() {
        let pairs = frame_pairs(&[3, 3, 7], &["b", "b", "eh"], false).unwrap();
        assert_eq!(pairs, vec![(3, "b"), (3, "b"), (7, "eh")]);
        assert!(matches!(frame_pairs(&[3, 3], &["b"], false), Err(AudError::LengthMismatch { .. })));
        let filtered = frame_pairs(&[1, 2, 3], &["sil", "b", "sil"], true).unwrap();
        assert_eq!(filtered, vec![(2, "b")]);
    }

    #[test]
    fn codebook_file_round_trip_and_layout() {
        let cb = Codebook::new(array![[1.0f32, -2.0], [0.5, 3.0], [7.0, 8.0]], true, Some(4)).unwrap();
        let mut bytes = Vec::new();
        cb.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"ZRCB");
        assert_eq!(bytes.len(), 20 + 6 * 4);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        let back = Codebook::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.centroids(), cb.centroids());
        assert!(back.standardized_input);
        assert!(matches!(Codebook::read_from(&bytes[..30]), Err(AudError::Truncated)));
        bytes[0] = b'X';
        assert!(matches!(Codebook::read_from(bytes.as_slice()), Err(AudError::BadMagic(_))));
    }

    #[test]
    fn units_text_round_trip() {
        let seqs = vec![
            UnitSequence { utt_id: "a".into(), units: vec![1, 2, 3] },
            UnitSequence { utt_id: "b".into(), units: vec![0] },
        ];
        let text = units_to_text(&seqs);
        assert_eq!(text, "a 1 2 3\nb 0\n");
        assert_eq!(parse_units(&text).unwrap(), seqs);
        assert!(matches!(parse_units("a 1 x\n"), Err(AudError::Malformed { line: 1, .. })));
    }
}
