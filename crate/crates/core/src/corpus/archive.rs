use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use super::CorpusError;

pub const ARCHIVE_MAGIC: [u8; 4] = *b"ZRFA";
pub const ARCHIVE_VERSION: u32 = 1;

/// Whether an archive's frames are known to be standardized.
///
/// Provenance is not part of the binary format; the CLI keeps it in a JSON
/// sidecar next to the archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Unknown,
    Raw,
    Standardized,
}

/// One utterance: an id and a `T x d` matrix of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: Array2<f32>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, frames: Array2<f32>) -> Self {
        // Row-major storage is assumed by the row accessors.
        let frames = if frames.is_standard_layout() {
            frames
        } else {
            frames.as_standard_layout().into_owned()
        };
        Self { id: id.into(), frames }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        row(&self.frames.view(), t)
    }
}

/// Row `t` of a standard-layout matrix as a slice.
pub(crate) fn row<'a>(m: &ArrayView2<'a, f32>, t: usize) -> &'a [f32] {
    let d = m.ncols();
    let all = m.to_slice().expect("standard layout");
    &all[t * d..(t + 1) * d]
}

/// Per-utterance frame matrices sharing one dimensionality and frame period.
#[derive(Debug, Clone)]
pub struct FeatureArchive {
    dim: usize,
    frame_period_us: u32,
    utterances: Vec<Utterance>,
    index: HashMap<String, usize>,
    provenance: Provenance,
}

impl PartialEq for FeatureArchive {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.frame_period_us == other.frame_period_us
            && self.utterances == other.utterances
    }
}

impl FeatureArchive {
    pub fn new(dim: usize, frame_period_us: u32) -> Result<Self, CorpusError> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(CorpusError::InvalidHeader(format!("dimension {dim}")));
        }
        if frame_period_us == 0 {
            return Err(CorpusError::InvalidHeader("frame period 0".into()));
        }
        Ok(Self {
            dim,
            frame_period_us,
            utterances: Vec::new(),
            index: HashMap::new(),
            provenance: Provenance::Unknown,
        })
    }

    pub fn from_utterances(
        dim: usize,
        frame_period_us: u32,
        utterances: impl IntoIterator<Item = Utterance>,
    ) -> Result<Self, CorpusError> {
        let mut archive = Self::new(dim, frame_period_us)?;
        for utt in utterances {
            archive.push(utt)?;
        }
        Ok(archive)
    }

    /// Appends an utterance, enforcing the archive invariants.
    pub fn push(&mut self, utt: Utterance) -> Result<(), CorpusError> {
        if utt.frames.ncols() != self.dim {
            return Err(CorpusError::DimMismatch {
                utt_id: utt.id,
                expected: self.dim,
                found: utt.frames.ncols(),
            });
        }
        if utt.frames.nrows() == 0 {
            return Err(CorpusError::EmptyUtterance(utt.id));
        }
        if utt.id.len() > u16::MAX as usize {
            return Err(CorpusError::InvalidHeader(format!("utterance id of {} bytes", utt.id.len())));
        }
        if self.index.contains_key(&utt.id) {
            return Err(CorpusError::DuplicateUttId(utt.id));
        }
        self.index.insert(utt.id.clone(), self.utterances.len());
        self.utterances.push(Utterance::new(utt.id, utt.frames));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_period_us(&self) -> u32 {
        self.frame_period_us
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn get(&self, utt_id: &str) -> Option<&Utterance> {
        self.index.get(utt_id).map(|&i| &self.utterances[i])
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::num_frames).sum()
    }

    /// Archive restricted to the given utterance ids, in the given order.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self, CorpusError> {
        let mut out = Self::new(self.dim, self.frame_period_us)?;
        for id in ids {
            let utt = self.get(id).ok_or_else(|| CorpusError::UnknownUtt(id.to_string()))?;
            out.push(utt.clone())?;
        }
        out.provenance = self.provenance;
        Ok(out)
    }

    /// All frames stacked into one `N x d` matrix, in utterance order.
    pub fn stacked(&self) -> Array2<f32> {
        let n = self.total_frames();
        let mut data = Vec::with_capacity(n * self.dim);
        for utt in &self.utterances {
            data.extend_from_slice(utt.frames.as_slice().expect("standard layout"));
        }
        Array2::from_shape_vec((n, self.dim), data).expect("shape")
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        w.write_all(&ARCHIVE_MAGIC)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.frame_period_us.to_le_bytes())?;
        w.write_all(&(self.utterances.len() as u64).to_le_bytes())?;
        for utt in &self.utterances {
            w.write_all(&(utt.id.len() as u16).to_le_bytes())?;
            w.write_all(utt.id.as_bytes())?;
            w.write_all(&(utt.num_frames() as u32).to_le_bytes())?;
            let mut buf = Vec::with_capacity(utt.frames.len() * 4);
            for v in utt.frames.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CorpusError> {
        let magic: [u8; 4] = read_array(&mut r, "magic")?;
        if magic != ARCHIVE_MAGIC {
            return Err(CorpusError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(read_array(&mut r, "version")?);
        if version != ARCHIVE_VERSION {
            return Err(CorpusError::UnsupportedVersion(version));
        }
        let dim = u32::from_le_bytes(read_array(&mut r, "dimension")?) as usize;
        let frame_period_us = u32::from_le_bytes(read_array(&mut r, "frame period")?);
        let count = u64::from_le_bytes(read_array(&mut r, "utterance count")?);
        let mut archive = Self::new(dim, frame_period_us)?;
        for _ in 0..count {
            let id_len = u16::from_le_bytes(read_array(&mut r, "utterance id length")?) as usize;
            let mut id = vec![0u8; id_len];
            read_exact(&mut r, &mut id, "utterance id")?;
            let id = String::from_utf8(id).map_err(|_| CorpusError::InvalidUtf8)?;
            let n = u32::from_le_bytes(read_array(&mut r, "frame count")?) as usize;
            let mut raw = vec![0u8; n * dim * 4];
            read_exact(&mut r, &mut raw, "frames")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let frames = Array2::from_shape_vec((n, dim), data).expect("shape");
            archive.push(Utterance::new(id, frames))?;
        }
        Ok(archive)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CorpusError> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), CorpusError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CorpusError::Truncated(what),
        _ => CorpusError::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R, what: &'static str) -> Result<[u8; N], CorpusError> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}
