use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{CorpusError, FeatureArchive};

const HEADER: &str = "utt_id,speaker_id,gender,num_frames";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Gender {
    F,
    M,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::F => "F",
            Gender::M => "M",
        })
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "F" | "f" => Ok(Gender::F),
            "M" | "m" => Ok(Gender::M),
            other => Err(format!("unknown gender `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub gender: Gender,
    pub num_frames: usize,
}

/// Speaker and gender metadata per utterance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    records: Vec<ManifestRecord>,
    index: HashMap<String, usize>,
}

impl Manifest {
    pub fn from_records(records: impl IntoIterator<Item = ManifestRecord>) -> Result<Self, CorpusError> {
        let mut m = Manifest::default();
        for r in records {
            m.push(r)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, record: ManifestRecord) -> Result<(), CorpusError> {
        if self.index.contains_key(&record.utt_id) {
            return Err(CorpusError::DuplicateUttId(record.utt_id));
        }
        self.index.insert(record.utt_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestRecord> {
        self.index.get(utt_id).map(|&i| &self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Utterance ids grouped by speaker, speakers in lexicographic order,
    /// utterances in manifest order.
    pub fn by_speaker(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.speaker_id.as_str()).or_default().push(r.utt_id.as_str());
        }
        out
    }

    pub fn speakers(&self) -> Vec<&str> {
        self.by_speaker().into_keys().collect()
    }

    /// Checks that every archive utterance is described with the right frame count.
    pub fn validate_against(&self, archive: &FeatureArchive) -> Result<(), CorpusError> {
        for utt in archive.utterances() {
            let rec = self.get(&utt.id).ok_or_else(|| CorpusError::UnknownUtt(utt.id.clone()))?;
            if rec.num_frames != utt.num_frames() {
                return Err(CorpusError::FrameCountMismatch {
                    utt_id: utt.id.clone(),
                    what: "manifest",
                    expected: utt.num_frames(),
                    found: rec.num_frames,
                });
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            Some((_, h)) => {
                return Err(CorpusError::Malformed { line: 1, message: format!("expected header `{HEADER}`, got `{h}`") })
            }
            None => return Err(CorpusError::Malformed { line: 1, message: "missing header".into() }),
        }
        let mut m = Manifest::default();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let malformed = |message: String| CorpusError::Malformed { line: line_no, message };
            if fields.len() != 4 {
                return Err(malformed(format!("expected 4 fields, found {}", fields.len())));
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(malformed("empty id".into()));
            }
            let gender = fields[2].parse::<Gender>().map_err(malformed)?;
            let num_frames = fields[3]
                .parse::<usize>()
                .map_err(|e| malformed(format!("bad num_frames `{}`: {e}", fields[3])))?;
            m.push(ManifestRecord {
                utt_id: fields[0].to_string(),
                speaker_id: fields[1].to_string(),
                gender,
                num_frames,
            })
            .map_err(|e| match e {
                CorpusError::DuplicateUttId(id) => malformed(format!("duplicate utterance id `{id}`")),
                other => other,
            })?;
        }
        Ok(m)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.utt_id, r.speaker_id, r.gender, r.num_frames));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        Ok(fs::write(path, self.to_csv())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_record() {
        let m = Manifest::parse("utt_id,speaker_id,gender,num_frames\nu1,spk3,F,120\n").unwrap();
        let r = m.get("u1").unwrap();
        assert_eq!(r.speaker_id, "spk3");
        assert_eq!(r.gender, Gender::F);
        assert_eq!(r.num_frames, 120);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = Manifest::parse("utt_id,speaker_id,gender,num_frames\nu1,spk3,F,120\nu2,spk3,X,5\n").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 3, .. }), "{err}");
        let err = Manifest::parse("utt_id,speaker_id,gender,num_frames\nu1,spk3,F\n").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }));
    }

    #[test]
    fn header_required() {
        assert!(matches!(Manifest::parse("u1,spk3,F,120\n"), Err(CorpusError::Malformed { line: 1, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let text = "utt_id,speaker_id,gender,num_frames\na,s1,M,3\nb,s2,F,7\n";
        assert_eq!(Manifest::parse(text).unwrap().to_csv(), text);
    }
}
