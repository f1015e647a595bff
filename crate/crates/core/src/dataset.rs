//! Dataset manifests: one JSON record per line, paths relative to the
//! manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::load_png;
use crate::mfss::LandmarkSet;
use crate::nn::checkpoint::write_atomic;
use crate::tensor::Tensor;

/// Class index 0 is fake, 1 is real.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Fake,
    Real,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Fake => 0,
            Label::Real => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Label> {
        match i {
            0 => Ok(Label::Fake),
            1 => Ok(Label::Real),
            _ => Err(Error::contract(format!("label {i} outside {{0, 1}}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "test")]
    Test,
    #[serde(rename = "unseen-test")]
    UnseenTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::UnseenTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::UnseenTest => "unseen-test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub image: PathBuf,
    pub landmarks: PathBuf,
    pub label: Label,
    /// Manipulation family name, or `real`.
    pub family: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Self {
        Manifest {
            root: root.into(),
            records,
        }
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { root, records })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn split(&self, split: Split) -> Manifest {
        self.filter(|r| r.split == split)
    }

    pub fn filter(&self, keep: impl Fn(&Record) -> bool) -> Manifest {
        Manifest {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `[fake, real]` record counts.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for r in &self.records {
            c[r.label.index()] += 1;
        }
        c
    }

    pub fn image_path(&self, r: &Record) -> PathBuf {
        self.root.join(&r.image)
    }

    pub fn landmark_path(&self, r: &Record) -> PathBuf {
        self.root.join(&r.landmarks)
    }

    pub fn load_sample(&self, r: &Record) -> Result<(Tensor, LandmarkSet)> {
        let img = load_png(&self.image_path(r))?;
        let lm = LandmarkSet::load(&self.landmark_path(r))?;
        Ok((img, lm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: Label, split: Split) -> Record {
        Record {
            id: id.into(),
            image: format!("img/{id}.png").into(),
            landmarks: format!("lm/{id}.txt").into(),
            label,
            family: if label == Label::Real { "real".into() } else { "local-eyes".into() },
            split,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(
            dir.path(),
            vec![
                rec("a", Label::Fake, Split::Train),
                rec("b", Label::Real, Split::UnseenTest),
            ],
        );
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"split\":\"unseen-test\""));
        assert!(text.contains("\"label\":\"fake\""));
        assert_eq!(Manifest::load(&path).unwrap(), m);
    }

    #[test]
    fn bad_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "{}\n").unwrap();
        assert!(matches!(Manifest::load(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn counts_and_splits() {
        let m = Manifest::new(
            "",
            vec![
                rec("a", Label::Fake, Split::Train),
                rec("b", Label::Real, Split::Train),
                rec("c", Label::Real, Split::Val),
            ],
        );
        assert_eq!(m.split(Split::Train).class_counts(), [1, 1]);
        assert_eq!(m.split(Split::Val).len(), 1);
        assert!(m.split(Split::Test).is_empty());
    }

    #[test]
    fn label_indices() {
        assert_eq!(Label::Fake.index(), 0);
        assert_eq!(Label::from_index(1).unwrap(), Label::Real);
        assert!(Label::from_index(2).is_err());
    }
}
