//! Dataset manifests: one CSV row per clip with its five trait labels.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TraitVector, TRAITS};

use super::clip::{load_clip, write_atomic, Clip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    clip_id: String,
    path: String,
    openness: String,
    agreeableness: String,
    conscientiousness: String,
    neuroticism: String,
    extraversion: String,
    split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub clip_id: String,
    /// Absolute, or relative to the manifest's directory.
    pub path: PathBuf,
    pub label: TraitVector,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory that relative clip paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<Entry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(Error::ManifestRow {
                    row: i + 1,
                    reason: format!("duplicate clip_id {}", e.clip_id),
                });
            }
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    /// Parses CSV text. Row numbers in errors count data rows from 1.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let expected = [
            "clip_id",
            "path",
            "openness",
            "agreeableness",
            "conscientiousness",
            "neuroticism",
            "extraversion",
            "split",
        ];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::ManifestRow {
                row: 0,
                reason: format!("header must be {}", expected.join(",")),
            });
        }
        let mut entries = Vec::new();
        for (i, rec) in reader.deserialize::<Row>().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::ManifestRow {
                row,
                reason: e.to_string(),
            })?;
            let mut values = [0f32; TRAITS];
            let raw = [
                &rec.openness,
                &rec.agreeableness,
                &rec.conscientiousness,
                &rec.neuroticism,
                &rec.extraversion,
            ];
            for (k, s) in raw.iter().enumerate() {
                let v: f32 = s.trim().parse().map_err(|_| Error::ManifestRow {
                    row,
                    reason: format!("{} = {s:?} is not a number", crate::model::TRAIT_NAMES[k]),
                })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::ManifestRow {
                        row,
                        reason: format!("{} = {v} outside [0, 1]", crate::model::TRAIT_NAMES[k]),
                    });
                }
                values[k] = v;
            }
            let split = rec.split.parse().map_err(|e: Error| Error::ManifestRow {
                row,
                reason: e.to_string(),
            })?;
            entries.push(Entry {
                clip_id: rec.clip_id,
                path: PathBuf::from(rec.path),
                label: TraitVector(values),
                split,
            });
        }
        Self::new(root, entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            let v = e.label.values();
            w.serialize(Row {
                clip_id: e.clip_id.clone(),
                path: e.path.to_string_lossy().into_owned(),
                openness: v[0].to_string(),
                agreeableness: v[1].to_string(),
                conscientiousness: v[2].to_string(),
                neuroticism: v[3].to_string(),
                extraversion: v[4].to_string(),
                split: e.split.to_string(),
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, entry: &Entry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Loads the clip of `entry` with its label attached.
    pub fn load_clip(&self, entry: &Entry) -> Result<Clip> {
        Ok(load_clip(&self.resolve(entry))?.with_label(entry.label))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "clip_id,path,openness,agreeableness,conscientiousness,neuroticism,extraversion,split\n";

    #[test]
    fn parses_and_round_trips() {
        let text = format!("{HEADER}a,clips/a.dic,0.1,0.2,0.3,0.4,0.5,train\nb,/abs/b.dic,1,0,0.5,0.5,0.5,validation\n");
        let m = Manifest::parse(&text, "/data").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].split, Split::Validation);
        assert_eq!(m.resolve(&m.entries[0]), PathBuf::from("/data/clips/a.dic"));
        assert_eq!(m.resolve(&m.entries[1]), PathBuf::from("/abs/b.dic"));
        let again = Manifest::parse(&m.to_csv().unwrap(), "/data").unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn out_of_range_trait_reports_row() {
        let text = format!("{HEADER}a,a.dic,0.1,0.2,0.3,0.4,0.5,train\nb,b.dic,0.1,1.2,0.3,0.4,0.5,train\n");
        match Manifest::parse(&text, "") {
            Err(Error::ManifestRow { row, reason }) => {
                assert_eq!(row, 2);
                assert!(reason.contains("agreeableness"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_and_bad_split_rejected() {
        let dup = format!("{HEADER}a,a.dic,0,0,0,0,0,train\na,b.dic,0,0,0,0,0,test\n");
        assert!(matches!(Manifest::parse(&dup, ""), Err(Error::ManifestRow { row: 2, .. })));
        let bad = format!("{HEADER}a,a.dic,0,0,0,0,0,holdout\n");
        assert!(matches!(Manifest::parse(&bad, ""), Err(Error::ManifestRow { row: 1, .. })));
    }
}
