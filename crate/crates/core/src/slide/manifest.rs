//! Dataset index: one CSV row per slide.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tabular::{csv_rows, write_csv};

pub const MANIFEST_HEADER: [&str; 4] = ["slide_id", "path", "label", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Argument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub slide_id: String,
    /// As written in the file; relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.slide_id.as_str()) {
                return Err(Error::Data(format!("duplicate slide id {}", r.slide_id)));
            }
            if r.label > 1 {
                return Err(Error::Data(format!("slide {} has label {}", r.slide_id, r.label)));
            }
        }
        Ok(Self { records, root: root.into() })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: source.to_path_buf(),
            line,
            message,
        };
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (line, row) in csv_rows(text, source, &MANIFEST_HEADER)? {
            let slide_id = row[0].to_string();
            if slide_id.is_empty() {
                return Err(parse_err(line, "empty slide id".into()));
            }
            if !seen.insert(slide_id.clone()) {
                return Err(parse_err(line, format!("duplicate slide id {slide_id}")));
            }
            let label = match &row[2] {
                "0" => 0,
                "1" => 1,
                other => return Err(parse_err(line, format!("label must be 0 or 1, found {other:?}"))),
            };
            let split = row[3].parse().map_err(|e: Error| parse_err(line, e.to_string()))?;
            records.push(ManifestRecord { slide_id, path: PathBuf::from(&row[1]), label, split });
        }
        let root = source.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { records, root })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_csv(&self) -> String {
        write_csv(
            &MANIFEST_HEADER,
            self.records.iter().map(|r| {
                vec![
                    r.slide_id.clone(),
                    r.path.to_string_lossy().into_owned(),
                    r.label.to_string(),
                    r.split.to_string(),
                ]
            }),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest> {
        Manifest::parse(text, Path::new("/data/manifest.csv"))
    }

    #[test]
    fn parses_and_resolves() {
        let m = parse("slide_id,path,label,split\na,slides/a.mils,1,train\nb,/abs/b.mils,0,test\n").unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.resolve(&m.records[0]), PathBuf::from("/data/slides/a.mils"));
        assert_eq!(m.resolve(&m.records[1]), PathBuf::from("/abs/b.mils"));
        assert_eq!(m.count(Split::Train), 1);
        assert_eq!(m.count(Split::Val), 0);
    }

    #[test]
    fn round_trips_through_csv() {
        let text = "slide_id,path,label,split\na,slides/a.mils,1,train\nb,b.mils,0,val\n";
        assert_eq!(parse(text).unwrap().to_csv(), text);
    }

    fn line_of(err: Error) -> usize {
        match err {
            Error::Parse { line, .. } => line,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(line_of(parse("id,path,label,split\n").unwrap_err()), 1);
        assert_eq!(line_of(parse("slide_id,path,label,split\na,p,1,train\nb,p,2,train\n").unwrap_err()), 3);
        assert_eq!(line_of(parse("slide_id,path,label,split\na,p,1,train\na,q,0,val\n").unwrap_err()), 3);
        assert_eq!(line_of(parse("slide_id,path,label,split\na,p,1,holdout\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("slide_id,path,label,split\na,p,1\n").unwrap_err()), 2);
    }
}
