//! Line-delimited record streams. Every stream starts with a header line
//! carrying provenance, followed by one JSON record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const TOOL_NAME: &str = "corpa-forge";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}: missing header line")]
    MissingHeader(String),
    #[error("{path}: schema version {found}, expected {expected}")]
    SchemaMismatch {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: produced under lexicon {found}, current lexicon is {expected}")]
    LexiconMismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error("{path}: expected a {expected} stream, found {found}")]
    StageMismatch {
        path: String,
        found: String,
        expected: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub tool: String,
    pub version: String,
    pub schema: u32,
    pub stage: String,
    pub lexicon_hash: String,
    pub seed: u64,
    pub k_inter: usize,
    pub k_outer: usize,
}

impl StreamHeader {
    pub fn new(stage: &str, lexicon_hash: &str, seed: u64, k_inter: usize, k_outer: usize) -> Self {
        Self {
            tool: TOOL_NAME.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            schema: SCHEMA_VERSION,
            stage: stage.to_string(),
            lexicon_hash: lexicon_hash.to_string(),
            seed,
            k_inter,
            k_outer,
        }
    }

    /// Checks that a stream read back belongs to `stage` under `lexicon_hash`.
    pub fn check(&self, path: &Path, stage: &str, lexicon_hash: &str) -> Result<(), RecordError> {
        let path = path.display().to_string();
        if self.schema != SCHEMA_VERSION {
            return Err(RecordError::SchemaMismatch {
                path,
                found: self.schema,
                expected: SCHEMA_VERSION,
            });
        }
        if self.stage != stage {
            return Err(RecordError::StageMismatch {
                path,
                found: self.stage.clone(),
                expected: stage.to_string(),
            });
        }
        if self.lexicon_hash != lexicon_hash {
            return Err(RecordError::LexiconMismatch {
                path,
                found: self.lexicon_hash.clone(),
                expected: lexicon_hash.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: StreamHeader,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes a header line followed by one JSON line per record.
pub fn write_records<'a, T: Serialize + 'a>(
    path: &Path,
    header: &StreamHeader,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<(), RecordError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let line = serde_json::to_string(&HeaderLine {
        header: header.clone(),
    })
    .expect("header serializes");
    writeln!(out, "{line}").map_err(io_err(path))?;
    for record in records {
        let line = serde_json::to_string(record).map_err(|source| RecordError::Json {
            path: path.display().to_string(),
            line: 0,
            source,
        })?;
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads a stream written by [`write_records`].
pub fn read_records<T: DeserializeOwned>(
    path: &Path,
) -> Result<(StreamHeader, Vec<T>), RecordError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(io_err(path))?;
            serde_json::from_str::<HeaderLine>(&line)
                .map_err(|source| RecordError::Json {
                    path: path.display().to_string(),
                    line: 1,
                    source,
                })?
                .header
        }
        None => return Err(RecordError::MissingHeader(path.display().to_string())),
    };
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|source| RecordError::Json {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })?,
        );
    }
    Ok((header, records))
}

/// Reads a stream and checks its header against the expected stage and lexicon.
pub fn read_stage<T: DeserializeOwned>(
    path: &Path,
    stage: &str,
    lexicon_hash: &str,
) -> Result<(StreamHeader, Vec<T>), RecordError> {
    let (header, records) = read_records(path)?;
    header.check(path, stage, lexicon_hash)?;
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Item {
        id: String,
        n: u32,
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let header = StreamHeader::new("demo", "abc", 2, 2, 2);
        let items = vec![
            Item {
                id: "a".into(),
                n: 1,
            },
            Item {
                id: "b".into(),
                n: 2,
            },
        ];
        write_records(&path, &header, &items).unwrap();
        let (h, back): (_, Vec<Item>) = read_stage(&path, "demo", "abc").unwrap();
        assert_eq!(h, header);
        assert_eq!(back, items);
    }

    #[test]
    fn header_mismatches_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_records::<Item>(&path, &StreamHeader::new("demo", "abc", 2, 2, 2), &[]).unwrap();
        assert!(matches!(
            read_stage::<Item>(&path, "demo", "zzz"),
            Err(RecordError::LexiconMismatch { .. })
        ));
        assert!(matches!(
            read_stage::<Item>(&path, "other", "abc"),
            Err(RecordError::StageMismatch { .. })
        ));
        let mut bad = StreamHeader::new("demo", "abc", 2, 2, 2);
        bad.schema = 99;
        write_records::<Item>(&path, &bad, &[]).unwrap();
        assert!(matches!(
            read_stage::<Item>(&path, "demo", "abc"),
            Err(RecordError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn empty_file_has_no_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            read_records::<Item>(&path),
            Err(RecordError::MissingHeader(_))
        ));
    }
}
