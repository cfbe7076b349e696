//! Report ingestion: section extraction and the corpus manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::vector::ConceptVector;

pub const FINDINGS: &str = "FINDINGS";
pub const IMPRESSION: &str = "IMPRESSION";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate report id {0:?}")]
    DuplicateReport(String),
    #[error("pairing file {path}: {message}")]
    Pairing { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub report_id: String,
    pub image_id: Option<String>,
    pub raw_text: String,
    /// Section name (upper-case) to section body.
    pub sections: BTreeMap<String, String>,
}

impl Report {
    pub fn parse(report_id: &str, image_id: Option<String>, raw_text: &str) -> Self {
        Self {
            report_id: report_id.to_string(),
            image_id,
            raw_text: raw_text.to_string(),
            sections: parse_sections(raw_text),
        }
    }

    /// True if FINDINGS or IMPRESSION has non-blank text.
    pub fn has_analysis_section(&self) -> bool {
        [FINDINGS, IMPRESSION].iter().any(|name| {
            self.sections
                .get(*name)
                .is_some_and(|body| !body.trim().is_empty())
        })
    }

    /// FINDINGS then IMPRESSION, whichever exist, joined by a newline.
    pub fn section_text(&self) -> String {
        [FINDINGS, IMPRESSION]
            .iter()
            .filter_map(|name| self.sections.get(*name))
            .map(|body| body.trim())
            .filter(|body| !body.is_empty())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Splits report text into named sections.
///
/// FINDINGS and IMPRESSION headers are matched case-insensitively at the
/// start of a line, with an optional colon. Any other all-caps line prefix
/// ending in a colon (HISTORY:, COMPARISON:, ...) also starts a section.
/// Text before the first header is dropped.
pub fn parse_sections(text: &str) -> BTreeMap<String, String> {
    let mut sections: BTreeMap<String, String> = BTreeMap::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        if let Some((name, rest)) = section_header(line) {
            let body = sections.entry(name.clone()).or_default();
            if !body.is_empty() {
                body.push('\n');
            }
            body.push_str(rest.trim());
            current = Some(name);
        } else if let Some(name) = &current {
            let body = sections.get_mut(name).expect("current section exists");
            body.push('\n');
            body.push_str(line);
        }
    }
    sections
}

fn section_header(line: &str) -> Option<(String, &str)> {
    let trimmed = line.trim_start();
    for name in [FINDINGS, IMPRESSION] {
        if trimmed.len() >= name.len()
            && trimmed.is_char_boundary(name.len())
            && trimmed[..name.len()].eq_ignore_ascii_case(name)
        {
            let rest = &trimmed[name.len()..];
            // Reject words that merely start with the header, e.g. "Findings-wise".
            if rest.is_empty() || rest.starts_with(':') || rest.starts_with(char::is_whitespace) {
                let rest = rest.strip_prefix(':').unwrap_or(rest);
                return Some((name.to_string(), rest));
            }
        }
    }
    let (head, rest) = trimmed.split_once(':')?;
    let is_caps_header = !head.is_empty()
        && head.chars().any(|c| c.is_ascii_uppercase())
        && head
            .chars()
            .all(|c| c.is_ascii_uppercase() || c == ' ' || c == '/' || c == '&');
    is_caps_header.then(|| (head.trim().to_string(), rest))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    None,
}

/// One manifest line. Also used for labelled and split dataset rows, where
/// `labels` holds a single class id per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub report_id: String,
    pub image_id: Option<String>,
    pub split: Split,
    pub labels: Vec<String>,
    pub vector: Option<ConceptVector>,
    /// Report path relative to the ingested directory.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub report_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub quarantined: Vec<QuarantineEntry>,
}

/// Reads a `report_id,image_id` CSV (header row required).
pub fn read_pairing(path: &Path) -> Result<HashMap<String, String>, CorpusError> {
    let err = |message: String| CorpusError::Pairing {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    if headers.len() < 2 || &headers[0] != "report_id" || &headers[1] != "image_id" {
        return Err(err("header must be report_id,image_id".into()));
    }
    let mut pairing = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| err(e.to_string()))?;
        let report_id = record[0].trim().to_string();
        if pairing
            .insert(report_id.clone(), record[1].trim().to_string())
            .is_some()
        {
            return Err(err(format!("report {report_id:?} paired twice")));
        }
    }
    Ok(pairing)
}

/// Report files under `dir` (`*.txt`, recursive), sorted by path.
fn report_files(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CorpusError::Io {
            path: dir.display().to_string(),
            source: e.into(),
        })?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e == "txt") {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

/// Ingests every `*.txt` report under `report_dir`. The report id is the file
/// stem. Reports without a non-empty FINDINGS or IMPRESSION section, and
/// unreadable files, are quarantined.
pub fn ingest(
    report_dir: &Path,
    pairing: &HashMap<String, String>,
) -> Result<(CorpusManifest, Vec<Report>), CorpusError> {
    let mut seen = HashMap::new();
    let mut manifest = CorpusManifest::default();
    let mut reports = Vec::new();
    for path in report_files(report_dir)? {
        let report_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if seen.insert(report_id.clone(), ()).is_some() {
            return Err(CorpusError::DuplicateReport(report_id));
        }
        let source = path
            .strip_prefix(report_dir)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        let text = match fs::read(&path) {
            Ok(bytes) => match String::from_utf8(bytes) {
                Ok(text) => text,
                Err(_) => {
                    manifest.quarantined.push(QuarantineEntry {
                        report_id,
                        reason: "unreadable: not valid UTF-8".into(),
                    });
                    continue;
                }
            },
            Err(e) => {
                manifest.quarantined.push(QuarantineEntry {
                    report_id,
                    reason: format!("unreadable: {e}"),
                });
                continue;
            }
        };
        let report = Report::parse(&report_id, pairing.get(&report_id).cloned(), &text);
        if !report.has_analysis_section() {
            manifest.quarantined.push(QuarantineEntry {
                report_id,
                reason: "no FINDINGS or IMPRESSION section".into(),
            });
            continue;
        }
        manifest.entries.push(ManifestEntry {
            report_id: report.report_id.clone(),
            image_id: report.image_id.clone(),
            split: Split::None,
            labels: Vec::new(),
            vector: None,
            source,
        });
        reports.push(report);
    }
    manifest
        .entries
        .sort_by(|a, b| a.report_id.cmp(&b.report_id));
    manifest
        .quarantined
        .sort_by(|a, b| a.report_id.cmp(&b.report_id));
    reports.sort_by(|a, b| a.report_id.cmp(&b.report_id));
    Ok((manifest, reports))
}

/// Re-reads the report behind a manifest entry.
pub fn load_report(report_dir: &Path, entry: &ManifestEntry) -> Result<Report, CorpusError> {
    let path = report_dir.join(&entry.source);
    let text = fs::read_to_string(&path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Report::parse(
        &entry.report_id,
        entry.image_id.clone(),
        &text,
    ))
}
