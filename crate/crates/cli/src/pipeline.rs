//! Stage implementations over a run directory.
//!
//! Each stage reads the record streams written by earlier stages and writes
//! its own. Streams are sorted before writing so that output bytes do not
//! depend on the worker count.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use corpa_core::corpus::{self, ManifestEntry, QuarantineEntry, Split};
use corpa_core::extraction::{extract_concept_vector, report_sentence_concepts};
use corpa_core::labelling::{
    self, assign_labels, expand_multilabel, one_sided_selection, Distance, SplitSpec,
};
use corpa_core::metrics::{self, MetricsReport, OuterTruth, PredictionSet};
use corpa_core::perturbation::{build_valid_index, perturb_all, PerturbConfig, PerturbationRecord};
use corpa_core::records::{read_stage, write_records, RecordError, StreamHeader};
use corpa_core::rng::derive_rng;
use corpa_core::synthesis::{
    build_bank, emit_prompts, synthesize, AdversarialReport, BankRecord, PromptRecord, SentenceBank,
};
use corpa_core::textproc::{
    clean_report, CleanedReport, CleanedSentence, CleaningRule, RemovedSentence,
};
use corpa_core::{ConceptLexicon, ConceptMatcher, ConceptVector};

pub const MANIFEST: &str = "manifest";
pub const QUARANTINE: &str = "quarantine";
pub const CLEANED: &str = "cleaned";
pub const VECTORS: &str = "vectors";
pub const LABELS: &str = "labels";
pub const BALANCED: &str = "balanced";
pub const SPLITS: &str = "splits";
pub const BANK: &str = "bank";
pub const PERTURBATIONS: &str = "perturbations";
pub const ADVERSARIAL: &str = "adversarial";
pub const PROMPTS: &str = "prompts";
pub const METRICS: &str = "metrics";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Lexicon(#[from] corpa_core::lexicon::LexiconError),
    #[error(transparent)]
    Labelling(#[from] labelling::LabellingError),
    #[error(transparent)]
    Perturbation(#[from] corpa_core::perturbation::PerturbationError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

/// One structured warning in `logs/<stage>.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: String,
    pub level: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub item: Option<String>,
    pub message: String,
}

pub struct Context {
    pub run: PathBuf,
    pub lexicon: ConceptLexicon,
    pub matcher: ConceptMatcher,
    pub seed: u64,
    pub k_inter: usize,
    pub k_outer: usize,
}

impl Context {
    pub fn new(
        run: PathBuf,
        lexicon: ConceptLexicon,
        seed: u64,
        k_inter: usize,
        k_outer: usize,
    ) -> Self {
        let matcher = ConceptMatcher::new(&lexicon);
        Self {
            run,
            lexicon,
            matcher,
            seed,
            k_inter,
            k_outer,
        }
    }

    pub fn path(&self, stage: &str) -> PathBuf {
        self.run.join(format!("{stage}.jsonl"))
    }

    fn header(&self, stage: &str) -> StreamHeader {
        StreamHeader::new(
            stage,
            &self.lexicon.hash(),
            self.seed,
            self.k_inter,
            self.k_outer,
        )
    }

    fn write<'a, T: Serialize + 'a>(
        &self,
        stage: &str,
        records: impl IntoIterator<Item = &'a T>,
    ) -> Result<()> {
        write_records(&self.path(stage), &self.header(stage), records)?;
        Ok(())
    }

    fn read<T: serde::de::DeserializeOwned>(&self, stage: &str) -> Result<Vec<T>> {
        let (_, records) = read_stage(&self.path(stage), stage, &self.lexicon.hash())?;
        Ok(records)
    }

    /// Writes the stage's warnings and prints a one-line summary.
    fn log(&self, stage: &str, entries: &[LogEntry], summary: &str) -> Result<()> {
        let path = self.run.join("logs").join(format!("{stage}.jsonl"));
        write_records(&path, &self.header(stage), entries)?;
        let warnings = entries.iter().filter(|e| e.level == "warning").count();
        if warnings == 0 {
            eprintln!("[{stage}] {summary}");
        } else {
            eprintln!(
                "[{stage}] {summary}; {warnings} warning(s) in {}",
                path.display()
            );
        }
        Ok(())
    }
}

fn warn(stage: &str, item: Option<&str>, message: impl Into<String>) -> LogEntry {
    LogEntry {
        stage: stage.to_string(),
        level: "warning".into(),
        item: item.map(str::to_string),
        message: message.into(),
    }
}

pub fn ingest(ctx: &Context, reports: &Path, pairing: Option<&Path>) -> Result<()> {
    let pairing = match pairing {
        Some(p) => corpus::read_pairing(p)?,
        None => HashMap::new(),
    };
    let (manifest, _) = corpus::ingest(reports, &pairing)?;
    ctx.write(MANIFEST, &manifest.entries)?;
    ctx.write(QUARANTINE, &manifest.quarantined)?;
    let mut logs: Vec<LogEntry> = manifest
        .quarantined
        .iter()
        .map(|q: &QuarantineEntry| {
            warn(
                MANIFEST,
                Some(&q.report_id),
                format!("quarantined: {}", q.reason),
            )
        })
        .collect();
    for e in manifest
        .entries
        .iter()
        .filter(|e| e.image_id.is_none() && !pairing.is_empty())
    {
        logs.push(warn(
            MANIFEST,
            Some(&e.report_id),
            "no image paired with this report",
        ));
    }
    ctx.log(
        MANIFEST,
        &logs,
        &format!(
            "{} reports ingested, {} quarantined",
            manifest.entries.len(),
            manifest.quarantined.len()
        ),
    )
}

/// One line of the cleaned stream: a kept sentence or a removed one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanLine {
    pub report_id: String,
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed_rule: Option<CleaningRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

fn clean_lines(report: &CleanedReport) -> Vec<CleanLine> {
    let mut lines: Vec<CleanLine> = report
        .sentences
        .iter()
        .map(|s| CleanLine {
            report_id: report.report_id.clone(),
            index: s.origin_index,
            words: Some(s.words.clone()),
            truncated: s.truncated,
            removed_rule: None,
            text: None,
        })
        .chain(report.removed.iter().map(|r| CleanLine {
            report_id: report.report_id.clone(),
            index: r.origin_index,
            words: None,
            truncated: false,
            removed_rule: Some(r.rule),
            text: Some(r.text.clone()),
        }))
        .collect();
    lines.sort_by_key(|l| l.index);
    lines
}

fn group_clean_lines(lines: Vec<CleanLine>) -> Result<BTreeMap<String, CleanedReport>> {
    let mut out: BTreeMap<String, CleanedReport> = BTreeMap::new();
    for line in lines {
        let report = out
            .entry(line.report_id.clone())
            .or_insert_with(|| CleanedReport {
                report_id: line.report_id.clone(),
                sentences: Vec::new(),
                removed: Vec::new(),
            });
        match (line.words, line.removed_rule) {
            (Some(words), None) => report.sentences.push(CleanedSentence {
                words,
                origin_index: line.index,
                truncated: line.truncated,
            }),
            (None, Some(rule)) => report.removed.push(RemovedSentence {
                origin_index: line.index,
                text: line.text.unwrap_or_default(),
                rule,
            }),
            _ => {
                return Err(PipelineError::Data(format!(
                    "cleaned line {}#{} must carry either words or removed_rule",
                    line.report_id, line.index
                )))
            }
        }
    }
    Ok(out)
}

pub fn load_cleaned(ctx: &Context) -> Result<BTreeMap<String, CleanedReport>> {
    group_clean_lines(ctx.read(CLEANED)?)
}

pub fn clean(ctx: &Context, reports: &Path) -> Result<()> {
    let manifest: Vec<ManifestEntry> = ctx.read(MANIFEST)?;
    let cleaned: Vec<CleanedReport> = manifest
        .par_iter()
        .map(|entry| {
            Ok(clean_report(
                &corpus::load_report(reports, entry)?,
                &ctx.lexicon,
            ))
        })
        .collect::<Result<_>>()?;
    let lines: Vec<CleanLine> = cleaned.iter().flat_map(clean_lines).collect();
    ctx.write(CLEANED, &lines)?;

    let mut by_rule: BTreeMap<&str, usize> = BTreeMap::new();
    let mut logs = Vec::new();
    for report in &cleaned {
        for r in &report.removed {
            *by_rule.entry(r.rule.id()).or_default() += 1;
        }
        if report.sentences.is_empty() {
            logs.push(warn(
                CLEANED,
                Some(&report.report_id),
                "every sentence was removed by cleaning",
            ));
        }
    }
    let kept: usize = cleaned.iter().map(|r| r.sentences.len()).sum();
    ctx.log(
        CLEANED,
        &logs,
        &format!("{kept} sentences kept; removed by rule {by_rule:?}"),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorRecord {
    pub report_id: String,
    pub vector: ConceptVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentences: Option<Vec<ConceptVector>>,
}

pub fn extract(ctx: &Context, per_sentence: bool) -> Result<()> {
    let cleaned = load_cleaned(ctx)?;
    let manifest: Vec<ManifestEntry> = ctx.read(MANIFEST)?;
    let empty = |id: &str| CleanedReport {
        report_id: id.to_string(),
        sentences: Vec::new(),
        removed: Vec::new(),
    };
    let vectors: Vec<VectorRecord> = manifest
        .par_iter()
        .map(|entry| {
            let report = cleaned
                .get(&entry.report_id)
                .cloned()
                .unwrap_or_else(|| empty(&entry.report_id));
            VectorRecord {
                report_id: entry.report_id.clone(),
                vector: extract_concept_vector(&report, &ctx.matcher),
                sentences: per_sentence.then(|| {
                    report_sentence_concepts(&report, &ctx.matcher)
                        .into_iter()
                        .map(|s| s.concepts)
                        .collect()
                }),
            }
        })
        .collect();
    ctx.write(VECTORS, &vectors)?;
    let logs: Vec<LogEntry> = vectors
        .iter()
        .filter(|v| v.vector.is_zero())
        .map(|v| warn(VECTORS, Some(&v.report_id), "no concept found"))
        .collect();
    ctx.log(
        VECTORS,
        &logs,
        &format!("{} concept vectors", vectors.len()),
    )
}

pub fn label(ctx: &Context) -> Result<()> {
    let manifest: Vec<ManifestEntry> = ctx.read(MANIFEST)?;
    let vectors: Vec<VectorRecord> = ctx.read(VECTORS)?;
    let by_id: HashMap<&str, &VectorRecord> =
        vectors.iter().map(|v| (v.report_id.as_str(), v)).collect();
    let mut logs = Vec::new();
    let mut labelled = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let v = by_id.get(entry.report_id.as_str()).ok_or_else(|| {
            PipelineError::Data(format!(
                "no concept vector for report {:?}",
                entry.report_id
            ))
        })?;
        let assignment = assign_labels(&entry.report_id, &v.vector, &ctx.lexicon);
        if assignment.labels.is_empty() {
            logs.push(warn(
                LABELS,
                Some(&entry.report_id),
                "no label assigned; excluded downstream",
            ));
        }
        labelled.push(ManifestEntry {
            labels: assignment
                .labels
                .iter()
                .map(|&c| ctx.lexicon.class_id(c).to_string())
                .collect(),
            vector: Some(assignment.canonical_vector),
            ..entry
        });
    }
    ctx.write(LABELS, &labelled)?;
    let counts = class_counts(ctx, labelled.iter().flat_map(|e| e.labels.iter()));
    ctx.log(LABELS, &logs, &format!("label counts {counts}"))
}

fn class_counts<'a>(ctx: &Context, labels: impl Iterator<Item = &'a String>) -> String {
    let mut counts = vec![0usize; ctx.lexicon.num_classes()];
    for l in labels {
        if let Ok(c) = ctx.lexicon.class_index(l) {
            counts[c] += 1;
        }
    }
    ctx.lexicon
        .classes()
        .iter()
        .zip(&counts)
        .map(|(c, n)| format!("{}={n}", c.id))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn undersample(ctx: &Context, majority: &str, distance: Distance) -> Result<()> {
    let labelled: Vec<ManifestEntry> = ctx.read(LABELS)?;
    let rows = expand_multilabel(&labelled);
    let outcome = one_sided_selection(&rows, &ctx.lexicon, majority, distance, ctx.seed)?;
    ctx.write(BALANCED, &outcome.retained)?;
    let mut logs: Vec<LogEntry> = Vec::new();
    for r in &outcome.condensed_away {
        logs.push(warn(
            BALANCED,
            Some(&r.report_id),
            "removed by nearest-neighbour condensation",
        ));
    }
    for r in &outcome.tomek_removed {
        logs.push(warn(
            BALANCED,
            Some(&r.report_id),
            "removed as a Tomek-link member",
        ));
    }
    for l in &mut logs {
        l.level = "info".into();
    }
    let counts = class_counts(ctx, outcome.retained.iter().flat_map(|e| e.labels.iter()));
    ctx.log(
        BALANCED,
        &logs,
        &format!(
            "{} rows in, {} retained ({} condensed, {} Tomek); {counts}",
            rows.len(),
            outcome.retained.len(),
            outcome.condensed_away.len(),
            outcome.tomek_removed.len()
        ),
    )
}

pub fn split(ctx: &Context, ratios: [f64; 3]) -> Result<()> {
    let rows: Vec<ManifestEntry> = ctx.read(BALANCED)?;
    let spec = SplitSpec {
        ratios,
        seed: ctx.seed,
        stratified: true,
    };
    let outcome = labelling::split(&rows, &spec, &ctx.lexicon)?;
    ctx.write(SPLITS, &outcome.rows)?;

    let mut logs: Vec<LogEntry> = outcome
        .warnings
        .iter()
        .map(|w| warn(SPLITS, None, w.clone()))
        .collect();
    let mut table = vec![[0usize; 3]; ctx.lexicon.num_classes()];
    for row in &outcome.rows {
        let c = ctx.lexicon.class_index(&row.labels[0])?;
        let col = match row.split {
            Split::Train => 0,
            Split::Val => 1,
            _ => 2,
        };
        table[c][col] += 1;
    }
    for (class, [train, val, test]) in ctx.lexicon.classes().iter().zip(&table) {
        logs.push(LogEntry {
            stage: SPLITS.into(),
            level: "info".into(),
            item: Some(class.id.clone()),
            message: format!("train {train}, val {val}, test {test}"),
        });
    }
    ctx.log(SPLITS, &logs, &format!("{} rows split", outcome.rows.len()))
}

fn rows_in(rows: &[ManifestEntry], splits: &[Split]) -> Vec<ManifestEntry> {
    rows.iter()
        .filter(|r| splits.contains(&r.split))
        .cloned()
        .collect()
}

pub fn bank(ctx: &Context) -> Result<()> {
    let rows: Vec<ManifestEntry> = ctx.read(SPLITS)?;
    let cleaned = load_cleaned(ctx)?;
    let test_ids: std::collections::BTreeSet<&str> = rows
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| r.report_id.as_str())
        .collect();
    let reports: Vec<CleanedReport> = test_ids
        .iter()
        .filter_map(|id| cleaned.get(*id).cloned())
        .collect();
    let bank = build_bank(&reports, &ctx.matcher, &mut derive_rng(ctx.seed, &["bank"]));
    ctx.write(BANK, &bank.to_records(&ctx.lexicon))?;
    let logs: Vec<LogEntry> = bank
        .short_concepts()
        .into_iter()
        .map(|c| {
            let n = bank.entries(c).len();
            let id = &ctx.lexicon.concepts()[c].id;
            if n == 0 {
                warn(BANK, Some(id), "bank gap: no qualifying sentence")
            } else {
                warn(BANK, Some(id), format!("only {n} qualifying sentence(s)"))
            }
        })
        .collect();
    ctx.log(
        BANK,
        &logs,
        &format!(
            "bank over {} test reports, {} gap(s)",
            reports.len(),
            bank.gaps().len()
        ),
    )
}

pub fn perturb(ctx: &Context) -> Result<()> {
    let rows: Vec<ManifestEntry> = ctx.read(SPLITS)?;
    let reference = rows_in(&rows, &[Split::Train, Split::Val]);
    let test = rows_in(&rows, &[Split::Test]);
    let index = build_valid_index(&reference, &ctx.lexicon)?;
    let config = PerturbConfig {
        global_seed: ctx.seed,
        k_inter: ctx.k_inter,
        k_outer: ctx.k_outer,
    };
    let results = test
        .par_iter()
        .map(|row| perturb_all(row, &ctx.lexicon, &index, &config))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut records: Vec<PerturbationRecord> = Vec::new();
    let mut logs = Vec::new();
    for (row, r) in test.iter().zip(results) {
        records.extend(r.records);
        logs.extend(
            r.warnings
                .into_iter()
                .map(|w| warn(PERTURBATIONS, Some(&row.report_id), w)),
        );
    }
    ctx.write(PERTURBATIONS, &records)?;
    let expected = test.len() * (ctx.k_inter + ctx.k_outer);
    ctx.log(
        PERTURBATIONS,
        &logs,
        &format!(
            "{} records for {} test rows (budget {expected})",
            records.len(),
            test.len()
        ),
    )
}

pub fn load_bank(ctx: &Context) -> Result<SentenceBank> {
    let records: Vec<BankRecord> = ctx.read(BANK)?;
    Ok(SentenceBank::from_records(&records, &ctx.lexicon)?)
}

pub fn synthesize_stage(ctx: &Context) -> Result<()> {
    let records: Vec<PerturbationRecord> = ctx.read(PERTURBATIONS)?;
    let cleaned = load_cleaned(ctx)?;
    let bank = load_bank(ctx)?;
    let outcomes: Vec<_> = records
        .par_iter()
        .map(|record| {
            let original = cleaned.get(&record.report_id).ok_or_else(|| {
                PipelineError::Data(format!("no cleaned report for {:?}", record.report_id))
            })?;
            let mut rng = derive_rng(ctx.seed, &["synthesize", &record.adversarial_id]);
            Ok(synthesize(
                record,
                original,
                &bank,
                &ctx.matcher,
                &ctx.lexicon,
                &mut rng,
            ))
        })
        .collect::<Result<_>>()?;
    let mut reports = Vec::new();
    let mut logs = Vec::new();
    for (record, outcome) in records.iter().zip(outcomes) {
        match outcome {
            Ok(r) => reports.push(r),
            Err(e) => logs.push(warn(
                ADVERSARIAL,
                Some(&record.adversarial_id),
                format!("unsynthesizable: {e}"),
            )),
        }
    }
    reports.sort_by(|a, b| a.adversarial_id.cmp(&b.adversarial_id));
    ctx.write(ADVERSARIAL, &reports)?;
    let repaired = reports.iter().filter(|r| r.repair_rounds > 0).count();
    ctx.log(
        ADVERSARIAL,
        &logs,
        &format!(
            "{} adversarial reports ({} needed repair), {} unsynthesizable",
            reports.len(),
            repaired,
            logs.len()
        ),
    )
}

pub fn prompts(ctx: &Context) -> Result<()> {
    let reports: Vec<AdversarialReport> = ctx.read(ADVERSARIAL)?;
    let prompts: Vec<PromptRecord> = emit_prompts(&reports);
    ctx.write(PROMPTS, &prompts)?;
    ctx.log(PROMPTS, &[], &format!("{} prompts", prompts.len()))
}

/// Evaluation output: the metrics report plus any ASR-curve areas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    #[serde(flatten)]
    pub report: MetricsReport,
    pub curve_auc: BTreeMap<String, f64>,
}

pub struct EvaluateArgs<'a> {
    pub predictions: &'a Path,
    pub adversarial: Option<&'a Path>,
    pub perturbations: Option<&'a Path>,
    pub outer_truth: OuterTruth,
    pub curves: &'a [(String, PathBuf)],
}

pub fn evaluate(ctx: &Context, args: &EvaluateArgs, write: bool) -> Result<EvaluationRecord> {
    let original = PredictionSet::from_path(args.predictions, &ctx.lexicon)?;
    let adversarial = match args.adversarial {
        Some(p) => PredictionSet::from_path(p, &ctx.lexicon)?,
        None => PredictionSet::default(),
    };
    let records: Vec<PerturbationRecord> = if adversarial.rows.is_empty() {
        Vec::new()
    } else {
        let path = args
            .perturbations
            .map(Path::to_path_buf)
            .unwrap_or_else(|| ctx.path(PERTURBATIONS));
        read_stage(&path, PERTURBATIONS, &ctx.lexicon.hash())?.1
    };
    let report = metrics::evaluate(
        &original,
        &adversarial,
        &records,
        &ctx.lexicon,
        args.outer_truth,
    )?;
    let mut curve_auc = BTreeMap::new();
    for (name, path) in args.curves {
        curve_auc.insert(
            name.clone(),
            metrics::asr_curve_auc(&metrics::read_curve(path)?)?,
        );
    }
    let record = EvaluationRecord { report, curve_auc };
    if write {
        ctx.write(METRICS, [&record])?;
        let logs: Vec<LogEntry> = record
            .report
            .warnings
            .iter()
            .map(|w| warn(METRICS, None, w.clone()))
            .collect();
        ctx.log(METRICS, &logs, "metrics written")?;
    }
    Ok(record)
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}
