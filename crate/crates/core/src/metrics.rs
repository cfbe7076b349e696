//! Evaluation metrics computed from externally produced prediction files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::lexicon::ConceptLexicon;
use crate::perturbation::{PerturbationKind, PerturbationRecord};

/// Abort threshold for unjoined adversarial items.
pub const MAX_UNJOINED_FRACTION: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: header must be item_id,true_label,{expected}; found {found}")]
    Header {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}:{line}: {message}")]
    Row {
        path: String,
        line: u64,
        message: String,
    },
    #[error("duplicate item id {0:?}")]
    DuplicateItem(String),
    #[error("attack success rate needs at least one record")]
    EmptyRecords,
    #[error("ASR curve needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("ASR curve parameters must be strictly increasing (at point {0})")]
    NonIncreasing(usize),
    #[error("{unjoined} of {total} adversarial items failed to join (limit 1%): {items:?}")]
    JoinFailure {
        unjoined: usize,
        total: usize,
        items: Vec<String>,
    },
    #[error("record {record}: unknown class {class:?}")]
    UnknownClass { record: String, class: String },
    #[error("scores for {item} have {found} classes, expected {expected}")]
    ScoreCount {
        item: String,
        found: usize,
        expected: usize,
    },
}

/// One item as seen by a binary ranking metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredItem<'a> {
    pub id: &'a str,
    pub score: f64,
    pub relevant: bool,
}

fn ranked<'a>(items: &[ScoredItem<'a>]) -> Vec<ScoredItem<'a>> {
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(b.id)));
    sorted
}

/// Step-interpolated average precision. `None` without positives.
pub fn average_precision(items: &[ScoredItem]) -> Option<f64> {
    let positives = items.iter().filter(|i| i.relevant).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, item) in ranked(items).iter().enumerate() {
        if item.relevant {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Rank-statistic AUROC with average ranks for tied scores. `None` unless
/// both classes are present.
pub fn auroc(items: &[ScoredItem]) -> Option<f64> {
    let p = items.iter().filter(|i| i.relevant).count();
    let n = items.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].score == sorted[i].score {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * sorted[i..=j].iter().filter(|x| x.relevant).count() as f64;
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Class indices by descending score, ties by ascending index.
fn class_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Whether the model withstood one adversarial example.
///
/// Inter: the top class is still the original. Outer: the two top classes
/// are exactly the original and the target.
pub fn robustness_verdict(
    kind: PerturbationKind,
    original: usize,
    target: Option<usize>,
    scores: &[f64],
) -> bool {
    let order = class_order(scores);
    match kind {
        PerturbationKind::Inter => order.first() == Some(&original),
        PerturbationKind::Outer => {
            let Some(target) = target else { return false };
            if order.len() < 2 {
                return false;
            }
            let top: BTreeSet<usize> = order[..2].iter().copied().collect();
            top == BTreeSet::from([original, target])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrSummary {
    pub inter: Option<f64>,
    pub outer: Option<f64>,
    pub all: f64,
    pub n_inter: usize,
    pub n_outer: usize,
    pub fooled_inter: usize,
    pub fooled_outer: usize,
}

/// ASR per kind and overall from `(kind, robust)` verdicts.
pub fn attack_success_rate(
    verdicts: &[(PerturbationKind, bool)],
) -> Result<AsrSummary, MetricsError> {
    if verdicts.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let count = |kind| {
        let of_kind: Vec<_> = verdicts.iter().filter(|(k, _)| *k == kind).collect();
        (
            of_kind.len(),
            of_kind.iter().filter(|(_, robust)| !robust).count(),
        )
    };
    let (n_inter, fooled_inter) = count(PerturbationKind::Inter);
    let (n_outer, fooled_outer) = count(PerturbationKind::Outer);
    let rate = |fooled: usize, n: usize| (n > 0).then(|| fooled as f64 / n as f64);
    Ok(AsrSummary {
        inter: rate(fooled_inter, n_inter),
        outer: rate(fooled_outer, n_outer),
        all: (fooled_inter + fooled_outer) as f64 / verdicts.len() as f64,
        n_inter,
        n_outer,
        fooled_inter,
        fooled_outer,
    })
}

/// Area under an ASR curve after min-max normalising the parameter axis.
pub fn asr_curve_auc(points: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if points.len() < 2 {
        return Err(MetricsError::TooFewPoints(points.len()));
    }
    if let Some(i) = points.windows(2).position(|w| w[1].0 <= w[0].0) {
        return Err(MetricsError::NonIncreasing(i + 1));
    }
    let lo = points[0].0;
    let span = points[points.len() - 1].0 - lo;
    Ok(points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) / span * (w[0].1 + w[1].1) / 2.0)
        .sum())
}

/// Reads a `param,asr` curve file with a header row.
pub fn read_curve(path: &Path) -> Result<Vec<(f64, f64)>, MetricsError> {
    let csv_err = |source| MetricsError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut points = Vec::new();
    for row in reader.deserialize::<(f64, f64)>() {
        points.push(row.map_err(csv_err)?);
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub item_id: String,
    pub true_label: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub rows: Vec<PredictionRow>,
}

impl PredictionSet {
    /// Parses `item_id,true_label,score_<class>...` with classes in lexicon order.
    pub fn from_path(path: &Path, lexicon: &ConceptLexicon) -> Result<Self, MetricsError> {
        let data = std::fs::read(path).map_err(|e| MetricsError::Csv {
            path: path.display().to_string(),
            source: e.into(),
        })?;
        Self::from_reader(&data[..], &path.display().to_string(), lexicon)
    }

    pub fn from_reader(
        input: impl std::io::Read,
        name: &str,
        lexicon: &ConceptLexicon,
    ) -> Result<Self, MetricsError> {
        let csv_err = |source| MetricsError::Csv {
            path: name.to_string(),
            source,
        };
        let mut reader = csv::Reader::from_reader(input);
        let header = reader.headers().map_err(csv_err)?.clone();
        let score_cols: Vec<String> = lexicon
            .classes()
            .iter()
            .map(|c| format!("score_{}", c.id))
            .collect();
        let expected: Vec<&str> = ["item_id", "true_label"]
            .into_iter()
            .chain(score_cols.iter().map(String::as_str))
            .collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(MetricsError::Header {
                path: name.to_string(),
                expected: score_cols.join(","),
                found: header.iter().collect::<Vec<_>>().join(","),
            });
        }
        let mut rows = Vec::new();
        let mut seen = BTreeSet::new();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            let line = record.position().map_or(0, |p| p.line());
            let row_err = |message: String| MetricsError::Row {
                path: name.to_string(),
                line,
                message,
            };
            let item_id = record[0].to_string();
            let true_label = lexicon
                .class_index(&record[1])
                .map_err(|_| row_err(format!("unknown class {:?}", &record[1])))?;
            let scores = record
                .iter()
                .skip(2)
                .map(|s| match s.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(row_err(format!("score {s:?} is not a finite number"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            if !seen.insert(item_id.clone()) {
                return Err(MetricsError::DuplicateItem(item_id));
            }
            rows.push(PredictionRow {
                item_id,
                true_label,
                scores,
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub ap: Option<f64>,
    pub auroc: Option<f64>,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub items: usize,
    pub per_class: Vec<ClassMetrics>,
    pub map: Option<f64>,
    pub mauroc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterTruth {
    /// Outer examples count as positives for both the original and target class.
    #[default]
    Both,
    OriginalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub original: SetMetrics,
    pub adversarial: Option<SetMetrics>,
    pub mean_decrease_ap: Option<f64>,
    pub mean_decrease_auroc: Option<f64>,
    pub asr: Option<AsrSummary>,
    pub outer_truth: OuterTruth,
    pub unjoined: Vec<String>,
    pub warnings: Vec<String>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Per-class one-vs-rest metrics; `relevant(row_index, class)` gives ground truth.
fn set_metrics(
    rows: &[&PredictionRow],
    lexicon: &ConceptLexicon,
    relevant: impl Fn(usize, usize) -> bool,
    label: &str,
    warnings: &mut Vec<String>,
) -> SetMetrics {
    let per_class: Vec<ClassMetrics> = lexicon
        .classes()
        .iter()
        .enumerate()
        .map(|(c, class)| {
            let items: Vec<ScoredItem> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| ScoredItem {
                    id: &r.item_id,
                    score: r.scores[c],
                    relevant: relevant(i, c),
                })
                .collect();
            let positives = items.iter().filter(|i| i.relevant).count();
            let ap = average_precision(&items);
            let auroc = auroc(&items);
            if ap.is_none() || auroc.is_none() {
                warnings.push(format!(
                    "{label}: class {} has metrics undefined ({positives} positives of {})",
                    class.id,
                    items.len()
                ));
            }
            ClassMetrics {
                class: class.id.clone(),
                ap,
                auroc,
                positives,
            }
        })
        .collect();
    SetMetrics {
        items: rows.len(),
        map: mean(per_class.iter().map(|m| m.ap)),
        mauroc: mean(per_class.iter().map(|m| m.auroc)),
        per_class,
    }
}

fn check_scores(set: &PredictionSet, n: usize) -> Result<(), MetricsError> {
    match set.rows.iter().find(|r| r.scores.len() != n) {
        Some(r) => Err(MetricsError::ScoreCount {
            item: r.item_id.clone(),
            found: r.scores.len(),
            expected: n,
        }),
        None => Ok(()),
    }
}

/// Original-set metrics, adversarial-set metrics and ASR.
///
/// Adversarial rows join to records by `item_id == adversarial_id`; their
/// `true_label` column is ignored in favour of the record's classes.
pub fn evaluate(
    original: &PredictionSet,
    adversarial: &PredictionSet,
    records: &[PerturbationRecord],
    lexicon: &ConceptLexicon,
    outer_truth: OuterTruth,
) -> Result<MetricsReport, MetricsError> {
    let n = lexicon.num_classes();
    check_scores(original, n)?;
    check_scores(adversarial, n)?;
    let mut warnings = Vec::new();

    let orig_rows: Vec<&PredictionRow> = original.rows.iter().collect();
    let original_metrics = set_metrics(
        &orig_rows,
        lexicon,
        |i, c| orig_rows[i].true_label == c,
        "original",
        &mut warnings,
    );

    if adversarial.rows.is_empty() {
        warnings.push("adversarial predictions are empty; reporting original metrics only".into());
        return Ok(MetricsReport {
            original: original_metrics,
            adversarial: None,
            mean_decrease_ap: None,
            mean_decrease_auroc: None,
            asr: None,
            outer_truth,
            unjoined: Vec::new(),
            warnings,
        });
    }

    let by_id: BTreeMap<&str, &PerturbationRecord> = records
        .iter()
        .map(|r| (r.adversarial_id.as_str(), r))
        .collect();
    let predicted: BTreeSet<&str> = adversarial
        .rows
        .iter()
        .map(|r| r.item_id.as_str())
        .collect();
    let mut unjoined: Vec<String> = adversarial
        .rows
        .iter()
        .filter(|r| !by_id.contains_key(r.item_id.as_str()))
        .map(|r| r.item_id.clone())
        .collect();
    unjoined.extend(
        records
            .iter()
            .filter(|r| !predicted.contains(r.adversarial_id.as_str()))
            .map(|r| r.adversarial_id.clone()),
    );
    unjoined.sort();
    let total = predicted.union(&by_id.keys().copied().collect()).count();
    if unjoined.len() as f64 > MAX_UNJOINED_FRACTION * total as f64 {
        return Err(MetricsError::JoinFailure {
            unjoined: unjoined.len(),
            total,
            items: unjoined,
        });
    }
    if !unjoined.is_empty() {
        warnings.push(format!(
            "{} adversarial items did not join and were skipped",
            unjoined.len()
        ));
    }

    let class_of = |record: &PerturbationRecord, id: &str| {
        lexicon
            .class_index(id)
            .map_err(|_| MetricsError::UnknownClass {
                record: record.adversarial_id.clone(),
                class: id.to_string(),
            })
    };
    // (row, kind, original class, target class)
    let mut joined = Vec::new();
    for row in &adversarial.rows {
        let Some(record) = by_id.get(row.item_id.as_str()) else {
            continue;
        };
        let orig = class_of(record, &record.original_class)?;
        let target = record
            .target_class
            .as_deref()
            .map(|t| class_of(record, t))
            .transpose()?;
        joined.push((row, record.kind, orig, target));
    }

    let adv_rows: Vec<&PredictionRow> = joined.iter().map(|j| j.0).collect();
    let adversarial_metrics = set_metrics(
        &adv_rows,
        lexicon,
        |i, c| {
            let (_, kind, orig, target) = joined[i];
            orig == c
                || (kind == PerturbationKind::Outer
                    && outer_truth == OuterTruth::Both
                    && target == Some(c))
        },
        "adversarial",
        &mut warnings,
    );

    let verdicts: Vec<(PerturbationKind, bool)> = joined
        .iter()
        .map(|&(row, kind, orig, target)| {
            (kind, robustness_verdict(kind, orig, target, &row.scores))
        })
        .collect();
    let asr = if verdicts.is_empty() {
        None
    } else {
        Some(attack_success_rate(&verdicts)?)
    };

    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
    Ok(MetricsReport {
        mean_decrease_ap: diff(original_metrics.map, adversarial_metrics.map),
        mean_decrease_auroc: diff(original_metrics.mauroc, adversarial_metrics.mauroc),
        original: original_metrics,
        adversarial: Some(adversarial_metrics),
        asr,
        outer_truth,
        unjoined,
        warnings,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// Human-readable per-class table followed by the ASR summary.
pub fn render_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    let adv = report.adversarial.as_ref();
    let _ = writeln!(
        out,
        "{:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "class", "AP", "AP_adv", "dAP", "AUROC", "AUC_adv", "dAUROC"
    );
    for (i, m) in report.original.per_class.iter().enumerate() {
        let a = adv.map(|s| &s.per_class[i]);
        let d = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| x - y);
        let _ = writeln!(
            out,
            "{:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            m.class,
            cell(m.ap),
            cell(a.and_then(|a| a.ap)),
            cell(d(m.ap, a.and_then(|a| a.ap))),
            cell(m.auroc),
            cell(a.and_then(|a| a.auroc)),
            cell(d(m.auroc, a.and_then(|a| a.auroc))),
        );
    }
    let _ = writeln!(
        out,
        "{:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "mean",
        cell(report.original.map),
        cell(adv.and_then(|a| a.map)),
        cell(report.mean_decrease_ap),
        cell(report.original.mauroc),
        cell(adv.and_then(|a| a.mauroc)),
        cell(report.mean_decrease_auroc),
    );
    if let Some(asr) = &report.asr {
        let _ = writeln!(
            out,
            "\nASR inter {} ({}/{})  outer {} ({}/{})  all {:.3}",
            cell(asr.inter),
            asr.fooled_inter,
            asr.n_inter,
            cell(asr.outer),
            asr.fooled_outer,
            asr.n_outer,
            asr.all
        );
    }
    out
}
