//! From concept vectors to a balanced, split, labelled dataset.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{ManifestEntry, Split};
use crate::lexicon::{ConceptLexicon, LexiconError};
use crate::rng::derive_rng;
use crate::vector::ConceptVector;

#[derive(Debug, thiserror::Error)]
pub enum LabellingError {
    #[error("no rows to process")]
    Empty,
    #[error("majority class {0:?} has no rows")]
    MajorityAbsent(String),
    #[error("one-sided selection needs at least two classes, found only {0:?}")]
    SingleClass(String),
    #[error("row {0:?} has no canonical vector")]
    MissingVector(String),
    #[error("row {report_id:?} must carry exactly one label, found {count}")]
    NotExpanded { report_id: String, count: usize },
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios([f64; 3]),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

/// Clears the summary concept when any other concept is present.
pub fn canonicalize(vector: &ConceptVector, lexicon: &ConceptLexicon) -> ConceptVector {
    let summary = lexicon.summary_concept();
    let mut v = *vector;
    if v.mask() & !(1u64 << summary) != 0 {
        v.set(summary, false);
    }
    v
}

/// Class indices assigned to a canonical vector, ascending.
///
/// A concept shared between classes counts for its disambiguation rule's
/// default class unless another concept of the override class is present.
pub fn labels_for(vector: &ConceptVector, lexicon: &ConceptLexicon) -> Vec<usize> {
    let mut labels = vec![false; lexicon.num_classes()];
    for concept in vector.ones() {
        let rule = lexicon
            .disambiguation()
            .iter()
            .find(|r| r.concept == concept);
        match rule {
            Some(rule) => {
                let others = lexicon.class_mask(rule.override_class) & !(1u64 << concept);
                if vector.mask() & others != 0 {
                    labels[rule.override_class] = true;
                } else {
                    labels[rule.default_class] = true;
                }
            }
            None => {
                for &class in &lexicon.concepts()[concept].class_ids {
                    labels[class] = true;
                }
            }
        }
    }
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, &set)| set.then_some(i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelAssignment {
    pub report_id: String,
    pub labels: Vec<usize>,
    pub canonical_vector: ConceptVector,
}

pub fn assign_labels(
    report_id: &str,
    vector: &ConceptVector,
    lexicon: &ConceptLexicon,
) -> LabelAssignment {
    let canonical_vector = canonicalize(vector, lexicon);
    LabelAssignment {
        report_id: report_id.to_string(),
        labels: labels_for(&canonical_vector, lexicon),
        canonical_vector,
    }
}

/// One row per (report, label); rows keep the full canonical vector.
/// Entries without labels produce no rows.
pub fn expand_multilabel(entries: &[ManifestEntry]) -> Vec<ManifestEntry> {
    let mut rows: Vec<ManifestEntry> = entries
        .iter()
        .flat_map(|entry| {
            entry.labels.iter().map(move |label| ManifestEntry {
                labels: vec![label.clone()],
                ..entry.clone()
            })
        })
        .collect();
    sort_rows(&mut rows);
    rows
}

fn sort_rows(rows: &mut [ManifestEntry]) {
    rows.sort_by(|a, b| (&a.report_id, &a.labels).cmp(&(&b.report_id, &b.labels)));
}

fn row_label(row: &ManifestEntry) -> Result<&str, LabellingError> {
    match row.labels.as_slice() {
        [label] => Ok(label),
        other => Err(LabellingError::NotExpanded {
            report_id: row.report_id.clone(),
            count: other.len(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Distance {
    #[default]
    Hamming,
    Euclidean,
}

impl std::str::FromStr for Distance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hamming" => Ok(Distance::Hamming),
            "euclidean" => Ok(Distance::Euclidean),
            other => Err(format!("unknown distance {other:?} (hamming|euclidean)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OssOutcome {
    pub retained: Vec<ManifestEntry>,
    /// Majority rows dropped by the 1-NN condensation step.
    pub condensed_away: Vec<ManifestEntry>,
    /// Majority rows dropped as members of Tomek links.
    pub tomek_removed: Vec<ManifestEntry>,
}

/// One-Sided Selection over expanded rows, with concept vectors as features.
///
/// Rows are processed in (report_id, label) order; nearest-neighbour ties
/// go to the earlier row.
pub fn one_sided_selection(
    rows: &[ManifestEntry],
    lexicon: &ConceptLexicon,
    majority: &str,
    distance: Distance,
    seed: u64,
) -> Result<OssOutcome, LabellingError> {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let mut labels = Vec::with_capacity(rows.len());
    let mut features = Vec::with_capacity(rows.len());
    for row in &rows {
        labels.push(lexicon.class_index(row_label(row)?)?);
        features.push(
            row.vector
                .ok_or_else(|| LabellingError::MissingVector(row.report_id.clone()))?,
        );
    }
    let majority_class = lexicon.class_index(majority)?;
    let dist = |a: usize, b: usize| {
        let hamming = (features[a].mask() ^ features[b].mask()).count_ones() as f64;
        match distance {
            Distance::Hamming => hamming,
            Distance::Euclidean => hamming.sqrt(),
        }
    };
    let selection = oss_select(&labels, majority_class, seed, dist).map_err(|e| match e {
        OssIndexError::Empty => LabellingError::Empty,
        OssIndexError::MajorityAbsent => LabellingError::MajorityAbsent(majority.to_string()),
        OssIndexError::SingleClass(c) => {
            LabellingError::SingleClass(lexicon.class_id(c).to_string())
        }
    })?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| rows[i].clone()).collect();
    Ok(OssOutcome {
        retained: pick(&selection.retained),
        condensed_away: pick(&selection.condensed_away),
        tomek_removed: pick(&selection.tomek_removed),
    })
}

/// One-Sided Selection over caller-supplied feature vectors (Euclidean).
pub fn one_sided_selection_features(
    features: &[Vec<f64>],
    labels: &[usize],
    majority: usize,
    seed: u64,
) -> Result<OssSelection, OssIndexError> {
    oss_select(labels, majority, seed, |a, b| {
        features[a]
            .iter()
            .zip(&features[b])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OssIndexError {
    #[error("empty input")]
    Empty,
    #[error("majority class absent")]
    MajorityAbsent,
    #[error("only class {0} present")]
    SingleClass(usize),
}

/// Row indices by fate, each ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OssSelection {
    pub retained: Vec<usize>,
    pub condensed_away: Vec<usize>,
    pub tomek_removed: Vec<usize>,
}

fn oss_select(
    labels: &[usize],
    majority: usize,
    seed: u64,
    dist: impl Fn(usize, usize) -> f64,
) -> Result<OssSelection, OssIndexError> {
    if labels.is_empty() {
        return Err(OssIndexError::Empty);
    }
    let majority_rows: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == majority)
        .collect();
    if majority_rows.is_empty() {
        return Err(OssIndexError::MajorityAbsent);
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(OssIndexError::SingleClass(labels[0]));
    }

    let nearest = |i: usize, pool: &[usize]| -> usize {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for &j in pool {
            if j == i {
                continue;
            }
            let d = dist(i, j);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    };

    // Store: every minority row plus one seeded majority row.
    let mut rng = derive_rng(seed, &["one-sided-selection"]);
    let seed_row = majority_rows[rng.gen_range(0..majority_rows.len())];
    let mut in_store = vec![false; labels.len()];
    for (i, &l) in labels.iter().enumerate() {
        in_store[i] = l != majority || i == seed_row;
    }
    let initial: Vec<usize> = (0..labels.len()).filter(|&i| in_store[i]).collect();

    // 1-NN against the initial store; misclassified majority rows join it.
    let mut condensed_away = Vec::new();
    for &i in &majority_rows {
        if i == seed_row {
            continue;
        }
        if labels[nearest(i, &initial)] != majority {
            in_store[i] = true;
        } else {
            condensed_away.push(i);
        }
    }

    // Tomek links inside the store; drop their majority members.
    let store: Vec<usize> = (0..labels.len()).filter(|&i| in_store[i]).collect();
    let nn: HashMap<usize, usize> = store.iter().map(|&i| (i, nearest(i, &store))).collect();
    let mut tomek_removed = Vec::new();
    for &i in &store {
        let j = nn[&i];
        if j != usize::MAX
            && labels[i] == majority
            && labels[j] != majority
            && nn.get(&j) == Some(&i)
        {
            tomek_removed.push(i);
        }
    }
    let retained = store
        .into_iter()
        .filter(|i| tomek_removed.binary_search(i).is_err())
        .collect();
    Ok(OssSelection {
        retained,
        condensed_away,
        tomek_removed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            seed: crate::rng::DEFAULT_SEED,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), LabellingError> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(LabellingError::BadRatios(self.ratios));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items over the ratios.
pub fn allocate(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut remaining = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutcome {
    pub rows: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
}

/// Seeded partition of rows into train/val/test.
///
/// All rows of one report land in the same partition. Stratification groups
/// reports by their rarest label; a stratum with fewer than three reports
/// goes entirely to train.
pub fn split(
    rows: &[ManifestEntry],
    spec: &SplitSpec,
    lexicon: &ConceptLexicon,
) -> Result<SplitOutcome, LabellingError> {
    spec.validate()?;
    let mut class_counts: HashMap<usize, usize> = HashMap::new();
    let mut reports: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for row in rows {
        let class = lexicon.class_index(row_label(row)?)?;
        *class_counts.entry(class).or_default() += 1;
        reports.entry(&row.report_id).or_default().push(class);
    }

    let mut strata: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (report_id, classes) in &reports {
        let stratum = if spec.stratified {
            *classes
                .iter()
                .min_by_key(|c| (class_counts[c], **c))
                .expect("report has rows")
        } else {
            0
        };
        strata.entry(stratum).or_default().push(report_id);
    }

    let mut warnings = Vec::new();
    let mut assignment: HashMap<&str, Split> = HashMap::new();
    for (stratum, mut members) in strata {
        let name = if spec.stratified {
            lexicon.class_id(stratum)
        } else {
            "all"
        };
        if members.len() < 3 {
            warnings.push(format!(
                "stratum {name:?} has {} report(s); too few to stratify, assigned to train",
                members.len()
            ));
            for m in members {
                assignment.insert(m, Split::Train);
            }
            continue;
        }
        let mut rng = derive_rng(spec.seed, &["split", name]);
        members.shuffle(&mut rng);
        let [n_train, n_val, _] = allocate(members.len(), &spec.ratios);
        for (i, m) in members.into_iter().enumerate() {
            let tag = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            assignment.insert(m, tag);
        }
    }

    let mut out: Vec<ManifestEntry> = rows
        .iter()
        .map(|row| ManifestEntry {
            split: assignment[row.report_id.as_str()],
            ..row.clone()
        })
        .collect();
    sort_rows(&mut out);
    Ok(SplitOutcome {
        rows: out,
        warnings,
    })
}
