//! Inter-class and outer-class concept vector perturbations.
//!
//! Validity is judged per class on restricted sub-vectors: a perturbation of
//! class `L` is valid when the bits of `L`'s concepts form a pattern that was
//! actually observed among rows labelled `L` in the reference corpus.
//!
//! Random choice is rejection sampling capped at [`MAX_DRAWS`] per slot,
//! falling back to a seeded pick from the exhaustively enumerated candidate
//! set so sparse classes cannot livelock.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ManifestEntry;
use crate::lexicon::{ConceptLexicon, LexiconError};
use crate::rng::derive_rng;
use crate::vector::{mask_indices, ConceptVector};

pub const MAX_DRAWS: usize = 100;
pub const DEFAULT_K_INTER: usize = 2;
pub const DEFAULT_K_OUTER: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum PerturbationError {
    #[error("reference corpus is empty")]
    EmptyCorpus,
    #[error("row {0:?} has no canonical vector")]
    MissingVector(String),
    #[error("row {report_id:?} must carry exactly one label, found {count}")]
    NotExpanded { report_id: String, count: usize },
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

/// Per class: the distinct restricted sub-vectors observed for that class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidVectorIndex {
    per_class: Vec<BTreeSet<u64>>,
}

impl ValidVectorIndex {
    pub fn contains(&self, class: usize, restriction: u64) -> bool {
        self.per_class[class].contains(&restriction)
    }

    pub fn class_set(&self, class: usize) -> &BTreeSet<u64> {
        &self.per_class[class]
    }
}

fn single_label(row: &ManifestEntry) -> Result<&str, PerturbationError> {
    match row.labels.as_slice() {
        [label] => Ok(label),
        other => Err(PerturbationError::NotExpanded {
            report_id: row.report_id.clone(),
            count: other.len(),
        }),
    }
}

pub fn build_valid_index(
    rows: &[ManifestEntry],
    lexicon: &ConceptLexicon,
) -> Result<ValidVectorIndex, PerturbationError> {
    if rows.is_empty() {
        return Err(PerturbationError::EmptyCorpus);
    }
    let mut per_class = vec![BTreeSet::new(); lexicon.num_classes()];
    for row in rows {
        let class = lexicon.class_index(single_label(row)?)?;
        let v = row
            .vector
            .ok_or_else(|| PerturbationError::MissingVector(row.report_id.clone()))?;
        let restriction = v.restrict(lexicon.class_mask(class));
        if restriction != 0 {
            per_class[class].insert(restriction);
        }
    }
    Ok(ValidVectorIndex { per_class })
}

/// Spreads the low bits of `draw` over the set positions of `mask`.
fn deposit(mask: u64, draw: u64) -> u64 {
    mask_indices(mask)
        .enumerate()
        .filter(|(k, _)| draw & (1 << k) != 0)
        .fold(0, |acc, (_, pos)| acc | (1 << pos))
}

/// Next inter-class perturbation not already in `taken`.
pub fn next_inter(
    v: &ConceptVector,
    class: usize,
    lexicon: &ConceptLexicon,
    index: &ValidVectorIndex,
    rng: &mut impl Rng,
    taken: &[ConceptVector],
) -> Option<ConceptVector> {
    let mask = lexicon.class_mask(class);
    let original = v.restrict(mask);
    let width = mask.count_ones();
    let acceptable = |r: u64| {
        let candidate = v.with_masked(mask, r);
        (r != original && r != 0 && index.contains(class, r) && !taken.contains(&candidate))
            .then_some(candidate)
    };
    for _ in 0..MAX_DRAWS {
        let r = deposit(mask, rng.gen_range(0..1u64 << width));
        if let Some(candidate) = acceptable(r) {
            return Some(candidate);
        }
    }
    let candidates: Vec<ConceptVector> = index
        .class_set(class)
        .iter()
        .filter_map(|&r| acceptable(r))
        .collect();
    candidates.choose(rng).copied()
}

/// Up to `k` distinct inter-class perturbations of `v` for class `class`.
pub fn perturb_inter(
    v: &ConceptVector,
    class: usize,
    lexicon: &ConceptLexicon,
    index: &ValidVectorIndex,
    rng: &mut impl Rng,
    k: usize,
) -> Perturbations<ConceptVector> {
    let mut found = Vec::new();
    for _ in 0..k {
        match next_inter(v, class, lexicon, index, rng, &found) {
            Some(p) => found.push(p),
            None => break,
        }
    }
    Perturbations {
        shortfall: k - found.len(),
        found,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perturbations<T> {
    pub found: Vec<T>,
    pub shortfall: usize,
}

/// Classes eligible as outer targets for an original of class `class`.
fn outer_targets(class: usize, lexicon: &ConceptLexicon) -> Vec<usize> {
    (0..lexicon.num_classes())
        .filter(|&t| t != class && t != lexicon.summary_class())
        .collect()
}

/// Next outer-class perturbation `(vector, target class)` not in `taken`.
///
/// Bits of the original class stay fixed, including concepts shared with the
/// target class; only the target's remaining concepts are redrawn. A result
/// equal to the original vector is never returned.
pub fn next_outer(
    v: &ConceptVector,
    class: usize,
    lexicon: &ConceptLexicon,
    index: &ValidVectorIndex,
    rng: &mut impl Rng,
    taken: &[(ConceptVector, usize)],
) -> Option<(ConceptVector, usize)> {
    let targets = outer_targets(class, lexicon);
    if targets.is_empty() {
        return None;
    }
    let fixed = lexicon.class_mask(class);
    let acceptable = |target: usize, r: u64| {
        let target_mask = lexicon.class_mask(target);
        let free = target_mask & !fixed;
        let candidate = v.with_masked(free, r);
        let restriction = candidate.restrict(target_mask);
        (restriction != 0
            && index.contains(target, restriction)
            && candidate != *v
            && !taken.contains(&(candidate, target)))
        .then_some((candidate, target))
    };
    for _ in 0..MAX_DRAWS {
        let target = *targets.choose(rng).expect("non-empty");
        if index.class_set(target).is_empty() {
            continue;
        }
        let free = lexicon.class_mask(target) & !fixed;
        let r = deposit(free, rng.gen_range(0..1u64 << free.count_ones()));
        if let Some(hit) = acceptable(target, r) {
            return Some(hit);
        }
    }
    let by_target: Vec<Vec<(ConceptVector, usize)>> = targets
        .iter()
        .map(|&t| {
            let free = lexicon.class_mask(t) & !fixed;
            let set: BTreeSet<(ConceptVector, usize)> = index
                .class_set(t)
                .iter()
                .filter_map(|&r| acceptable(t, r & free))
                .collect();
            set.into_iter().collect()
        })
        .filter(|c: &Vec<_>| !c.is_empty())
        .collect();
    let group = by_target.choose(rng)?;
    group.choose(rng).copied()
}

pub fn perturb_outer(
    v: &ConceptVector,
    class: usize,
    lexicon: &ConceptLexicon,
    index: &ValidVectorIndex,
    rng: &mut impl Rng,
    k: usize,
) -> Perturbations<(ConceptVector, usize)> {
    let mut found = Vec::new();
    for _ in 0..k {
        match next_outer(v, class, lexicon, index, rng, &found) {
            Some(p) => found.push(p),
            None => break,
        }
    }
    Perturbations {
        shortfall: k - found.len(),
        found,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Inter,
    Outer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub global_seed: u64,
    pub report_id: String,
    pub slot: usize,
}

/// One perturbed vector linked back to the report it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub adversarial_id: String,
    pub report_id: String,
    pub kind: PerturbationKind,
    pub original_class: String,
    pub target_class: Option<String>,
    pub original_vector: ConceptVector,
    pub perturbed_vector: ConceptVector,
    pub seed_lineage: SeedLineage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerturbConfig {
    pub global_seed: u64,
    pub k_inter: usize,
    pub k_outer: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            global_seed: crate::rng::DEFAULT_SEED,
            k_inter: DEFAULT_K_INTER,
            k_outer: DEFAULT_K_OUTER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RowPerturbations {
    pub records: Vec<PerturbationRecord>,
    pub inter_shortfall: usize,
    pub outer_shortfall: usize,
    pub warnings: Vec<String>,
}

pub fn adversarial_id(report_id: &str, class_id: &str, slot: usize) -> String {
    format!("{report_id}_{class_id}_p{slot}")
}

/// All perturbations for one labelled row.
///
/// Classes with fewer than two concepts get no inter-class slots; their
/// budget moves to outer-class slots, as does any inter-class shortfall.
/// Slot `s` draws from its own stream keyed by (seed, report, class, slot,
/// kind).
pub fn perturb_all(
    row: &ManifestEntry,
    lexicon: &ConceptLexicon,
    index: &ValidVectorIndex,
    config: &PerturbConfig,
) -> Result<RowPerturbations, PerturbationError> {
    let class_id = single_label(row)?;
    let class = lexicon.class_index(class_id)?;
    let v = row
        .vector
        .ok_or_else(|| PerturbationError::MissingVector(row.report_id.clone()))?;

    let (k_inter, mut k_outer) = if lexicon.class_mask(class).count_ones() < 2 {
        (0, config.k_inter + config.k_outer)
    } else {
        (config.k_inter, config.k_outer)
    };

    let slot_rng = |slot: usize, kind: &str| {
        derive_rng(
            config.global_seed,
            &["perturb", &row.report_id, class_id, &slot.to_string(), kind],
        )
    };
    let mut out = RowPerturbations::default();
    let record = |slot: usize, kind, target: Option<usize>, perturbed| PerturbationRecord {
        adversarial_id: adversarial_id(&row.report_id, class_id, slot),
        report_id: row.report_id.clone(),
        kind,
        original_class: class_id.to_string(),
        target_class: target.map(|t| lexicon.class_id(t).to_string()),
        original_vector: v,
        perturbed_vector: perturbed,
        seed_lineage: SeedLineage {
            global_seed: config.global_seed,
            report_id: row.report_id.clone(),
            slot,
        },
    };

    let mut inter_taken = Vec::new();
    for _ in 0..k_inter {
        let slot = out.records.len();
        let mut rng = slot_rng(slot, "inter");
        match next_inter(&v, class, lexicon, index, &mut rng, &inter_taken) {
            Some(p) => {
                inter_taken.push(p);
                out.records
                    .push(record(slot, PerturbationKind::Inter, None, p));
            }
            None => out.inter_shortfall += 1,
        }
    }
    if out.inter_shortfall > 0 {
        out.warnings.push(format!(
            "{}/{class_id}: {} inter-class perturbation(s) unavailable, substituted by outer-class",
            row.report_id, out.inter_shortfall
        ));
        k_outer += out.inter_shortfall;
    }

    let mut outer_taken = Vec::new();
    for _ in 0..k_outer {
        let slot = out.records.len();
        let mut rng = slot_rng(slot, "outer");
        match next_outer(&v, class, lexicon, index, &mut rng, &outer_taken) {
            Some((p, target)) => {
                outer_taken.push((p, target));
                out.records
                    .push(record(slot, PerturbationKind::Outer, Some(target), p));
            }
            None => out.outer_shortfall += 1,
        }
    }
    if out.outer_shortfall > 0 {
        out.warnings.push(format!(
            "{}/{class_id}: {} outer-class perturbation(s) unavailable",
            row.report_id, out.outer_shortfall
        ));
    }
    if out.records.is_empty() {
        out.warnings.push(format!(
            "{}/{class_id}: no valid perturbation of either kind",
            row.report_id
        ));
    }
    Ok(out)
}
