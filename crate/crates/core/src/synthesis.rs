//! Adversarial report synthesis by sentence removal and insertion.
//!
//! Reports are edited at the level of formatted sentences, the same view
//! concept extraction has. Every emitted report is re-cleaned and
//! re-extracted; it must reproduce the canonical target vector, otherwise a
//! bounded repair loop removes stray-concept sentences and inserts bank
//! sentences for missing concepts.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::extraction::{extract_concept_vector, ConceptMatcher};
use crate::labelling::canonicalize;
use crate::lexicon::{ConceptLexicon, LexiconError};
use crate::perturbation::{PerturbationKind, PerturbationRecord};
use crate::textproc::{clean_text, join_sentences, CleanedReport};
use crate::vector::{mask_indices, ConceptVector};

/// Sentences kept per concept in the bank.
pub const BANK_SIZE: usize = 5;
/// Verify-repair rounds before a record is declared unsynthesizable.
pub const MAX_REPAIR_ROUNDS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SynthesisError {
    #[error("sentence bank has no entry for concept {0:?}")]
    BankGap(String),
    #[error("no bank sentence for concept {0:?} fits inside the target vector")]
    NoEligibleSentence(String),
    #[error("verify-repair did not converge: extracted {got}, target {want}")]
    NonConvergence { got: String, want: String },
    #[error("unknown class {0:?}")]
    UnknownClass(String),
}

impl From<LexiconError> for SynthesisError {
    fn from(e: LexiconError) -> Self {
        SynthesisError::UnknownClass(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankEntry {
    pub words: Vec<String>,
    /// Full concept set of the sentence: one or two concepts.
    pub concepts: ConceptVector,
    pub report_id: String,
    pub sentence_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceBank {
    per_concept: Vec<Vec<BankEntry>>,
}

impl SentenceBank {
    pub fn entries(&self, concept: usize) -> &[BankEntry] {
        &self.per_concept[concept]
    }

    /// Concepts with no bank sentence.
    pub fn gaps(&self) -> Vec<usize> {
        (0..self.per_concept.len())
            .filter(|&c| self.per_concept[c].is_empty())
            .collect()
    }

    /// Concepts with fewer than [`BANK_SIZE`] sentences (gaps included).
    pub fn short_concepts(&self) -> Vec<usize> {
        (0..self.per_concept.len())
            .filter(|&c| self.per_concept[c].len() < BANK_SIZE)
            .collect()
    }

    pub fn to_records(&self, lexicon: &ConceptLexicon) -> Vec<BankRecord> {
        self.per_concept
            .iter()
            .enumerate()
            .map(|(c, entries)| BankRecord {
                concept: lexicon.concepts()[c].id.clone(),
                entries: entries
                    .iter()
                    .map(|e| BankEntryRecord {
                        sentence: e.words.join(" "),
                        concepts: lexicon
                            .concept_ids_of(&e.concepts)
                            .into_iter()
                            .map(String::from)
                            .collect(),
                        report_id: e.report_id.clone(),
                        sentence_index: e.sentence_index,
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn from_records(
        records: &[BankRecord],
        lexicon: &ConceptLexicon,
    ) -> Result<Self, LexiconError> {
        let mut per_concept = vec![Vec::new(); lexicon.num_concepts()];
        for record in records {
            let c = lexicon.concept_index(&record.concept)?;
            for e in &record.entries {
                let mut concepts = lexicon.zero_vector();
                for id in &e.concepts {
                    concepts.set(lexicon.concept_index(id)?, true);
                }
                per_concept[c].push(BankEntry {
                    words: e.sentence.split_whitespace().map(str::to_string).collect(),
                    concepts,
                    report_id: e.report_id.clone(),
                    sentence_index: e.sentence_index,
                });
            }
        }
        Ok(Self { per_concept })
    }
}

/// Bank file line: one per concept, empty `entries` marks a gap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankRecord {
    pub concept: String,
    pub entries: Vec<BankEntryRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankEntryRecord {
    pub sentence: String,
    pub concepts: Vec<String>,
    pub report_id: String,
    pub sentence_index: usize,
}

/// Samples up to [`BANK_SIZE`] distinct sentences per concept whose concept
/// set is `{c}` or `{c, d}`.
///
/// Candidates are taken in report order (by report id, then sentence
/// index); duplicates by wording keep the first occurrence.
pub fn build_bank(
    reports: &[CleanedReport],
    matcher: &ConceptMatcher,
    rng: &mut impl Rng,
) -> SentenceBank {
    let n = matcher.num_concepts();
    let mut ordered: Vec<&CleanedReport> = reports.iter().collect();
    ordered.sort_by(|a, b| a.report_id.cmp(&b.report_id));

    let mut candidates: Vec<Vec<BankEntry>> = vec![Vec::new(); n];
    for report in ordered {
        for (i, sentence) in report.sentences.iter().enumerate() {
            let concepts = matcher.sentence_concepts(&sentence.words);
            if !(1..=2).contains(&concepts.count_ones()) {
                continue;
            }
            for c in concepts.ones() {
                if candidates[c].iter().any(|e| e.words == sentence.words) {
                    continue;
                }
                candidates[c].push(BankEntry {
                    words: sentence.words.clone(),
                    concepts,
                    report_id: report.report_id.clone(),
                    sentence_index: i,
                });
            }
        }
    }

    let per_concept = candidates
        .into_iter()
        .map(|pool| {
            if pool.len() <= BANK_SIZE {
                return pool;
            }
            let mut picked = rand::seq::index::sample(rng, pool.len(), BANK_SIZE).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| pool[i].clone()).collect()
        })
        .collect();
    SentenceBank { per_concept }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Edit {
    Removed {
        position: usize,
        words: Vec<String>,
    },
    Inserted {
        position: usize,
        words: Vec<String>,
        source_report_id: String,
        source_sentence_index: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarialReport {
    pub adversarial_id: String,
    pub report_id: String,
    pub kind: PerturbationKind,
    pub original_class: String,
    pub target_class: Option<String>,
    pub target_vector: ConceptVector,
    pub sentences: Vec<Vec<String>>,
    pub prompt_text: String,
    pub edits: Vec<Edit>,
    pub repair_rounds: usize,
}

struct Working<'a> {
    sentences: Vec<(Vec<String>, u64)>,
    edits: Vec<Edit>,
    bank: &'a SentenceBank,
    lexicon: &'a ConceptLexicon,
}

impl Working<'_> {
    fn covered(&self) -> u64 {
        self.sentences.iter().fold(0, |acc, (_, c)| acc | c)
    }

    fn remove_where(&mut self, hit: u64) {
        let mut i = 0;
        while i < self.sentences.len() {
            if self.sentences[i].1 & hit != 0 {
                let (words, _) = self.sentences.remove(i);
                self.edits.push(Edit::Removed { position: i, words });
            } else {
                i += 1;
            }
        }
    }

    /// Inserts one bank sentence per uncovered concept of `wanted`, in
    /// ascending concept order, each at the current second-to-last slot.
    fn insert_missing(
        &mut self,
        wanted: u64,
        allowed: u64,
        rng: &mut impl Rng,
    ) -> Result<(), SynthesisError> {
        for c in mask_indices(wanted) {
            let covered = self.covered();
            if covered & (1 << c) != 0 {
                continue;
            }
            let concept_id = || self.lexicon.concepts()[c].id.clone();
            let entries = self.bank.entries(c);
            if entries.is_empty() {
                return Err(SynthesisError::BankGap(concept_id()));
            }
            let eligible: Vec<&BankEntry> = entries
                .iter()
                .filter(|e| e.concepts.mask() & !allowed == 0)
                .collect();
            if eligible.is_empty() {
                return Err(SynthesisError::NoEligibleSentence(concept_id()));
            }
            let others = wanted & !covered & !(1 << c);
            let covering: Vec<&BankEntry> = eligible
                .iter()
                .copied()
                .filter(|e| e.concepts.mask() & others != 0)
                .collect();
            let pool = if covering.is_empty() {
                &eligible
            } else {
                &covering
            };
            let pick = *pool.choose(rng).expect("non-empty pool");
            let position = if self.sentences.len() >= 2 {
                self.sentences.len() - 1
            } else {
                self.sentences.len()
            };
            self.sentences
                .insert(position, (pick.words.clone(), pick.concepts.mask()));
            self.edits.push(Edit::Inserted {
                position,
                words: pick.words.clone(),
                source_report_id: pick.report_id.clone(),
                source_sentence_index: pick.sentence_index,
            });
        }
        Ok(())
    }

    fn text(&self) -> String {
        join_sentences(self.sentences.iter().map(|(w, _)| w.as_slice()))
    }
}

/// Rewrites `original` so that it extracts to the record's perturbed vector.
pub fn synthesize(
    record: &PerturbationRecord,
    original: &CleanedReport,
    bank: &SentenceBank,
    matcher: &ConceptMatcher,
    lexicon: &ConceptLexicon,
    rng: &mut impl Rng,
) -> Result<AdversarialReport, SynthesisError> {
    let v = record.original_vector;
    let p = record.perturbed_vector;
    let mut work = Working {
        sentences: original
            .sentences
            .iter()
            .map(|s| (s.words.clone(), matcher.sentence_concepts(&s.words).mask()))
            .collect(),
        edits: Vec::new(),
        bank,
        lexicon,
    };

    if record.kind == PerturbationKind::Inter {
        let class = lexicon.class_index(&record.original_class)?;
        let dropped = v.mask() & !p.mask() & lexicon.class_mask(class);
        if dropped != 0 {
            work.remove_where(dropped);
        }
    }
    work.insert_missing(p.mask() & !v.mask(), p.mask(), rng)?;

    let target = canonicalize(&p, lexicon);
    let mut rounds = 0;
    loop {
        let cleaned = clean_text(&record.adversarial_id, &work.text(), lexicon);
        let got = canonicalize(&extract_concept_vector(&cleaned, matcher), lexicon);
        if got == target {
            break;
        }
        if rounds == MAX_REPAIR_ROUNDS {
            return Err(SynthesisError::NonConvergence {
                got: got.to_bit_string(),
                want: target.to_bit_string(),
            });
        }
        rounds += 1;
        let stray = got.mask() & !target.mask();
        if stray != 0 {
            work.remove_where(stray);
        }
        let missing = target.mask() & !work.covered();
        work.insert_missing(missing, p.mask(), rng)?;
    }

    let prompt_text = work.text();
    Ok(AdversarialReport {
        adversarial_id: record.adversarial_id.clone(),
        report_id: record.report_id.clone(),
        kind: record.kind,
        original_class: record.original_class.clone(),
        target_class: record.target_class.clone(),
        target_vector: p,
        sentences: work.sentences.into_iter().map(|(w, _)| w).collect(),
        prompt_text,
        edits: work.edits,
        repair_rounds: rounds,
    })
}

/// Replays `edits` backwards over the final sentences, recovering the
/// sentence list the synthesis started from.
pub fn undo_edits(sentences: &[Vec<String>], edits: &[Edit]) -> Vec<Vec<String>> {
    let mut out = sentences.to_vec();
    for edit in edits.iter().rev() {
        match edit {
            Edit::Removed { position, words } => out.insert(*position, words.clone()),
            Edit::Inserted { position, .. } => {
                out.remove(*position);
            }
        }
    }
    out
}

/// Prompt manifest line: the boundary to image generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub adversarial_id: String,
    pub report_id: String,
    pub kind: PerturbationKind,
    pub original_class: String,
    pub target_class: Option<String>,
    pub prompt: String,
    pub target_vector: ConceptVector,
}

pub fn emit_prompts(reports: &[AdversarialReport]) -> Vec<PromptRecord> {
    let mut prompts: Vec<PromptRecord> = reports
        .iter()
        .map(|r| PromptRecord {
            adversarial_id: r.adversarial_id.clone(),
            report_id: r.report_id.clone(),
            kind: r.kind,
            original_class: r.original_class.clone(),
            target_class: r.target_class.clone(),
            prompt: r.prompt_text.clone(),
            target_vector: r.target_vector,
        })
        .collect();
    prompts.sort_by(|a, b| a.adversarial_id.cmp(&b.adversarial_id));
    prompts
}
