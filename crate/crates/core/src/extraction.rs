//! Concept detection over formatted sentences.
//!
//! [`match_type_a`] and [`match_type_b`] are the per-phrase reference
//! matchers. [`ConceptMatcher`] compiles a lexicon into word-keyed indexes so
//! a sentence only checks phrases whose anchor words it actually contains;
//! it must agree with the per-phrase scan on every input.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::lexicon::{ConceptLexicon, Phrase, PhraseKind, SynonymGroup};
use crate::textproc::{find_sequence, CleanedReport, CleanedSentence};
use crate::vector::ConceptVector;

/// True iff the phrase occurs as a contiguous word sequence.
pub fn match_type_a(sentence: &[String], phrase: &Phrase) -> bool {
    find_sequence(sentence, &phrase.words).is_some()
}

/// True iff every phrase word, or one of its synonyms, occurs in the
/// sentence in any order. Multi-word synonym members match contiguously.
pub fn match_type_b(sentence: &[String], phrase: &Phrase, synonyms: &[SynonymGroup]) -> bool {
    segment_units(&phrase.words, synonyms)
        .iter()
        .all(|unit| unit_present(sentence, unit))
}

/// A unit is satisfied by any one of its alternative word sequences.
type Unit = Vec<Vec<String>>;

/// Greedily segments phrase words into synonym units, preferring the
/// longest group member starting at each position.
fn segment_units(words: &[String], synonyms: &[SynonymGroup]) -> Vec<Unit> {
    let mut units = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let best = synonyms
            .iter()
            .filter(|g| g.enabled)
            .flat_map(|g| g.members.iter().map(move |m| (g, m)))
            .filter(|(_, m)| words[i..].starts_with(m))
            .max_by_key(|(_, m)| m.len());
        match best {
            Some((group, member)) => {
                units.push(group.members.clone());
                i += member.len();
            }
            None => {
                units.push(vec![vec![words[i].clone()]]);
                i += 1;
            }
        }
    }
    units
}

fn unit_present(sentence: &[String], unit: &Unit) -> bool {
    unit.iter()
        .any(|alt| find_sequence(sentence, alt).is_some())
}

/// Concepts detected in one formatted sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceConcepts {
    pub sentence_index: usize,
    pub concepts: ConceptVector,
}

struct CompiledTypeB {
    concept: usize,
    units: Vec<Unit>,
}

/// Indexed matcher compiled from a lexicon.
pub struct ConceptMatcher {
    num_concepts: usize,
    /// Type A phrases keyed by first word: (concept, remaining words).
    type_a: HashMap<String, Vec<(usize, Vec<String>)>>,
    /// Type B phrase ids keyed by the first words of their anchor unit.
    type_b_anchor: HashMap<String, Vec<usize>>,
    type_b: Vec<CompiledTypeB>,
}

impl ConceptMatcher {
    pub fn new(lexicon: &ConceptLexicon) -> Self {
        let mut type_a: HashMap<String, Vec<(usize, Vec<String>)>> = HashMap::new();
        let mut type_b_anchor: HashMap<String, Vec<usize>> = HashMap::new();
        let mut type_b = Vec::new();
        for (ci, concept) in lexicon.concepts().iter().enumerate() {
            for phrase in &concept.phrases {
                match phrase.kind {
                    PhraseKind::TypeA => {
                        let (first, rest) =
                            phrase.words.split_first().expect("validated non-empty");
                        type_a
                            .entry(first.clone())
                            .or_default()
                            .push((ci, rest.to_vec()));
                    }
                    PhraseKind::TypeB => {
                        let units = segment_units(&phrase.words, lexicon.synonym_groups());
                        // Anchor on the unit with the fewest alternatives.
                        let anchor = units
                            .iter()
                            .min_by_key(|u| u.len())
                            .expect("validated non-empty");
                        let id = type_b.len();
                        let firsts: HashSet<&String> = anchor.iter().map(|alt| &alt[0]).collect();
                        for first in firsts {
                            type_b_anchor.entry(first.clone()).or_default().push(id);
                        }
                        type_b.push(CompiledTypeB { concept: ci, units });
                    }
                }
            }
        }
        Self {
            num_concepts: lexicon.num_concepts(),
            type_a,
            type_b_anchor,
            type_b,
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    /// Concepts whose phrases match anywhere in `words`.
    pub fn sentence_concepts(&self, words: &[String]) -> ConceptVector {
        let mut found = ConceptVector::zeros(self.num_concepts);
        for (i, word) in words.iter().enumerate() {
            if let Some(candidates) = self.type_a.get(word) {
                for (concept, rest) in candidates {
                    if !found.get(*concept) && words[i + 1..].starts_with(rest) {
                        found.set(*concept, true);
                    }
                }
            }
        }
        let mut checked = HashSet::new();
        for word in words {
            let Some(ids) = self.type_b_anchor.get(word) else {
                continue;
            };
            for &id in ids {
                let phrase = &self.type_b[id];
                if found.get(phrase.concept) || !checked.insert(id) {
                    continue;
                }
                if phrase.units.iter().all(|u| unit_present(words, u)) {
                    found.set(phrase.concept, true);
                }
            }
        }
        found
    }
}

pub fn extract_sentence_concepts(
    index: usize,
    sentence: &CleanedSentence,
    matcher: &ConceptMatcher,
) -> SentenceConcepts {
    SentenceConcepts {
        sentence_index: index,
        concepts: matcher.sentence_concepts(&sentence.words),
    }
}

/// Per-sentence concept sets for a cleaned report, in sentence order.
pub fn report_sentence_concepts(
    cleaned: &CleanedReport,
    matcher: &ConceptMatcher,
) -> Vec<SentenceConcepts> {
    cleaned
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| extract_sentence_concepts(i, s, matcher))
        .collect()
}

/// Union of sentence-level concepts. Not canonicalized.
pub fn extract_concept_vector(cleaned: &CleanedReport, matcher: &ConceptMatcher) -> ConceptVector {
    extract_from_sentences(cleaned.word_lists(), matcher)
}

pub fn extract_from_sentences<'a>(
    sentences: impl IntoIterator<Item = &'a [String]>,
    matcher: &ConceptMatcher,
) -> ConceptVector {
    sentences
        .into_iter()
        .fold(ConceptVector::zeros(matcher.num_concepts), |acc, words| {
            acc.union(&matcher.sentence_concepts(words))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::clean_text;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn lex() -> ConceptLexicon {
        ConceptLexicon::builtin().unwrap()
    }

    #[test]
    fn type_a_examples() {
        let mass = Phrase::new("mass", PhraseKind::TypeA);
        assert!(match_type_a(&words("large mass right lobe"), &mass));
        assert!(!match_type_a(&words("massive effusion"), &mass));
        let fluid = Phrase::new("pleural fluid", PhraseKind::TypeA);
        assert!(match_type_a(&words("pleural fluid noted"), &fluid));
        assert!(!match_type_a(&words("fluid pleural noted"), &fluid));
    }

    #[test]
    fn type_b_examples() {
        let lex = lex();
        let syn = lex.synonym_groups();
        let hilus = Phrase::new("hilus enlarged", PhraseKind::TypeB);
        assert!(match_type_b(
            &words("the hilus appears enlarged"),
            &hilus,
            syn
        ));
        assert!(match_type_b(&words("enlarged hilar shadow"), &hilus, syn));
        assert!(!match_type_b(&words("enlarged spleen"), &hilus, syn));
    }

    #[test]
    fn multi_word_synonyms_match_as_sequences() {
        let lex = lex();
        let syn = lex.synonym_groups();
        let p = Phrase::new("prominent cardiac silhouette", PhraseKind::TypeB);
        assert!(match_type_b(&words("heart size is prominent"), &p, syn));
        assert!(match_type_b(&words("prominent cardiac contour"), &p, syn));
        assert!(!match_type_b(&words("prominent size of heart"), &p, syn));
        assert!(!match_type_b(&words("cardiac prominent"), &p, syn));
    }

    #[test]
    fn disabled_synonym_groups_are_ignored() {
        let lex = lex();
        let p = Phrase::new("costophrenic angle blunting", PhraseKind::TypeB);
        assert!(!match_type_b(
            &words("blunted costophrenic angle"),
            &p,
            lex.synonym_groups()
        ));
    }

    #[test]
    fn sentence_concept_examples() {
        let lex = lex();
        let m = ConceptMatcher::new(&lex);
        let ids = |s: &str| -> Vec<String> {
            lex.concept_ids_of(&m.sentence_concepts(&words(s)))
                .into_iter()
                .map(String::from)
                .collect()
        };
        assert_eq!(ids("hilar adenopathy is present"), ["adenopathy"]);
        assert_eq!(ids("lungs clear"), ["unremarkable"]);
        assert!(ids("patient is comfortable").is_empty());
        assert_eq!(
            ids("top normal heart size"),
            ["unremarkable", "enlarged_heart"]
        );
    }

    #[test]
    fn negated_pneumonia_report_extracts_adenopathy_only() {
        let lex = lex();
        let m = ConceptMatcher::new(&lex);
        let cleaned = clean_text(
            "r1",
            "There is no consolidation concerning for pneumonia. Hilar adenopathy is present.",
            &lex,
        );
        let v = extract_concept_vector(&cleaned, &m);
        assert_eq!(lex.concept_ids_of(&v), ["adenopathy"]);
    }

    #[test]
    fn empty_report_gives_zero_vector() {
        let lex = lex();
        let m = ConceptMatcher::new(&lex);
        let cleaned = clean_text("empty", "", &lex);
        assert!(extract_concept_vector(&cleaned, &m).is_zero());
    }
}
