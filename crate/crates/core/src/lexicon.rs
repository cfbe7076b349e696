//! The clinical concept lexicon: concepts, their phrase clusters, synonym
//! groups, class membership and the negation / false-positive word lists.
//!
//! A lexicon is loaded from a TOML file (or the builtin default), validated,
//! and is immutable afterwards. Concept order defines the index semantics of
//! every [`ConceptVector`](crate::ConceptVector) produced under it.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::textproc::normalize;
use crate::vector::{ConceptVector, MAX_CONCEPTS};

const BUILTIN: &str = include_str!("builtin_lexicon.toml");

/// Token accepted by [`load_lexicon`] for the embedded default lexicon.
pub const BUILTIN_TOKEN: &str = "builtin";

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("cannot read lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse lexicon: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("duplicate concept id {0:?}")]
    DuplicateConcept(String),
    #[error("duplicate class id {0:?}")]
    DuplicateClass(String),
    #[error("concept {0:?} has an empty name")]
    EmptyName(String),
    #[error("concept {0:?} has no phrases")]
    EmptyPhraseList(String),
    #[error("concept {concept:?} has a phrase {text:?} with no words")]
    EmptyPhrase { concept: String, text: String },
    #[error("malformed variant syntax in {0:?}")]
    BadVariant(String),
    #[error("concept {concept:?} refers to unknown class {class:?}")]
    UnknownClass { concept: String, class: String },
    #[error("concept {0:?} belongs to no class")]
    NoClass(String),
    #[error("class {0:?} has no concepts")]
    EmptyClass(String),
    #[error("summary class {0:?} must have exactly one concept")]
    SummaryClass(String),
    #[error("synonym group {0:?} needs at least two members")]
    SmallSynonymGroup(Vec<String>),
    #[error("synonym {0:?} appears in more than one group")]
    OverlappingSynonyms(String),
    #[error("word list entry {0:?} is empty after normalization")]
    EmptyWordList(String),
    #[error("disambiguation rule refers to unknown concept or class {0:?}")]
    BadDisambiguation(String),
    #[error("lexicon has {0} concepts, at most {MAX_CONCEPTS} are supported")]
    TooManyConcepts(usize),
    #[error("unknown concept id {0:?}")]
    UnknownConcept(String),
    #[error("unknown class id {0:?}")]
    UnknownClassId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhraseKind {
    /// Exact contiguous word sequence.
    #[serde(rename = "A")]
    TypeA,
    /// Order-free word set, matched with synonyms.
    #[serde(rename = "B")]
    TypeB,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Phrase {
    pub words: Vec<String>,
    pub kind: PhraseKind,
}

impl Phrase {
    pub fn new(text: &str, kind: PhraseKind) -> Self {
        Self {
            words: normalize(text),
            kind,
        }
    }
}

/// One phrase cluster as written in a lexicon file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseEntry {
    pub text: String,
    pub kind: PhraseKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub id: String,
    pub display_name: String,
    /// Indices into [`ConceptLexicon::classes`].
    pub class_ids: Vec<usize>,
    pub entries: Vec<PhraseEntry>,
    /// Variant-expanded phrases.
    pub phrases: Vec<Phrase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathologyClass {
    pub id: String,
    pub name: String,
}

/// Word sequences that are interchangeable during Type B matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynonymGroup {
    pub members: Vec<Vec<String>>,
    pub enabled: bool,
}

/// A concept shared by two classes: it counts for `default_class` unless
/// another concept of `override_class` is present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Disambiguation {
    pub concept: usize,
    pub default_class: usize,
    pub override_class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptLexicon {
    concepts: Vec<Concept>,
    classes: Vec<PathologyClass>,
    synonym_groups: Vec<SynonymGroup>,
    negation_prefixes: Vec<Vec<String>>,
    negation_triggers: Vec<Vec<String>>,
    trigger_kept_words: Vec<String>,
    false_positive_terms: Vec<Vec<String>>,
    summary_class: usize,
    disambiguation: Vec<Disambiguation>,
    class_masks: Vec<u64>,
    file: LexiconFile,
}

// ---- file schema ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconFile {
    pub summary_class: String,
    pub negation_prefixes: Vec<String>,
    pub negation_triggers: Vec<String>,
    /// Leading trigger words that describe the finding rather than negate
    /// it; truncation keeps them ("clear of" keeps "clear").
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trigger_kept_words: Vec<String>,
    pub false_positive_terms: Vec<String>,
    pub classes: Vec<PathologyClass>,
    #[serde(default)]
    pub synonyms: Vec<SynonymEntry>,
    #[serde(default)]
    pub disambiguation: Vec<DisambiguationEntry>,
    pub concepts: Vec<ConceptEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynonymEntry {
    pub members: Vec<String>,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisambiguationEntry {
    pub concept: String,
    pub default_class: String,
    pub override_class: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptEntry {
    pub id: String,
    pub name: String,
    pub classes: Vec<String>,
    pub phrases: Vec<PhraseEntry>,
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

/// Loads a lexicon from a TOML file, or the embedded default for `"builtin"`.
pub fn load_lexicon(path: &str) -> Result<ConceptLexicon, LexiconError> {
    if path == BUILTIN_TOKEN {
        return ConceptLexicon::builtin();
    }
    ConceptLexicon::from_path(Path::new(path))
}

impl ConceptLexicon {
    pub fn builtin() -> Result<Self, LexiconError> {
        Self::from_toml(BUILTIN)
    }

    pub fn from_path(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, LexiconError> {
        let file: LexiconFile = toml::from_str(text)?;
        Self::from_file(file)
    }

    pub fn from_file(file: LexiconFile) -> Result<Self, LexiconError> {
        let mut class_index = HashMap::new();
        for (i, class) in file.classes.iter().enumerate() {
            if class_index.insert(class.id.clone(), i).is_some() {
                return Err(LexiconError::DuplicateClass(class.id.clone()));
            }
        }
        if file.concepts.len() > MAX_CONCEPTS {
            return Err(LexiconError::TooManyConcepts(file.concepts.len()));
        }

        let mut seen = HashSet::new();
        let mut concepts = Vec::with_capacity(file.concepts.len());
        for entry in &file.concepts {
            if !seen.insert(entry.id.as_str()) {
                return Err(LexiconError::DuplicateConcept(entry.id.clone()));
            }
            if entry.name.trim().is_empty() {
                return Err(LexiconError::EmptyName(entry.id.clone()));
            }
            if entry.phrases.is_empty() {
                return Err(LexiconError::EmptyPhraseList(entry.id.clone()));
            }
            if entry.classes.is_empty() {
                return Err(LexiconError::NoClass(entry.id.clone()));
            }
            let mut class_ids = Vec::new();
            for class in &entry.classes {
                let idx = *class_index
                    .get(class)
                    .ok_or_else(|| LexiconError::UnknownClass {
                        concept: entry.id.clone(),
                        class: class.clone(),
                    })?;
                if !class_ids.contains(&idx) {
                    class_ids.push(idx);
                }
            }
            let mut phrases = Vec::new();
            for phrase in &entry.phrases {
                for variant in expand_variants(&phrase.text)? {
                    let p = Phrase::new(&variant, phrase.kind);
                    if p.words.is_empty() {
                        return Err(LexiconError::EmptyPhrase {
                            concept: entry.id.clone(),
                            text: phrase.text.clone(),
                        });
                    }
                    phrases.push(p);
                }
            }
            concepts.push(Concept {
                id: entry.id.clone(),
                display_name: entry.name.clone(),
                class_ids,
                entries: entry.phrases.clone(),
                phrases,
            });
        }

        let mut class_masks = vec![0u64; file.classes.len()];
        for (i, concept) in concepts.iter().enumerate() {
            for &c in &concept.class_ids {
                class_masks[c] |= 1 << i;
            }
        }
        if let Some(empty) = class_masks.iter().position(|&m| m == 0) {
            return Err(LexiconError::EmptyClass(file.classes[empty].id.clone()));
        }

        let summary_class = *class_index
            .get(&file.summary_class)
            .ok_or_else(|| LexiconError::UnknownClassId(file.summary_class.clone()))?;
        if class_masks[summary_class].count_ones() != 1 {
            return Err(LexiconError::SummaryClass(file.summary_class.clone()));
        }

        let mut synonym_groups = Vec::new();
        let mut all_members = HashSet::new();
        for entry in &file.synonyms {
            let members: Vec<Vec<String>> = entry.members.iter().map(|m| normalize(m)).collect();
            let distinct: BTreeSet<_> = members.iter().collect();
            if distinct.len() < 2 || members.iter().any(Vec::is_empty) {
                return Err(LexiconError::SmallSynonymGroup(entry.members.clone()));
            }
            for m in &members {
                if !all_members.insert(m.clone()) {
                    return Err(LexiconError::OverlappingSynonyms(m.join(" ")));
                }
            }
            synonym_groups.push(SynonymGroup {
                members,
                enabled: entry.enabled,
            });
        }

        let concept_index: HashMap<&str, usize> = concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.as_str(), i))
            .collect();
        let mut disambiguation = Vec::new();
        for rule in &file.disambiguation {
            let concept = *concept_index
                .get(rule.concept.as_str())
                .ok_or_else(|| LexiconError::BadDisambiguation(rule.concept.clone()))?;
            let lookup = |id: &String| {
                class_index
                    .get(id)
                    .copied()
                    .filter(|c| concepts[concept].class_ids.contains(c))
                    .ok_or_else(|| LexiconError::BadDisambiguation(id.clone()))
            };
            disambiguation.push(Disambiguation {
                concept,
                default_class: lookup(&rule.default_class)?,
                override_class: lookup(&rule.override_class)?,
            });
        }

        Ok(Self {
            negation_prefixes: word_lists(&file.negation_prefixes)?,
            negation_triggers: word_lists(&file.negation_triggers)?,
            trigger_kept_words: word_lists(&file.trigger_kept_words)?
                .into_iter()
                .flatten()
                .collect(),
            false_positive_terms: word_lists(&file.false_positive_terms)?,
            concepts,
            classes: file.classes.clone(),
            synonym_groups,
            summary_class,
            disambiguation,
            class_masks,
            file,
        })
    }

    /// The lexicon in its file form; `from_file(self.to_file())` is identical.
    pub fn to_file(&self) -> &LexiconFile {
        &self.file
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.file).expect("lexicon file schema always serializes")
    }

    /// Short content hash used to tie pipeline outputs to the lexicon that
    /// produced them.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn classes(&self) -> &[PathologyClass] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn synonym_groups(&self) -> &[SynonymGroup] {
        &self.synonym_groups
    }

    pub fn negation_prefixes(&self) -> &[Vec<String>] {
        &self.negation_prefixes
    }

    pub fn negation_triggers(&self) -> &[Vec<String>] {
        &self.negation_triggers
    }

    pub fn trigger_kept_words(&self) -> &[String] {
        &self.trigger_kept_words
    }

    pub fn false_positive_terms(&self) -> &[Vec<String>] {
        &self.false_positive_terms
    }

    pub fn disambiguation(&self) -> &[Disambiguation] {
        &self.disambiguation
    }

    pub fn summary_class(&self) -> usize {
        self.summary_class
    }

    /// Index of the single concept of the summary ("no finding") class.
    pub fn summary_concept(&self) -> usize {
        self.class_masks[self.summary_class].trailing_zeros() as usize
    }

    pub fn concept_index(&self, concept_id: &str) -> Result<usize, LexiconError> {
        self.concepts
            .iter()
            .position(|c| c.id == concept_id)
            .ok_or_else(|| LexiconError::UnknownConcept(concept_id.to_string()))
    }

    pub fn class_index(&self, class_id: &str) -> Result<usize, LexiconError> {
        self.classes
            .iter()
            .position(|c| c.id == class_id)
            .ok_or_else(|| LexiconError::UnknownClassId(class_id.to_string()))
    }

    pub fn class_id(&self, class: usize) -> &str {
        &self.classes[class].id
    }

    /// Concepts belonging to `class`, as a bit mask over concept indices.
    pub fn class_mask(&self, class: usize) -> u64 {
        self.class_masks[class]
    }

    pub fn zero_vector(&self) -> ConceptVector {
        ConceptVector::zeros(self.concepts.len())
    }

    /// Builds a vector from concept ids; panics on unknown ids.
    pub fn vector_of(&self, concept_ids: &[&str]) -> ConceptVector {
        ConceptVector::from_indices(
            self.concepts.len(),
            concept_ids
                .iter()
                .map(|id| self.concept_index(id).unwrap_or_else(|e| panic!("{e}"))),
        )
    }

    pub fn concept_ids_of(&self, v: &ConceptVector) -> Vec<&str> {
        v.ones().map(|i| self.concepts[i].id.as_str()).collect()
    }
}

fn word_lists(items: &[String]) -> Result<Vec<Vec<String>>, LexiconError> {
    items
        .iter()
        .map(|item| {
            let words = normalize(item);
            if words.is_empty() {
                Err(LexiconError::EmptyWordList(item.clone()))
            } else {
                Ok(words)
            }
        })
        .collect()
}

/// Expands `{a|b}` alternation groups into one string per combination.
fn expand_variants(text: &str) -> Result<Vec<String>, LexiconError> {
    let bad = || LexiconError::BadVariant(text.to_string());
    let Some(open) = text.find('{') else {
        if text.contains('}') || text.contains('|') {
            return Err(bad());
        }
        return Ok(vec![text.to_string()]);
    };
    let close = text[open..].find('}').map(|c| open + c).ok_or_else(bad)?;
    let (head, body, tail) = (&text[..open], &text[open + 1..close], &text[close + 1..]);
    if head.contains('}') || head.contains('|') || body.contains('{') {
        return Err(bad());
    }
    let tails = expand_variants(tail)?;
    let mut out = Vec::new();
    for alt in body.split('|') {
        if alt.trim().is_empty() {
            return Err(bad());
        }
        for rest in &tails {
            out.push(format!("{head}{alt}{rest}"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn builtin() -> ConceptLexicon {
        ConceptLexicon::builtin().unwrap()
    }

    #[test]
    fn builtin_shape() {
        let lex = builtin();
        assert_eq!(lex.num_concepts(), 17);
        assert_eq!(lex.num_classes(), 6);
        let class_ids: Vec<_> = lex.classes().iter().map(|c| c.id.as_str()).collect();
        assert_eq!(
            class_ids,
            [
                "healthy",
                "cancer",
                "cardiomegaly",
                "pleural_effusion",
                "pneumonia",
                "pneumothorax"
            ]
        );
        assert_eq!(lex.class_mask(lex.summary_class()).count_ones(), 1);
        assert_eq!(lex.concepts()[lex.summary_concept()].id, "unremarkable");
    }

    #[test]
    fn mass_is_type_a_under_cancer() {
        let lex = builtin();
        let mass = &lex.concepts()[lex.concept_index("mass").unwrap()];
        assert!(mass
            .phrases
            .contains(&Phrase::new("mass", PhraseKind::TypeA)));
        assert_eq!(mass.class_ids, vec![lex.class_index("cancer").unwrap()]);
    }

    #[test]
    fn opacities_belongs_to_both_classes() {
        let lex = builtin();
        let op = lex.concept_index("opacities").unwrap();
        let pe = lex.class_index("pleural_effusion").unwrap();
        let pn = lex.class_index("pneumonia").unwrap();
        assert_ne!(lex.class_mask(pe) & (1 << op), 0);
        assert_ne!(lex.class_mask(pn) & (1 << op), 0);
    }

    #[test]
    fn phrase_cluster_counts() {
        let lex = builtin();
        let counts: Vec<(&str, usize, usize)> = lex
            .concepts()
            .iter()
            .map(|c| (c.id.as_str(), c.entries.len(), c.phrases.len()))
            .collect();
        assert_eq!(
            counts,
            vec![
                ("unremarkable", 8, 8),
                ("mass", 12, 13),
                ("nodule", 4, 6),
                ("irregular_hilum", 5, 5),
                ("adenopathy", 4, 4),
                ("irregular_parenchyma", 3, 3),
                ("pneumonitis", 6, 6),
                ("consolidation", 1, 1),
                ("infection", 3, 3),
                ("opacities", 7, 13),
                ("effusion", 3, 3),
                ("fluid", 3, 3),
                ("meniscus_sign", 2, 2),
                ("costophrenic_angle", 1, 1),
                ("enlarged_heart", 5, 6),
                ("absent_lung_markings", 7, 8),
                ("irregular_diaphragm", 2, 2),
            ]
        );
    }

    #[test]
    fn variants_expand_per_alternative() {
        assert_eq!(
            expand_variants("nodular {opacities|opacity}").unwrap(),
            vec!["nodular opacities", "nodular opacity"]
        );
        assert_eq!(
            expand_variants("borderline {cardiac silhouette|heart}").unwrap(),
            vec!["borderline cardiac silhouette", "borderline heart"]
        );
        assert!(expand_variants("bad {a|b").is_err());
        assert!(expand_variants("bad a|b").is_err());
        assert!(expand_variants("bad {a||b}").is_err());
    }

    #[test]
    fn concept_index_is_a_bijection() {
        let lex = builtin();
        let indices: BTreeSet<usize> = lex
            .concepts()
            .iter()
            .map(|c| lex.concept_index(&c.id).unwrap())
            .collect();
        assert_eq!(indices, (0..17).collect());
        assert_eq!(lex.concept_index("unremarkable").unwrap(), 0);
        assert!(matches!(
            lex.concept_index("no_such_concept"),
            Err(LexiconError::UnknownConcept(_))
        ));
    }

    #[test]
    fn builtin_word_lists() {
        let lex = builtin();
        let joined =
            |lists: &[Vec<String>]| -> Vec<String> { lists.iter().map(|w| w.join(" ")).collect() };
        assert_eq!(
            joined(lex.negation_prefixes()),
            ["no", "there is no", "no evidence of"]
        );
        assert_eq!(
            joined(lex.negation_triggers()),
            ["clear of", "without", "should not be mistaken for"]
        );
        assert_eq!(
            joined(lex.false_positive_terms()),
            ["nipple shadow", "evaluate"]
        );
        let enabled: Vec<usize> = lex
            .synonym_groups()
            .iter()
            .filter(|g| g.enabled)
            .map(|g| g.members.len())
            .collect();
        assert_eq!(enabled, [3, 3]);
    }

    fn mutate(f: impl FnOnce(&mut LexiconFile)) -> Result<ConceptLexicon, LexiconError> {
        let mut file = builtin().to_file().clone();
        f(&mut file);
        ConceptLexicon::from_file(file)
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            mutate(|f| {
                let dup = f.concepts[1].clone();
                f.concepts.push(dup);
            }),
            Err(LexiconError::DuplicateConcept(id)) if id == "mass"
        ));
        assert!(matches!(
            mutate(|f| f.concepts[2].phrases.clear()),
            Err(LexiconError::EmptyPhraseList(_))
        ));
        assert!(matches!(
            mutate(|f| f.synonyms[1].members.push("hilar".into())),
            Err(LexiconError::OverlappingSynonyms(_))
        ));
        assert!(matches!(
            mutate(|f| f.synonyms[0].members.truncate(1)),
            Err(LexiconError::SmallSynonymGroup(_))
        ));
        assert!(matches!(
            mutate(|f| f.concepts[3].classes = vec!["nope".into()]),
            Err(LexiconError::UnknownClass { .. })
        ));
        assert!(matches!(
            mutate(|f| f.concepts.retain(|c| c.id != "enlarged_heart")),
            Err(LexiconError::EmptyClass(c)) if c == "cardiomegaly"
        ));
        assert!(matches!(
            mutate(|f| f.concepts[0].phrases[0].text = "!!".into()),
            Err(LexiconError::EmptyPhrase { .. })
        ));
    }

    #[test]
    fn duplicate_concept_in_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lex.toml");
        let mut text = builtin().to_toml();
        text.push_str("\n[[concepts]]\nid = \"mass\"\nname = \"Mass again\"\nclasses = [\"cancer\"]\nphrases = [{ text = \"lump\", kind = \"A\" }]\n");
        std::fs::write(&path, text).unwrap();
        let err = load_lexicon(path.to_str().unwrap()).unwrap_err();
        assert!(matches!(err, LexiconError::DuplicateConcept(_)), "{err}");
    }

    #[test]
    fn unparseable_file_is_rejected() {
        assert!(matches!(
            ConceptLexicon::from_toml("classes = 3"),
            Err(LexiconError::Parse(_))
        ));
    }

    #[test]
    fn round_trip_through_toml() {
        let lex = builtin();
        let again = ConceptLexicon::from_toml(&lex.to_toml()).unwrap();
        assert_eq!(again, lex);
        assert_eq!(again.hash(), lex.hash());
    }
}
