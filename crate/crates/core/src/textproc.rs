//! Report cleaning: sentence splitting, normalization and the sentence
//! removal/truncation rules that produce the formatted sentences seen by
//! concept extraction.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Report;
use crate::lexicon::ConceptLexicon;

/// Tokens that end in a period without ending a sentence.
const ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "prof", "vs", "e.g", "i.e", "a.m", "p.m", "approx", "fig", "cf", "st",
];

/// Splits analysis text into raw sentences.
///
/// A sentence ends at `.`, `?` or `!` followed by whitespace or end of text,
/// unless the period closes a guarded abbreviation. Runs of terminal
/// punctuation stay with their sentence. Whitespace between sentences is the
/// only discarded text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut start: Option<usize> = None;
    let mut chars = text.char_indices().peekable();

    while let Some((i, c)) = chars.next() {
        if start.is_none() {
            if c.is_whitespace() {
                continue;
            }
            start = Some(i);
        }
        if !matches!(c, '.' | '?' | '!') {
            continue;
        }
        let next = chars.peek().map(|&(_, n)| n);
        let at_boundary = match next {
            None => true,
            Some(n) => n.is_whitespace(),
        };
        if !at_boundary {
            continue;
        }
        let s = start.expect("sentence start set above");
        if c == '.' && is_abbreviation(&text[s..i]) {
            continue;
        }
        let end = i + c.len_utf8();
        sentences.push(text[s..end].to_string());
        start = None;
    }
    if let Some(s) = start {
        let tail = text[s..].trim_end();
        if !tail.is_empty() {
            sentences.push(tail.to_string());
        }
    }
    sentences
}

fn is_abbreviation(before_period: &str) -> bool {
    let token = before_period
        .rsplit(char::is_whitespace)
        .next()
        .unwrap_or("")
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    ABBREVIATIONS.contains(&token.as_str())
}

/// Lowercases a raw sentence and splits it into punctuation-free words.
///
/// Hyphens and slashes separate words; every other non-alphanumeric
/// character is dropped.
pub fn normalize(sentence: &str) -> Vec<String> {
    let mut buf = String::with_capacity(sentence.len());
    for c in sentence.chars() {
        if c == '-' || c == '/' || c.is_whitespace() {
            buf.push(' ');
        } else if c.is_alphanumeric() {
            buf.extend(c.to_lowercase().filter(|lc| lc.is_alphanumeric()));
        }
    }
    buf.split_whitespace().map(str::to_string).collect()
}

/// The rule that removed (or emptied) a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CleaningRule {
    /// Fewer than two words.
    #[serde(rename = "R1")]
    ShortSentence,
    /// Starts with a negation prefix.
    #[serde(rename = "R2")]
    NegationPrefix,
    /// Contains a false-positive term.
    #[serde(rename = "R3")]
    FalsePositive,
    /// Truncated at a negation trigger and left with fewer than two words.
    #[serde(rename = "R4")]
    NegationTrigger,
}

impl CleaningRule {
    pub fn id(self) -> &'static str {
        match self {
            CleaningRule::ShortSentence => "R1",
            CleaningRule::NegationPrefix => "R2",
            CleaningRule::FalsePositive => "R3",
            CleaningRule::NegationTrigger => "R4",
        }
    }
}

impl fmt::Display for CleaningRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanedSentence {
    pub words: Vec<String>,
    /// Position of the source sentence in the split section text.
    pub origin_index: usize,
    /// Set when a negation trigger cut off the tail of the sentence.
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedSentence {
    pub origin_index: usize,
    pub text: String,
    pub rule: CleaningRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanedReport {
    pub report_id: String,
    pub sentences: Vec<CleanedSentence>,
    pub removed: Vec<RemovedSentence>,
}

impl CleanedReport {
    pub fn word_lists(&self) -> impl Iterator<Item = &[String]> {
        self.sentences.iter().map(|s| s.words.as_slice())
    }
}

/// Outcome of the cleaning rules for one raw sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SentenceOutcome {
    Kept { words: Vec<String>, truncated: bool },
    Removed(CleaningRule),
}

/// Applies R1, R2, R3, R4 and then R1 again to a single raw sentence.
pub fn clean_sentence(raw: &str, lexicon: &ConceptLexicon) -> SentenceOutcome {
    let mut words = normalize(raw);
    if words.len() < 2 {
        return SentenceOutcome::Removed(CleaningRule::ShortSentence);
    }
    if lexicon
        .negation_prefixes()
        .iter()
        .any(|prefix| words.starts_with(prefix))
    {
        return SentenceOutcome::Removed(CleaningRule::NegationPrefix);
    }
    if lexicon
        .false_positive_terms()
        .iter()
        .any(|term| find_sequence(&words, term).is_some())
    {
        return SentenceOutcome::Removed(CleaningRule::FalsePositive);
    }
    let cut = lexicon
        .negation_triggers()
        .iter()
        .filter_map(|trigger| {
            let kept = trigger
                .iter()
                .take_while(|w| lexicon.trigger_kept_words().contains(w))
                .count();
            find_sequence(&words, trigger).map(|pos| pos + kept)
        })
        .min();
    let truncated = cut.is_some();
    if let Some(pos) = cut {
        words.truncate(pos);
        if words.len() < 2 {
            return SentenceOutcome::Removed(CleaningRule::NegationTrigger);
        }
    }
    SentenceOutcome::Kept { words, truncated }
}

/// Cleans free analysis text into formatted sentences.
pub fn clean_text(report_id: &str, text: &str, lexicon: &ConceptLexicon) -> CleanedReport {
    let mut sentences = Vec::new();
    let mut removed = Vec::new();
    for (origin_index, raw) in split_sentences(text).into_iter().enumerate() {
        match clean_sentence(&raw, lexicon) {
            SentenceOutcome::Kept { words, truncated } => sentences.push(CleanedSentence {
                words,
                origin_index,
                truncated,
            }),
            SentenceOutcome::Removed(rule) => removed.push(RemovedSentence {
                origin_index,
                text: raw,
                rule,
            }),
        }
    }
    CleanedReport {
        report_id: report_id.to_string(),
        sentences,
        removed,
    }
}

/// Cleans the FINDINGS/IMPRESSION text of an ingested report.
pub fn clean_report(report: &Report, lexicon: &ConceptLexicon) -> CleanedReport {
    clean_text(&report.report_id, &report.section_text(), lexicon)
}

/// Joins formatted sentences back into a single text that cleans to the
/// same sentences.
pub fn join_sentences<'a>(sentences: impl IntoIterator<Item = &'a [String]>) -> String {
    sentences
        .into_iter()
        .map(|words| words.join(" "))
        .collect::<Vec<_>>()
        .join(". ")
}

/// First position at which `needle` occurs contiguously in `haystack`.
pub(crate) fn find_sequence(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn splits_on_periods() {
        assert_eq!(
            split_sentences("Lungs are clear. No effusion."),
            vec!["Lungs are clear.", "No effusion."]
        );
    }

    #[test]
    fn empty_text_has_no_sentences() {
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("  \n\t ").is_empty());
    }

    #[test]
    fn abbreviation_corpus_counts() {
        // Hand-built corpus: (text, expected sentence count).
        let corpus = [
            ("Dr. Smith reviewed.", 1),
            ("Discussed with Dr. Jones at 9 a.m. today.", 1),
            (
                "Mild changes, e.g. atelectasis, are seen. Heart is normal.",
                2,
            ),
            ("Nodule measures 1.5 cm. Stable.", 2),
            ("Findings i.e. effusion persist? Yes!", 2),
            ("Compared to prior study vs. current. Unchanged.", 2),
            ("Tube tip is approx. 3 cm above the carina.", 1),
            ("Effusion is 2.25 cm... Follow up", 2),
            ("No pneumothorax.Lungs clear.", 1),
        ];
        for (text, expected) in corpus {
            assert_eq!(split_sentences(text).len(), expected, "{text:?}");
        }
    }

    #[test]
    fn normalize_strips_punctuation_and_case() {
        assert_eq!(
            normalize("Nodular Opacity,\n right lung."),
            words("nodular opacity right lung")
        );
        assert_eq!(
            normalize("ground-glass opacities"),
            words("ground glass opacities")
        );
        assert_eq!(normalize("tumor/tumour"), words("tumor tumour"));
        assert!(normalize("   ").is_empty());
    }

    #[test]
    fn find_sequence_is_word_anchored() {
        let hay = words("nodular opacity no change");
        assert_eq!(find_sequence(&hay, &words("no")), Some(2));
        assert_eq!(find_sequence(&hay, &words("no change")), Some(2));
        assert_eq!(find_sequence(&hay, &words("opacity change")), None);
    }

    #[test]
    fn trigger_truncation_keeps_finding_words() {
        let lex = ConceptLexicon::builtin().unwrap();
        assert_eq!(
            clean_sentence("Lungs are clear of effusion today", &lex),
            SentenceOutcome::Kept {
                words: words("lungs are clear"),
                truncated: true
            }
        );
        assert_eq!(
            clean_sentence("Heart size is normal without effusion", &lex),
            SentenceOutcome::Kept {
                words: words("heart size is normal"),
                truncated: true
            }
        );
        assert_eq!(
            clean_sentence("Clear of effusion", &lex),
            SentenceOutcome::Removed(CleaningRule::NegationTrigger)
        );
    }

    proptest! {
        #[test]
        fn split_covers_every_non_space_char(text in "[A-Za-z0-9 .?!\n,-]{0,80}") {
            let sentences = split_sentences(&text);
            let joined: String = sentences.concat().chars().filter(|c| !c.is_whitespace()).collect();
            let original: String = text.chars().filter(|c| !c.is_whitespace()).collect();
            prop_assert_eq!(joined, original);
        }

        #[test]
        fn normalized_words_are_clean(text in "\\PC{0,60}") {
            for w in normalize(&text) {
                prop_assert!(!w.is_empty());
                prop_assert!(w.chars().all(char::is_alphanumeric));
                prop_assert_eq!(w.to_lowercase(), w.clone());
            }
        }
    }
}
