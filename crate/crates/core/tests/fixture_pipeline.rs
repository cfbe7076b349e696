//! The synthetic fixture corpus taken through every core stage in-process.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use corpa_core::corpus::{self, ManifestEntry, Split};
use corpa_core::extraction::extract_concept_vector;
use corpa_core::labelling::{
    self, assign_labels, expand_multilabel, one_sided_selection, Distance, SplitSpec,
};
use corpa_core::perturbation::{build_valid_index, perturb_all, PerturbConfig, PerturbationRecord};
use corpa_core::records::{read_stage, write_records, StreamHeader};
use corpa_core::rng::derive_rng;
use corpa_core::synthesis::{
    build_bank, emit_prompts, synthesize, AdversarialReport, PromptRecord, SentenceBank,
};
use corpa_core::textproc::{clean_report, CleanedReport};
use corpa_core::{ConceptLexicon, ConceptMatcher};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic")
}

struct Run {
    lex: ConceptLexicon,
    matcher: ConceptMatcher,
    cleaned: HashMap<String, CleanedReport>,
    split: Vec<ManifestEntry>,
    quarantined: usize,
}

fn run() -> Run {
    let lex = ConceptLexicon::builtin().unwrap();
    let matcher = ConceptMatcher::new(&lex);
    let dir = fixtures();
    let pairing = corpus::read_pairing(&dir.join("pairing.csv")).unwrap();
    let (manifest, reports) = corpus::ingest(&dir.join("reports"), &pairing).unwrap();
    let mut cleaned = HashMap::new();
    let mut labelled = Vec::new();
    for (entry, report) in manifest.entries.iter().zip(&reports) {
        let c = clean_report(report, &lex);
        let a = assign_labels(
            &entry.report_id,
            &extract_concept_vector(&c, &matcher),
            &lex,
        );
        labelled.push(ManifestEntry {
            labels: a
                .labels
                .iter()
                .map(|&l| lex.class_id(l).to_string())
                .collect(),
            vector: Some(a.canonical_vector),
            ..entry.clone()
        });
        cleaned.insert(entry.report_id.clone(), c);
    }
    let rows = expand_multilabel(&labelled);
    let balanced = one_sided_selection(&rows, &lex, "healthy", Distance::Hamming, 2).unwrap();
    let split = labelling::split(&balanced.retained, &SplitSpec::default(), &lex).unwrap();
    Run {
        lex,
        matcher,
        cleaned,
        split: split.rows,
        quarantined: manifest.quarantined.len(),
    }
}

#[test]
fn ingest_quarantines_malformed_reports() {
    let r = run();
    assert_eq!(r.cleaned.len(), 226);
    assert_eq!(r.quarantined, 4);
}

#[test]
fn split_keeps_report_rows_together() {
    let r = run();
    let mut seen: HashMap<&str, Split> = HashMap::new();
    for row in &r.split {
        let prev = seen.insert(&row.report_id, row.split);
        assert!(
            prev.is_none_or(|s| s == row.split),
            "{} split across partitions",
            row.report_id
        );
    }
    assert!(r.split.iter().any(|row| row.split == Split::Test));
}

#[test]
fn adversarial_stages_survive_record_round_trips() {
    let r = run();
    let (test, reference): (Vec<_>, Vec<_>) = r
        .split
        .iter()
        .cloned()
        .partition(|x| x.split == Split::Test);
    let index = build_valid_index(&reference, &r.lex).unwrap();
    let config = PerturbConfig::default();
    let perturbations: Vec<PerturbationRecord> = test
        .iter()
        .flat_map(|row| perturb_all(row, &r.lex, &index, &config).unwrap().records)
        .collect();
    assert_eq!(perturbations.len(), 4 * test.len());

    let ids: BTreeSet<&str> = test.iter().map(|x| x.report_id.as_str()).collect();
    let test_reports: Vec<CleanedReport> = ids.iter().map(|id| r.cleaned[*id].clone()).collect();
    let bank = build_bank(&test_reports, &r.matcher, &mut derive_rng(2, &["bank"]));
    assert!(bank.gaps().is_empty());

    let adversarial: Vec<AdversarialReport> = perturbations
        .iter()
        .map(|p| {
            let mut rng = derive_rng(2, &["synthesize", &p.adversarial_id]);
            synthesize(
                p,
                &r.cleaned[&p.report_id],
                &bank,
                &r.matcher,
                &r.lex,
                &mut rng,
            )
            .unwrap()
        })
        .collect();
    let prompts = emit_prompts(&adversarial);
    assert_eq!(prompts.len(), adversarial.len());

    let dir = tempfile::tempdir().unwrap();
    let hash = r.lex.hash();
    let header = |stage: &str| StreamHeader::new(stage, &hash, 2, 2, 2);

    let path = dir.path().join("perturbations.jsonl");
    write_records(&path, &header("perturbations"), &perturbations).unwrap();
    let (_, back): (_, Vec<PerturbationRecord>) =
        read_stage(&path, "perturbations", &hash).unwrap();
    assert_eq!(back, perturbations);

    let path = dir.path().join("bank.jsonl");
    let records = bank.to_records(&r.lex);
    write_records(&path, &header("bank"), &records).unwrap();
    let (_, back) = read_stage(&path, "bank", &hash).unwrap();
    assert_eq!(SentenceBank::from_records(&back, &r.lex).unwrap(), bank);

    let path = dir.path().join("adversarial.jsonl");
    write_records(&path, &header("adversarial"), &adversarial).unwrap();
    let (_, back): (_, Vec<AdversarialReport>) = read_stage(&path, "adversarial", &hash).unwrap();
    assert_eq!(back, adversarial);

    let path = dir.path().join("prompts.jsonl");
    write_records(&path, &header("prompts"), &prompts).unwrap();
    let (_, back): (_, Vec<PromptRecord>) = read_stage(&path, "prompts", &hash).unwrap();
    assert_eq!(back, prompts);
    assert!(read_stage::<PromptRecord>(&path, "adversarial", &hash).is_err());
    assert!(read_stage::<PromptRecord>(&path, "prompts", "0000").is_err());
}
