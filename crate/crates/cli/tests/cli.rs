//! End-to-end checks of the command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CLASSES: [&str; 6] = [
    "healthy",
    "cancer",
    "cardiomegaly",
    "pleural_effusion",
    "pneumonia",
    "pneumothorax",
];

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic")
}

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corpa-forge"))
        .args(args)
        .env_remove("CORPA_LEXICON")
        .output()
        .expect("binary runs")
}

fn run_all(run: &Path) -> Output {
    let reports = fixtures().join("reports");
    let pairing = fixtures().join("pairing.csv");
    forge(&[
        "run-all",
        "--reports",
        reports.to_str().unwrap(),
        "--pairing",
        pairing.to_str().unwrap(),
        "--run",
        run.to_str().unwrap(),
    ])
}

fn records(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Scores with `top` first and `second` (if any) runner-up.
fn scores_for(top: &str, second: Option<&str>) -> String {
    CLASSES
        .iter()
        .map(|c| match () {
            _ if *c == top => "0.9",
            _ if Some(*c) == second => "0.5",
            _ => "0.1",
        })
        .collect::<Vec<_>>()
        .join(",")
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = forge(&["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = forge(&[
        "clean",
        "--reports",
        "/nonexistent/reports",
        "--run",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "item_id,true_label\nx,healthy\n").unwrap();
    let out = forge(&["evaluate", "--predictions", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dumped_lexicon_loads_with_the_same_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let dump = forge(&["lexicon", "dump"]);
    assert!(dump.status.success());
    let path = tmp.path().join("lexicon.toml");
    fs::write(&path, &dump.stdout).unwrap();
    let builtin = forge(&["lexicon", "hash"]);
    let loaded = forge(&["lexicon", "hash", "--lexicon", path.to_str().unwrap()]);
    assert!(loaded.status.success());
    assert_eq!(builtin.stdout, loaded.stdout);
}

#[test]
fn staged_commands_match_run_all() {
    let tmp = tempfile::tempdir().unwrap();
    let whole = tmp.path().join("whole");
    assert!(run_all(&whole).status.success());

    let staged = tmp.path().join("staged");
    let run = staged.to_str().unwrap();
    let reports = fixtures().join("reports");
    let pairing = fixtures().join("pairing.csv");
    let reports = reports.to_str().unwrap();
    let steps: Vec<Vec<&str>> = vec![
        vec![
            "ingest",
            "--reports",
            reports,
            "--pairing",
            pairing.to_str().unwrap(),
        ],
        vec!["clean", "--reports", reports],
        vec!["extract"],
        vec!["label"],
        vec!["undersample"],
        vec!["split"],
        vec!["bank"],
        vec!["perturb"],
        vec!["synthesize"],
        vec!["prompts"],
    ];
    for mut step in steps {
        step.extend(["--run", run]);
        let out = forge(&step);
        assert!(
            out.status.success(),
            "{step:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for stage in ["splits", "bank", "perturbations", "adversarial", "prompts"] {
        let file = format!("{stage}.jsonl");
        assert_eq!(
            fs::read(whole.join(&file)).unwrap(),
            fs::read(staged.join(&file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn evaluate_scores_a_model_that_ignores_perturbations() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(run_all(&run).status.success());

    let header = format!(
        "item_id,true_label,{}\n",
        CLASSES
            .iter()
            .map(|c| format!("score_{c}"))
            .collect::<Vec<_>>()
            .join(",")
    );
    let mut original = header.clone();
    let mut seen = std::collections::BTreeSet::new();
    for row in records(&run.join("splits.jsonl")) {
        let id = row["report_id"].as_str().unwrap().to_string();
        if row["split"] != "test" || !seen.insert(id.clone()) {
            continue;
        }
        let label = row["labels"][0].as_str().unwrap();
        original += &format!("{id},{label},{}\n", scores_for(label, None));
    }
    // A model that keeps predicting the original class and ranks an
    // unrelated class second: robust on every inter example, fooled on
    // every outer one.
    let mut adversarial = header;
    for rec in records(&run.join("perturbations.jsonl")) {
        let label = rec["original_class"].as_str().unwrap();
        let target = rec["target_class"].as_str();
        let decoy = target.map(|t| *CLASSES.iter().find(|c| **c != label && **c != t).unwrap());
        adversarial += &format!(
            "{},{label},{}\n",
            rec["adversarial_id"].as_str().unwrap(),
            scores_for(label, decoy)
        );
    }
    let orig_path = tmp.path().join("orig.csv");
    let adv_path = tmp.path().join("adv.csv");
    fs::write(&orig_path, original).unwrap();
    fs::write(&adv_path, adversarial).unwrap();

    let out = forge(&[
        "evaluate",
        "--run",
        run.to_str().unwrap(),
        "--predictions",
        orig_path.to_str().unwrap(),
        "--adversarial",
        adv_path.to_str().unwrap(),
        "--format",
        "records",
        "--save",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["asr"]["inter"], 0.0);
    assert_eq!(metrics["asr"]["outer"], 1.0);
    let n_inter = metrics["asr"]["n_inter"].as_u64().unwrap();
    let n_outer = metrics["asr"]["n_outer"].as_u64().unwrap();
    assert_eq!(metrics["asr"]["fooled_outer"].as_u64(), Some(n_outer));
    assert_eq!(
        metrics["asr"]["all"],
        n_outer as f64 / (n_inter + n_outer) as f64
    );
    assert!(run.join("metrics.jsonl").exists());
}
