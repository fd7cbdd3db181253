use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use diffcl_cli::{CliError, TrainFlags};
use diffcl_core::ExperimentConfig;
use proptest::prelude::*;

const TINY: [&str; 12] = [
    "--embed-dim",
    "8",
    "--num-heads",
    "2",
    "--num-encoders",
    "1",
    "--layers-per-encoder",
    "1",
    "--max-len",
    "20",
    "--batch-size",
    "16",
];

fn diffcl(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffcl"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn diffcl")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = diffcl(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(out: &Path, args: &[&str]) -> i32 {
    diffcl(out, args).status.code().expect("exit code")
}

fn prepared(students: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--students", students]);
    ok(dir.path(), &["prepare"]);
    dir
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY).collect()
}

#[test]
fn prepare_is_deterministic() {
    let a = prepared("40");
    let b = prepared("40");
    let files = ["train.csv", "valid.csv", "test.csv", "difficulty.csv", "vocab.json", "manifest.json"];
    for f in files {
        let x = fs::read(a.path().join("prepared").join(f)).unwrap();
        let y = fs::read(b.path().join("prepared").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between runs");
    }
    ok(a.path(), &["prepare", "--seed", "9"]);
    assert_ne!(
        fs::read(a.path().join("prepared/test.csv")).unwrap(),
        fs::read(b.path().join("prepared/test.csv")).unwrap()
    );
}

#[test]
fn missing_texts_are_flagged_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--students", "30"]);
    let log = ok(
        dir.path(),
        &["prepare", "--question-texts", "/nonexistent/q.csv", "--concept-texts", "/nonexistent/c.csv"],
    );
    assert!(log.contains("text features unavailable"), "{log}");
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("prepared/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["text_features_available"], false);
    assert_eq!(code(dir.path(), &["predict-diff"]), 3);
    assert_eq!(code(dir.path(), &["ablate", "difficulty-prediction"]), 3);
}

#[test]
fn exit_codes() {
    let empty = tempfile::tempdir().unwrap();
    let p = empty.path();
    assert_eq!(code(p, &["prepare", "--interactions", "/nonexistent.csv"]), 2);
    assert_eq!(code(p, &["train"]), 3);
    assert_eq!(code(p, &["evaluate", "--run", "nothing"]), 3);
    assert_eq!(code(p, &["train", "--set", "training.no_such_key=1"]), 2);
    assert_eq!(code(p, &["train", "--lambda-c", "1.5"]), 2);

    let bad = p.join("bad.csv");
    fs::write(&bad, "user_id,question_id,response\nu1,q1,1\n").unwrap();
    let o = diffcl(p, &["prepare", "--interactions", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("concept_id"));

    let d = prepared("30");
    assert_eq!(code(d.path(), &["ablate", "lambda-sweep", "--grid", "0,2"]), 2);
    assert_eq!(code(d.path(), &["ablate", "diff-cl", "--folds", "1"]), 2);
    assert_eq!(code(d.path(), &["train", "--text-difficulty"]), 3);
}

#[test]
fn divergence_maps_to_exit_four() {
    let e = CliError::from(diffcl_core::Error::Divergence {
        epoch: 3,
        history: Vec::new(),
    });
    assert_eq!(e.exit_code(), 4);
    assert_eq!(CliError::MissingArtifact(vec!["x".into()]).exit_code(), 3);
    assert_eq!(CliError::Usage("u".into()).exit_code(), 2);
    assert_eq!(CliError::Plot("p".into()).exit_code(), 1);
}

#[test]
fn train_then_evaluate() {
    let d = prepared("40");
    let p = d.path();
    let aug = p.join("aug.csv");
    let args = with_tiny(&["train", "--run", "one", "--max-epochs", "1", "--dump-augmented", aug.to_str().unwrap()]);
    ok(p, &args);
    let run = p.join("runs/one");
    for f in ["config.toml", "history.csv", "model.json", "metrics.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2, "{history}");
    let cfg = ExperimentConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(cfg.training.max_epochs, 1);
    assert_eq!(cfg.model.embed_dim, 8);

    let dump = fs::read_to_string(&aug).unwrap();
    assert!(dump.starts_with("view,row,position,question_id,concept_id,response"));
    assert!(dump.lines().any(|l| l.starts_with("2,")));

    let log = ok(p, &["evaluate", "--run", "one"]);
    assert!(log.contains("test: AUC"), "{log}");
    let eval = fs::read_to_string(run.join("evaluation.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3);
}

/// Columns of history.csv other than the contrastive loss.
fn history_without_cl(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            [f[0], f[1], f[2], f[4], f[5]].join(",")
        })
        .collect()
}

#[test]
fn zero_lambda_matches_bce_only() {
    let d = prepared("40");
    let p = d.path();
    ok(p, &with_tiny(&["train", "--run", "zero", "--max-epochs", "2", "--lambda-c", "0"]));
    ok(p, &with_tiny(&["train", "--run", "bce", "--max-epochs", "2", "--set", "training.bce_only=true"]));
    assert_eq!(
        history_without_cl(&p.join("runs/zero/history.csv")),
        history_without_cl(&p.join("runs/bce/history.csv"))
    );
}

#[test]
fn config_file_and_overrides() {
    let d = prepared("30");
    let p = d.path();
    let cfg_path = p.join("exp.toml");
    fs::write(&cfg_path, "[training]\nmax_epochs = 1\nlambda_c = 0.3\n\n[model]\nembed_dim = 8\nnum_heads = 2\n").unwrap();
    let c = cfg_path.to_str().unwrap();
    ok(p, &["--config", c, "--set", "training.lambda_c=0.7", "train", "--run", "cfg", "--num-encoders", "1"]);
    let saved = ExperimentConfig::load(&p.join("runs/cfg/config.toml")).unwrap();
    assert_eq!(saved.training.lambda_c, 0.7);
    assert_eq!(saved.training.max_epochs, 1);
    assert_eq!(saved.model.num_encoders, 1);
    assert_eq!(code(p, &["--config", "/nonexistent.toml", "train"]), 3);
}

#[test]
fn report_without_results_is_a_stub() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["report"]);
    let md = fs::read_to_string(dir.path().join("report/report.md")).unwrap();
    assert!(md.contains("No results found"), "{md}");
    assert!(md.contains("Missing inputs"));
}

#[test]
fn report_links_existing_results() {
    let d = prepared("40");
    let p = d.path();
    ok(p, &with_tiny(&["train", "--max-epochs", "1"]));
    ok(p, &with_tiny(&["ablate", "lambda-sweep", "--grid", "0,1", "--max-epochs", "1"]));
    ok(p, &["report"]);
    let md = fs::read_to_string(p.join("report/report.md")).unwrap();
    assert!(md.contains("training_curves.svg") && md.contains("lambda_sweep.svg"), "{md}");
    assert!(p.join("report/lambda_sweep.svg").exists());
    assert!(!md.contains("No results found"));
    let svg = fs::read(p.join("report/training_curves.svg")).unwrap();
    ok(p, &["report"]);
    assert_eq!(fs::read_to_string(p.join("report/report.md")).unwrap(), md);
    assert_eq!(fs::read(p.join("report/training_curves.svg")).unwrap(), svg);
}

#[test]
fn predict_diff_fills_unseen_items() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["synth", "--students", "40", "--rare-per-student", "1"]);
    ok(p, &["prepare"]);
    ok(p, &["predict-diff", "--set", "text.epochs=3", "--holdout", "0.2"]);
    let preds = fs::read_to_string(p.join("difficulty/predictions.csv")).unwrap();
    assert!(preds.starts_with("id,kind,predicted_difficulty,source"));
    assert!(preds.contains("text_model") && preds.contains("ctt"));
    for line in preds.lines().skip(1) {
        let v: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{line}");
    }
    ok(p, &with_tiny(&["train", "--run", "text", "--text-difficulty", "--max-epochs", "1"]));
    ok(p, &["evaluate", "--run", "text"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flag_values_survive_the_override_path(
        lambda in 0.0f64..=1.0,
        lr in 1e-6f64..1.0,
        epochs in 1usize..500,
        dim in 1usize..64,
    ) {
        let flags = TrainFlags {
            lambda_c: Some(lambda),
            learning_rate: Some(lr),
            max_epochs: Some(epochs),
            embed_dim: Some(dim * 2),
            num_heads: Some(2),
            ..TrainFlags::default()
        };
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&flags.overrides()).unwrap();
        prop_assert_eq!(cfg.training.lambda_c, lambda);
        prop_assert_eq!(cfg.training.learning_rate, lr);
        prop_assert_eq!(cfg.training.max_epochs, epochs);
        prop_assert_eq!(cfg.model.embed_dim, dim * 2);
    }
}
