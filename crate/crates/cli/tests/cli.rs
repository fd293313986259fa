use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shapprof"));
    c.env("RUST_LOG", "warn");
    c
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn write_config(dir: &Path, dataset: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({ "dataset": { "path": dataset } });
    if let (Some(c), Value::Object(e)) = (cfg.as_object_mut(), extra) {
        c.extend(e);
    }
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The `content` of a stamped JSON artifact.
fn artifact(path: &Path) -> Value {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["content"].clone()
}

#[test]
fn missing_dataset_is_a_prepare_stage_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tmp.path().join("absent.tsv"), json!({}));
    let o = run(bin().args(["prepare", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("out")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stage prepare failed"), "{}", stderr(&o));
}

#[test]
fn evaluate_without_scores_asks_for_the_score_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(bin().args(["evaluate", "--out"]).arg(tmp.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run score first"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(bin().arg("bogus")).status.code(), Some(1));
    assert_eq!(run(bin().args(["train", "--seed", "x"])).status.code(), Some(1));
    assert_eq!(run(bin().arg("--help")).status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{\"split_ratio\": 2}").unwrap();
    assert_eq!(run(bin().arg("prepare").arg("--config").arg(&cfg)).status.code(), Some(1));
}

#[test]
fn toy_pipeline_runs_end_to_end_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &data("toy_sms.tsv"), json!({}));
    let out = tmp.path().join("out");
    let t0 = Instant::now();
    for stage in ["prepare", "train", "explain", "profile", "score", "evaluate", "repair"] {
        let o = run(bin().arg(stage).arg("--config").arg(&cfg).arg("--out").arg(&out));
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let o = run(bin().arg("report").arg("--config").arg(&cfg).arg("--out").arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(t0.elapsed() < Duration::from_secs(60), "took {:?}", t0.elapsed());

    let md = String::from_utf8(o.stdout).unwrap();
    assert!(md.contains("| Representation | TP→TP | FP→TP | TN→TN | FN→TN |"));
    assert_eq!(md, std::fs::read_to_string(out.join("report.md")).unwrap());

    // correct fix = recovery - leakage in every repair report
    let repairs = artifact(&out.join("repair_report.json"))["repairs"].as_array().unwrap().clone();
    assert_eq!(repairs.len(), 7 * 8);
    for r in &repairs {
        let n = |k: &str| r[k].as_i64().unwrap();
        assert_eq!(n("n_correct_fix"), n("n_recovery") - n("n_leakage"));
    }

    let again = tmp.path().join("again");
    let o = run(bin().arg("run").arg("--config").arg(&cfg).arg("--out").arg(&again));
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 16);
    for n in names {
        assert!(
            std::fs::read(out.join(&n)).unwrap() == std::fs::read(again.join(&n)).unwrap(),
            "{n:?} differs between runs"
        );
    }

    // a different seed changes the digest, so old artifacts are refused
    let o = run(bin().args(["evaluate", "--seed", "9", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config digest"), "{}", stderr(&o));
}

#[test]
fn every_classifier_reaches_95_percent_on_sms() {
    let tmp = tempfile::tempdir().unwrap();
    for kind in ["logreg", "svm", "nb"] {
        let dir = tmp.path().join(kind);
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = write_config(
            &dir,
            &data("sms_spam.tsv"),
            json!({ "classifier": { "kind": kind } }),
        );
        for stage in ["prepare", "train"] {
            let o = run(bin().arg(stage).arg("--config").arg(&cfg).arg("--out").arg(dir.join("out")));
            assert!(o.status.success(), "{kind} {stage}: {}", stderr(&o));
        }
        let acc = artifact(&dir.join("out/model.json"))["test_accuracy"].as_f64().unwrap();
        assert!(acc >= 0.95, "{kind} test accuracy {acc}");
    }
}
