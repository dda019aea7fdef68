use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[corpus]
level_counts = [1, 2, 3]
videos_per_leaf = 4
clips_per_video = 6
dim = 16

[train]
batch_size = 8

[train.model]
heads = 2
ff_dim = 32
head_hidden = 16

[finetune]
batch_size = 8
epochs = 2
"#;

fn pivot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pivot"))
        .args(args)
        .env_remove("PIVOT_SEED")
        .output()
        .expect("pivot runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pivot(args);
    assert!(
        out.status.success(),
        "pivot {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn gen_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["gen-corpus", "--out", s(&a), "--seed", "4", "--config", s(&cfg)]);
    ok(&["gen-corpus", "--out", s(&b), "--seed", "4", "--config", s(&cfg)]);
    ok(&["gen-corpus", "--out", s(&c), "--seed", "5", "--config", s(&cfg)]);
    let sums = |d: &Path| json(&d.join("run_manifest.json"))["checksums"].clone();
    assert_eq!(sums(&a), sums(&b));
    assert_ne!(sums(&a), sums(&c));
    assert!(sums(&a).as_object().unwrap().contains_key("videos.jsonl"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("env");
    let status = Command::new(env!("CARGO_BIN_EXE_pivot"))
        .args(["gen-corpus", "--out", s(&out), "--config", s(&cfg)])
        .env("PIVOT_SEED", "31")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(json(&out.join("run_manifest.json"))["seed"], 31);
}

#[test]
fn analyze_stop_on_logistic_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("metrics.csv");
    fs::copy(fixture("logistic_metrics.csv"), &metrics).unwrap();
    let out = ok(&["analyze-stop", "--metrics", s(&metrics), "--degree", "10", "--patience", "50"]);
    let a = json(&dir.path().join("stop_analysis.json"));
    let e_star = a["e_star"].as_u64().unwrap();
    assert!((450..=550).contains(&e_star), "e_star {e_star}");
    // no checkpoints beside the file: the default 50-epoch schedule is assumed
    assert_eq!(a["selected_checkpoint_epoch"].as_u64().unwrap() % 50, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains(&format!("e_star {e_star}")));
    assert!(dir.path().join("stop_analysis.json.manifest.json").exists());
}

#[test]
fn bad_invocations_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!pivot(&["gen-corpus", "--bogus"]).status.success());
    let missing = dir.path().join("nope");
    let out = pivot(&["mine", "--corpus", s(&missing), "--out", s(&dir.path().join("l.jsonl"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatch_size = 0\n").unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("corpus");
    ok(&["gen-corpus", "--out", s(&corpus), "--config", s(&cfg)]);
    let labels = dir.path().join("labels.jsonl");
    ok(&["mine", "--corpus", s(&corpus), "--out", s(&labels)]);
    let run = dir.path().join("run");
    let out = pivot(&[
        "pretrain", "--corpus", s(&corpus), "--labels", s(&labels), "--out", s(&run), "--config", s(&bad),
    ]);
    assert!(!out.status.success());
    assert!(!run.join("run_manifest.json").exists());
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let corpus = d.join("corpus");
    let xfer = d.join("xfer");
    ok(&["gen-corpus", "--out", s(&corpus), "--seed", "1", "--config", s(&cfg)]);
    ok(&["gen-corpus", "--out", s(&xfer), "--seed", "2", "--preset", "transfer", "--config", s(&cfg)]);
    let labels = d.join("labels.jsonl");
    ok(&["mine", "--corpus", s(&corpus), "--k", "3", "--out", s(&labels)]);
    let first = fs::read_to_string(&labels).unwrap();
    let line: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(line["clips"][0].as_array().unwrap().len(), 3);

    let run = d.join("run");
    ok(&[
        "pretrain", "--corpus", s(&corpus), "--labels", s(&labels), "--out", s(&run),
        "--epochs", "3", "--config", s(&cfg), "--pool", "mean",
    ]);
    let m = json(&run.join("run_manifest.json"));
    let aug = &m["config"]["augment"];
    for flag in ["threshold_enabled", "in_task", "sort", "unique", "swap"] {
        assert_eq!(aug[flag], false, "{flag}");
    }
    assert_eq!(m["config"]["model"]["pool"], "mean");
    assert_eq!(m["config"]["epochs"], 3);
    assert_eq!(m["clip_counts"]["per_epoch"].as_array().unwrap().len(), 3);
    assert!(m["checksums"].as_object().unwrap().contains_key("metrics.csv"));
    assert!(run.join("ckpt_3.pivt").exists());

    let ckpt = run.join("ckpt_3.pivt");
    for task in ["tr", "sr", "sf"] {
        let out_dir = d.join("ft").join(task);
        ok(&[
            "finetune", "--ckpt", s(&ckpt), "--corpus", s(&xfer), "--task", task, "--out", s(&out_dir),
            "--config", s(&cfg),
        ]);
        let report = json(&out_dir.join("report.json"));
        assert!(report["n"].as_u64().unwrap() > 0);
        let eval_out = d.join(format!("eval_{task}.json"));
        ok(&["eval", "--model", s(&out_dir.join("tuned.pivt")), "--corpus", s(&xfer), "--task", task, "--out", s(&eval_out)]);
        assert_eq!(json(&eval_out)["task"], report["task"]);
    }
    // the checkpoint is read, never rewritten
    let sums = &json(&run.join("run_manifest.json"))["checksums"];
    let now = pivot_sha(&ckpt);
    assert_eq!(sums["ckpt_3.pivt"], now);

    let wrong = pivot(&["eval", "--model", s(&d.join("ft/tr/tuned.pivt")), "--corpus", s(&xfer), "--task", "sr"]);
    assert!(!wrong.status.success());

    let csv = d.join("table.csv");
    let out = ok(&["report", "--runs", s(&d.join("ft")), "--csv", s(&csv)]);
    let text = String::from_utf8_lossy(&out.stdout);
    let header = text.lines().next().unwrap();
    assert!(header.contains("SF") && header.find("SF") < header.find("SR") && header.find("SR") < header.find("TR"));
    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("run,SF,SR,TR\n"));
    assert_eq!(table.lines().count(), 2);
}

fn pivot_sha(p: &Path) -> Value {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(fs::read(p).unwrap());
    Value::String(d.iter().map(|b| format!("{b:02x}")).collect())
}
