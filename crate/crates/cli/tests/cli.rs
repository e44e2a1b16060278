use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"seed = 1

[protocol]
tasks = 2
train_per_task = 200
eval_per_task = 100

[train]
epochs = 1
n_r = 8

[audit]
strategies = ["sur", "center"]
seeds = [0, 1]
"#;

fn bricklayer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bricklayer"))
        .args(args)
        .env("BRICKLAYER_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn run_writes_reports_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = bricklayer(&["run", "--config", &cfg, "--out", &s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["report.json", "report.csv", "run_meta.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
    }
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    assert_eq!(fs::read(a.join("report.csv")).unwrap(), fs::read(b.join("report.csv")).unwrap());
}

#[test]
fn format_flag_limits_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    let o = bricklayer(&["run", "--config", &cfg, "--out", &s(&out), "--format", "json"]);
    assert!(o.status.success());
    assert!(out.join("report.json").exists());
    assert!(!out.join("report.csv").exists());
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nreplaysize = 3\n");
    let o = bricklayer(&["run", "--config", &cfg, "--out", &s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("replaysize"));
}

#[test]
fn invalid_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\ngamma = 2.0\n");
    let o = bricklayer(&["run", "--config", &cfg, "--out", &s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.gamma"));

    let missing = dir.path().join("nope.toml");
    let o = bricklayer(&["run", "--config", &s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let o = bricklayer(&["gradcheck", "--instances", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let o = bricklayer(&["gradcheck", "--instances", "3", "--inject-fault", "isolation_loss"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("isolation_loss"));
}

#[test]
fn interrupted_run_resumes_to_the_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let plain = dir.path().join("plain");
    let ckpt = dir.path().join("run.ckpt");
    let resumed = dir.path().join("resumed");
    assert!(bricklayer(&["run", "--config", &cfg, "--out", &s(&plain)]).status.success());

    let o = bricklayer(&["run", "--config", &cfg, "--out", &s(&resumed), "--checkpoint", &s(&ckpt), "--max-steps", "5"]);
    assert!(o.status.success());
    assert!(ckpt.exists());
    assert!(!resumed.join("report.json").exists());

    let o = bricklayer(&["resume", "--checkpoint", &s(&ckpt), "--max-steps", "3"]);
    assert!(o.status.success());
    let o = bricklayer(&["resume", "--checkpoint", &s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(plain.join("report.json")).unwrap(),
        fs::read(resumed.join("report.json")).unwrap()
    );
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    fs::write(&ckpt, b"BRKLCKPT garbage").unwrap();
    let o = bricklayer(&["resume", "--checkpoint", &s(&ckpt)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn replay_audit_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("audit");
    let o = bricklayer(&["replay-audit", "--config", &cfg, "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(out.join("audit.csv")).unwrap();
    let mut lines = rows.lines();
    assert_eq!(lines.next(), Some("strategy,task,domain,mmd,seed"));
    // 2 strategies · 2 tasks · 2 domains · 2 seeds
    assert_eq!(lines.count(), 16);
    let summary = fs::read_to_string(out.join("audit_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn export_features_writes_two_dimensional_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("feat");
    let o = bricklayer(&["export-features", "--config", &cfg, "--toy2d", "--stream", "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for t in 1..=2 {
        let text = fs::read_to_string(out.join(format!("features_task{t}.csv"))).unwrap();
        assert_eq!(text.lines().next(), Some("task,class,domain,f0,f1"));
    }
    let stream = fs::read_to_string(out.join("stream.csv")).unwrap();
    assert_eq!(stream.lines().count(), 1 + 2 * (200 + 100));
}

#[test]
fn matrix_writes_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = r#"{
        "base": {"seed": 0, "protocol": {"tasks": 2, "train_per_task": 200, "eval_per_task": 100},
                 "train": {"epochs": 1, "n_r": 8}},
        "ablations": [{"name": "full"}, {"name": "lower_bound"}],
        "seeds": [0, 1],
        "reference": "full"
    }"#;
    let path = dir.path().join("matrix.json");
    fs::write(&path, spec).unwrap();
    let out = dir.path().join("m");
    let o = bricklayer(&["matrix", "--matrix", &s(&path), "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(out.join("cells/lower_bound__sur/seed1/report.json").exists());
}
