use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn clarity(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clarity")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--set", "synth_count=20",
    "--set", "channels=2",
    "--set", "decoder_channels=4",
    "--set", "text_dim=16",
    "--set", "epochs=2",
    "--set", "batch_size=4",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    clarity(&args)
}

#[test]
fn unknown_config_key_exits_with_usage_code() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\nlearning_rat = 0.1\n").unwrap();
    let out = clarity(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rat"));
}

#[test]
fn bad_flag_value_exits_with_usage_code() {
    let dir = TempDir::new().unwrap();
    let out = clarity(&["train", "--gating", "sideways", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("gating"));
}

#[test]
fn missing_dataset_exits_with_usage_code() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nowhere");
    let out = train(&dir.path().join("o"), &["--set", &format!("dataset={}", missing.display())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere"));
}

#[test]
fn train_writes_a_complete_deterministic_report() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&a, &[]).status.success());
    assert!(train(&b, &[]).status.success());
    for f in ["report.txt", "report.csv", "config.echo", "timing.txt"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let csv_a = fs::read(a.join("report.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("report.csv")).unwrap());
    assert_eq!(fs::read(a.join("report.txt")).unwrap(), fs::read(b.join("report.txt")).unwrap());
    let text = fs::read_to_string(a.join("report.txt")).unwrap();
    for class in ["Background", "Guardrail", "Color Cone", "IoU", "TV(Total Darkness, Well-lit)"] {
        assert!(text.contains(class), "{class}");
    }
    assert!(text.contains("seed = 1"));
}

#[test]
fn report_config_block_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    assert!(train(&a, &["--set", "epochs=1"]).status.success());
    let b = dir.path().join("b");
    let out = clarity(&["train", "--config", a.join("report.txt").to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(a.join("report.csv")).unwrap(), fs::read(b.join("report.csv")).unwrap());
}

#[test]
fn eval_reproduces_training_metrics() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    assert!(train(&run, &["--set", "epochs=1"]).status.success());
    let ev = dir.path().join("ev");
    let out = clarity(&["eval", "--run", run.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let pick = |p: PathBuf| -> Vec<String> {
        fs::read_to_string(p).unwrap().lines().filter(|l| l.starts_with("class,") || l.starts_with("summary,")).map(String::from).collect()
    };
    assert_eq!(pick(run.join("report.csv")), pick(ev.join("report.csv")));
}

fn conditions(root: &Path) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for split in ["train", "test"] {
        let Ok(entries) = fs::read_dir(root.join(split)) else { continue };
        for e in entries {
            let c = fs::read_to_string(e.unwrap().path().join("condition.txt")).unwrap();
            *counts.entry(c.trim().to_string()).or_default() += 1;
        }
    }
    counts
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_is_stratified_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = clarity(&["synth", "--count", "100", "--out", d.to_str().unwrap()]);
        assert!(out.status.success());
    }
    let counts = conditions(&a);
    assert_eq!(counts.len(), 5);
    assert!(counts.values().all(|&n| n == 20), "{counts:?}");
    assert_eq!(tree_bytes(&a), tree_bytes(&b));

    let ds = clarity_core::dataset::read_dataset(&a).unwrap();
    assert_eq!(ds.train.len() + ds.test.len(), 100);
    assert!(ds.train.iter().all(|s| s.height() == 32 && s.width() == 32));
}

#[test]
fn synth_rejects_bad_size() {
    let dir = TempDir::new().unwrap();
    let out = clarity(&["synth", "--count", "5", "--size", "48", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_detects_a_fault() {
    let ok = clarity(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = stdout(&ok);
    assert!(text.lines().filter(|l| l.contains("pass")).count() >= 10, "{text}");

    let bad = clarity(&["gradcheck", "--corrupt", "conv2d"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("failed: conv2d"));
}

#[test]
fn training_on_a_written_dataset() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    assert!(clarity(&["synth", "--count", "10", "--out", data.to_str().unwrap()]).status.success());
    let out = train(&dir.path().join("o"), &["--set", &format!("dataset={}", data.display()), "--set", "epochs=1"]);
    assert!(out.status.success(), "{}", stderr(&out));
}
