//! End-to-end runs of the binary under a toy configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TOY: &str = "\
# small enough for a test run
encoder.width = 8
encoder.layers = 1
uld.head_channels = 4
pmn.key_width = 4
pmn.hidden = 8
data.train_sequences = 3
data.eval_sequences = 2
data.length = 12
stage1.steps = 3
stage1.batch = 2
stage2.steps = 3
stage2.batch = 2
stage2.holdout_pairs = 16
";

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("toy.conf"), TOY).unwrap();
        Sandbox { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_unctrack"))
            .current_dir(self.dir.path())
            .args(["--preset", "fast", "--config", "toy.conf"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Trains both stages and returns the final weights path.
fn trained(sb: &Sandbox, tag: &str) -> PathBuf {
    let s1 = format!("{tag}-s1.bin");
    let s2 = format!("{tag}-s2.bin");
    sb.ok(&["train-stage1", "--out", &s1]);
    sb.ok(&["train-stage2", "--weights", &s1, "--out", &s2]);
    sb.path(&s2)
}

#[test]
fn full_pipeline_is_reproducible() {
    let sb = Sandbox::new();
    sb.ok(&["synth", "--out", "seq.bin", "--seed", "5", "--length", "10", "--occlude", "3-5"]);
    sb.ok(&["synth", "--out", "seq2.bin", "--seed", "5", "--length", "10", "--occlude", "3-5"]);
    assert_eq!(read(&sb.path("seq.bin")), read(&sb.path("seq2.bin")));

    let a = trained(&sb, "a");
    let b = trained(&sb, "b");
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&sb.path("a-s1.bin")), read(&sb.path("b-s1.bin")));

    for run in ["1", "2"] {
        let csv = format!("trace{run}.csv");
        let summary = format!("summary{run}.json");
        let report = format!("eval{run}.json");
        let w = a.to_str().unwrap();
        sb.ok(&["track", "--weights", w, "--sequence", "seq.bin", "--csv", &csv, "--summary", &summary]);
        sb.ok(&["eval", "--weights", w, "--out", &report]);
    }
    for (x, y) in [
        ("trace1.csv", "trace2.csv"),
        ("summary1.json", "summary2.json"),
        ("eval1.json", "eval2.json"),
    ] {
        assert_eq!(read(&sb.path(x)), read(&sb.path(y)), "{x} differs from {y}");
    }

    let csv = String::from_utf8(read(&sb.path("trace1.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let tags: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(12).unwrap()).collect();
    assert_eq!(&tags[3..=5], ["occluded"; 3]);

    let eval: serde_json::Value = serde_json::from_slice(&read(&sb.path("eval1.json"))).unwrap();
    let labels: Vec<&str> = eval["variants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["variant"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["full", "no-uld", "no-pmn", "neither"]);
}

#[test]
fn weights_survive_a_load_save_cycle() {
    let sb = Sandbox::new();
    sb.ok(&["train-stage1", "--out", "w.bin", "--log", "loss.csv"]);
    let log = String::from_utf8(read(&sb.path("loss.csv"))).unwrap();
    assert_eq!(log.lines().count(), 4);
    // Stage 2 with zero steps reloads and rewrites the stage-1 file unchanged.
    sb.ok(&["--set", "stage2.steps=0", "train-stage2", "--weights", "w.bin", "--out", "w2.bin"]);
    assert_eq!(read(&sb.path("w.bin")), read(&sb.path("w2.bin")));
}

#[test]
fn input_errors_exit_with_two() {
    let sb = Sandbox::new();
    let code = |args: &[&str]| sb.run(args).status.code();
    assert_eq!(code(&["--set", "no.such.key=1", "gradcheck", "--points", "1"]), Some(2));
    assert_eq!(code(&["--set", "stage1.steps=abc", "gradcheck", "--points", "1"]), Some(2));
    assert_eq!(code(&["track", "--weights", "missing.bin", "--sequence", "x", "--csv", "a", "--summary", "b"]), Some(2));
    fs::write(sb.path("junk.bin"), b"not weights").unwrap();
    assert_eq!(code(&["eval", "--weights", "junk.bin", "--out", "e.json"]), Some(2));
    assert_eq!(code(&["synth", "--out", "s.bin", "--occlude", "0-3"]), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let sb = Sandbox::new();
    let out = sb.run(&["--set", "stage1.lr=1e300", "--set", "stage1.clip=1e300", "train-stage1", "--out", "w.bin"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sb.path("w.bin").exists());
}

#[test]
fn gradcheck_passes_and_writes_a_report() {
    let sb = Sandbox::new();
    let out = sb.ok(&["gradcheck", "--points", "2", "--out", "grad.json"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.contains("FAIL"));
    let report: serde_json::Value = serde_json::from_slice(&read(&sb.path("grad.json"))).unwrap();
    assert!(report.as_array().unwrap().len() > 30);
}
