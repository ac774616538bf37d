use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tangentconv::engine::read_checkpoint;
use tangentconv::io::read_ply;
use tangentconv::network::Model;
use tangentconv_cli::RunConfig;

const SMALL_NET: &str = r#"
seed = 3

[network]
classes = 5
signals = "DHN"
top_convs = 1
channels = { enc0 = [8, 8], enc1 = [8, 8], bottom = [8, 8], dec1 = [8, 8], top = 8 }

[train]
epochs = 1
lr = 0.001
rotations = 2
batch = { mode = "whole_scene" }
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tangentconv"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit status and the single stderr line of a failing run.
fn fails(args: &[&str]) -> (i32, String) {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(lines.len(), 1, "{err}");
    (out.status.code().unwrap(), lines[0].to_string())
}

struct Setup {
    dir: tempfile::TempDir,
}

impl Setup {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("net.toml"), SMALL_NET).unwrap();
        let s = Self { dir };
        // a sparse room keeps the runs short
        let mut scene = tangentconv::io::SceneSpec::room(4, 0.005);
        scene.density = 60.0;
        std::fs::write(s.p("scene.toml"), scene.to_toml()).unwrap();
        ok(&["gen-scene", "--scene", s.s("scene.toml"), "--output", s.s("room.ply"), "--seed", "1"]);
        s
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> &str {
        // leak is fine in tests: paths live for the whole run
        Box::leak(self.p(name).into_os_string().into_string().unwrap().into_boxed_str())
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn precompute_is_deterministic_and_reports_levels() {
    let t = Setup::new();
    let a = ok(&["precompute", "--input", t.s("room.ply"), "--output", t.s("a.tcp"), "--deterministic"]);
    ok(&["precompute", "--input", t.s("room.ply"), "--output", t.s("b.tcp"), "--deterministic", "--check-scaling"]);
    assert!(a.contains("levels=3"), "{a}");
    assert!(a.contains("level 2:"));
    assert_eq!(read(&t.p("a.tcp")), read(&t.p("b.tcp")));
}

#[test]
fn train_segment_evaluate_round_trip() {
    let t = Setup::new();
    let cfg = t.s("net.toml");
    ok(&["train", "--config", cfg, "--input", t.s("room.ply"), "--checkpoint", t.s("m.tckp"), "--out-dir", t.s("run")]);
    let loss = std::fs::read_to_string(t.p("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2, "{loss}");
    let meta = std::fs::read_to_string(t.p("run/run.txt")).unwrap();
    assert!(meta.lines().any(|l| l == "signals=DHN"), "{meta}");

    // resuming continues the epoch counter
    ok(&[
        "train", "--config", cfg, "--input", t.s("room.ply"), "--checkpoint", t.s("m.tckp"), "--out-dir", t.s("run"),
        "--resume", "--epochs", "2",
    ]);
    let loss = std::fs::read_to_string(t.p("run/loss.csv")).unwrap();
    let epochs: Vec<&str> = loss.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2"]);
    assert_eq!(read_checkpoint::<f32>(&t.p("m.tckp")).unwrap().epoch, 2);

    ok(&["precompute", "--input", t.s("room.ply"), "--output", t.s("room.tcp")]);
    let out = ok(&[
        "segment", "--checkpoint", t.s("m.tckp"), "--input", t.s("room.ply"), "--output", t.s("seg1.ply"),
        "--plans", t.s("room.tcp"), "--deterministic",
    ]);
    assert!(out.contains("oA="));
    ok(&["segment", "--checkpoint", t.s("m.tckp"), "--input", t.s("room.ply"), "--output", t.s("seg2.ply"), "--deterministic"]);
    assert_eq!(read(&t.p("seg1.ply")), read(&t.p("seg2.ply")));
    let input = read_ply(t.p("room.ply")).unwrap();
    let seg = read_ply(t.p("seg1.ply")).unwrap();
    assert_eq!(seg.len(), input.len());
    assert!(seg.labels().unwrap().iter().all(|&l| l < 5));

    let out = ok(&["evaluate", "--pred", t.s("seg1.ply"), "--truth", t.s("room.ply"), "--out-dir", t.s("eval")]);
    assert!(out.starts_with("oA="), "{out}");
    let confusion = std::fs::read_to_string(t.p("eval/confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 6);
    let total: u64 = confusion
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).collect::<Vec<_>>())
        .sum();
    assert_eq!(total as usize, input.len());
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let t = Setup::new();
    ok(&[
        "train", "--config", t.s("net.toml"), "--input", t.s("room.ply"), "--checkpoint", t.s("m.tckp"), "--out-dir",
        t.s("run"), "--lr", "0", "--epochs", "2",
    ]);
    let ck = read_checkpoint::<f32>(&t.p("m.tckp")).unwrap();
    assert_eq!(ck.epoch, 2);
    let cfg = RunConfig::from_toml(SMALL_NET).unwrap();
    let init = Model::<f32>::new(cfg.network.spec().unwrap(), cfg.seed).unwrap();
    assert_eq!(ck.params.len(), init.params.len());
    for ((_, a), (_, b)) in ck.params.iter().zip(init.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn benchmark_reports_table_columns() {
    let t = Setup::new();
    let out = ok(&["benchmark", "--config", t.s("net.toml"), "--input", t.s("room.ply"), "--scaling", "--csv", t.s("b.csv")]);
    let header: Vec<&str> = out.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Points", "Prep(s)", "FP(s)", "Full(s)", "Mem(MB)"]);
    let values: Vec<&str> = out.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(values[2], values[3], "one pass covers the scan");
    assert!(out.contains("precompute scaling:"));
    let csv = std::fs::read_to_string(t.p("b.csv")).unwrap();
    assert!(csv.starts_with("points,prep_s,fp_s,full_s,mem_mb"));
}

#[test]
fn errors_are_single_coded_lines() {
    let t = Setup::new();
    let (code, line) = fails(&["precompute", "--input", t.s("missing.ply"), "--output", t.s("x.tcp")]);
    assert!(line.starts_with("error E_IO:"), "{line}");
    assert_eq!(code, 3);

    std::fs::write(t.p("junk.ply"), "ply\nformat ascii 1.0\nelement vertex two\nend_header\n").unwrap();
    let (_, line) = fails(&["precompute", "--input", t.s("junk.ply"), "--output", t.s("x.tcp")]);
    assert!(line.starts_with("error E_PARSE:"), "{line}");

    std::fs::write(t.p("bad.toml"), "[plans]\nradius = 3\n").unwrap();
    let (code, line) = fails(&["precompute", "--config", t.s("bad.toml"), "--input", t.s("room.ply"), "--output", t.s("x.tcp")]);
    assert!(line.starts_with("error E_CONFIG:"), "{line}");
    assert_eq!(code, 2);

    let (_, line) = fails(&["frobnicate"]);
    assert!(line.starts_with("error E_CONFIG:"), "{line}");

    // plans built for another cloud
    let mut other = tangentconv::io::SceneSpec::room(9, 0.0);
    other.density = 30.0;
    std::fs::write(t.p("other.toml"), other.to_toml()).unwrap();
    ok(&["gen-scene", "--scene", t.s("other.toml"), "--output", t.s("other.ply")]);
    ok(&["precompute", "--input", t.s("other.ply"), "--output", t.s("other.tcp")]);
    ok(&[
        "train", "--config", t.s("net.toml"), "--input", t.s("room.ply"), "--checkpoint", t.s("m.tckp"), "--out-dir",
        t.s("run"), "--epochs", "0",
    ]);
    let (code, line) = fails(&[
        "segment", "--checkpoint", t.s("m.tckp"), "--input", t.s("room.ply"), "--output", t.s("s.ply"), "--plans",
        t.s("other.tcp"),
    ]);
    assert!(line.starts_with("error E_MISMATCH:"), "{line}");
    assert_eq!(code, 5);
}
