use std::fs;
use std::path::Path;
use std::process::Command;

use futh::cli::{run_args, Outcome, EXIT_CHECK_FAILED, EXIT_INPUT, EXIT_OK};

const TINY: &str = "\
model.frames = 6
model.height = 16
model.width = 16
model.d_g = 8
model.d_f = 8
model.d_r = 4
synth.patch = 5
synth.train_per_class = 3
synth.test_per_class = 2
phase.holistic.epochs = 1
phase.relation.epochs = 2
phase.fusion.epochs = 1
phase.holistic.lr = 0.01
phase.relation.lr = 0.01
phase.fusion.lr = 0.01
baseline.epochs = 1
data.train_manifest = data/train.manifest
data.test_manifest = data/test.manifest
";

fn run(args: &[&str]) -> Outcome {
    let mut full = vec!["futh"];
    full.extend_from_slice(args);
    run_args(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the tiny config plus its generated dataset into `dir`.
fn tiny_workspace(dir: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    let out = run(&["synth-gen", "--config", s(&cfg), "--out", s(&dir.join("data"))]);
    assert_eq!(out.code, EXIT_OK, "{}", out.output);
    cfg
}

#[test]
fn synth_gen_writes_balanced_reproducible_sets() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = run(&["synth-gen", "--out", s(d), "--seed", "5"]);
        assert_eq!(out.code, EXIT_OK, "{}", out.output);
    }
    let files: Vec<_> = fs::read_dir(a.join("train")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 200);
    let manifest = fs::read_to_string(a.join("train.manifest")).unwrap();
    let entries: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(entries.len(), 200);
    for class in 0..4 {
        let n = entries.iter().filter(|l| l.ends_with(&format!("\t{class}"))).count();
        assert_eq!(n, 50);
    }
    for f in &files {
        let twin = b.join("train").join(f.file_name().unwrap());
        assert_eq!(fs::read(f).unwrap(), fs::read(twin).unwrap());
    }
    assert_eq!(fs::read_dir(a.join("test")).unwrap().count(), 100);

    let other = dir.path().join("c");
    run(&["synth-gen", "--out", s(&other), "--seed", "6"]);
    assert_ne!(fs::read(&files[0]).unwrap(), fs::read(other.join("train").join(files[0].file_name().unwrap())).unwrap());
}

#[test]
fn train_writes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_workspace(dir.path(), "");
    let out_dir = dir.path().join("run");
    let out = run(&["train", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(out.code, EXIT_OK, "{}", out.output);
    for f in ["effective.cfg", "loss.csv", "final.ckpt", "report-holistic.txt", "report-relation.txt", "report-fusion.txt", "report-appearance.txt"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(out_dir.join("loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("phase,epoch,loss,accuracy"));
    assert_eq!(log.lines().count(), 1 + 1 + 2 + 1);
    assert!(out.output.contains("fusion: OA"));
}

#[test]
fn single_phase_runs_and_bad_phase_lists() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_workspace(dir.path(), "baseline.epochs = 0\n");
    let out_dir = dir.path().join("h");
    let out = run(&["train", "--config", s(&cfg), "--out", s(&out_dir), "--phases", "holistic"]);
    assert_eq!(out.code, EXIT_OK, "{}", out.output);
    assert!(out_dir.join("report-holistic.txt").exists());
    assert!(!out_dir.join("report-relation.txt").exists());

    for bad in ["fusion,holistic", "holistic,holistic", "temporal"] {
        let out = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x")), "--phases", bad]);
        assert_eq!(out.code, EXIT_INPUT, "{bad}: {}", out.output);
    }
}

#[test]
fn identical_runs_and_resumed_runs_agree_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_workspace(dir.path(), "train.checkpoint_every = 1\nbaseline.epochs = 0\n");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b] {
        assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(d)]).code, EXIT_OK);
    }
    let files = ["final.ckpt", "loss.csv", "report-holistic.txt", "report-relation.txt", "report-fusion.txt"];
    for f in files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let mid = a.join("relation-e0001.ckpt");
    assert!(mid.exists());
    let out = run(&["train", "--config", s(&cfg), "--out", s(&c), "--resume", s(&mid)]);
    assert_eq!(out.code, EXIT_OK, "{}", out.output);
    for f in files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap(), "{f} differs after resume");
    }
}

#[test]
fn eval_is_repeatable_and_checks_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_workspace(dir.path(), "baseline.epochs = 0\n");
    let run_dir = dir.path().join("run");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&run_dir)]).code, EXIT_OK);
    let ckpt = run_dir.join("final.ckpt");

    let first = run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    let second = run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert_eq!(first.code, EXIT_OK, "{}", first.output);
    assert_eq!(first, second);
    assert_eq!(first.output, fs::read_to_string(run_dir.join("report-fusion.txt")).unwrap());

    let relation = run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--phases", "relation"]);
    assert_eq!(relation.output, fs::read_to_string(run_dir.join("report-relation.txt")).unwrap());

    let empty = dir.path().join("empty.manifest");
    fs::write(&empty, "# classes: a,b,c,d\n").unwrap();
    let out = run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--manifest", s(&empty)]);
    assert_eq!(out.code, EXIT_INPUT);
    assert!(out.output.contains("no clips"), "{}", out.output);

    let wider = dir.path().join("wider.cfg");
    fs::write(&wider, TINY.replace("model.d_r = 4", "model.d_r = 6")).unwrap();
    let out = run(&["eval", "--config", s(&wider), "--checkpoint", s(&ckpt)]);
    assert_eq!(out.code, EXIT_INPUT);
    assert!(out.output.contains("configuration error"), "{}", out.output);
    assert!(out.output.contains("[4, 16]") && out.output.contains("[6, 16]"), "{}", out.output);

    let big = dir.path().join("big");
    run(&["synth-gen", "--out", s(&big)]);
    let out = run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--manifest", s(&big.join("test.manifest"))]);
    assert_eq!(out.code, EXIT_INPUT);
    assert!(out.output.contains("T=16") && out.output.contains("T=6"), "{}", out.output);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nmodel.depth = 3\n").unwrap();
    let out = run(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.code, EXIT_INPUT);
    assert!(out.output.contains("line 2"), "{}", out.output);

    fs::write(&cfg, "fusion.method = attention\n").unwrap();
    assert_eq!(run(&["train", "--config", s(&cfg)]).code, EXIT_INPUT);
    assert_eq!(run(&["train", "--config", s(&dir.path().join("missing.cfg"))]).code, EXIT_INPUT);
    assert_eq!(run(&["frobnicate"]).code, EXIT_INPUT);
    assert_eq!(run(&["--help"]).code, EXIT_OK);
}

#[test]
fn checks_report_and_fail_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(&["gradcheck", "--out", s(&dir.path().join("g.txt"))]);
    assert_eq!(ok.code, EXIT_OK, "{}", ok.output);
    assert!(ok.output.lines().skip(1).all(|l| l.ends_with(",pass")));
    assert_eq!(ok.output, fs::read_to_string(dir.path().join("g.txt")).unwrap());

    let bad = run(&["gradcheck", "--corrupt-conv3d"]);
    assert_eq!(bad.code, EXIT_CHECK_FAILED);
    assert!(bad.output.contains("conv3d-corrupted") && bad.output.contains("FAIL"));

    let inflate = run(&["inflate-check"]);
    assert_eq!(inflate.code, EXIT_OK, "{}", inflate.output);
    assert!(inflate.output.contains("boring_video,"));
    assert!(inflate.output.contains("temporal_sum,"));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_futh");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    let ok = status(&["inflate-check"]);
    assert_eq!(ok.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("boring_video"));
    let bad = status(&["gradcheck", "--corrupt-conv3d"]);
    assert_eq!(bad.status.code(), Some(EXIT_CHECK_FAILED));
    let missing = status(&["eval", "--config", "/nonexistent.cfg", "--checkpoint", "x"]);
    assert_eq!(missing.status.code(), Some(EXIT_INPUT));
    assert!(!missing.stderr.is_empty());
}
