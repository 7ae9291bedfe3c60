//! The `glnet` binary end to end on a tiny model.

use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 11] = [
    "encoder=[4, 6, 8]",
    "pyramid=6",
    "global_size=32",
    "patch=32",
    "overlap=8",
    "epochs=[1, 1, 1]",
    "local_epochs=1",
    "patches_per_image=2",
    "scored_patches=2",
    "batch_size=2",
    "lambda=0.01",
];

fn glnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glnet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = glnet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synthesize(data: &Path, split: &str, first: &str, n: &str) {
    ok(&["synthesize", "--out", s(data), "--split", split, "--canvas", "64", "--patch", "32", "--n", n, "--first", first, "--seed", "5"]);
}

fn train(data: &Path, out: &Path, phase: &str) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--phase", phase, "--seed", "1"];
    for t in TINY {
        args.extend(["--set", t]);
    }
    glnet(&args)
}

#[test]
fn synthesize_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (data, runs, pred) = (dir.path().join("data"), dir.path().join("runs"), dir.path().join("pred"));
    synthesize(&data, "train", "0", "3");
    synthesize(&data, "test", "3", "2");
    assert!(data.join("train/manifest.json").is_file());
    assert!(train(&data, &runs, "all").status.success());
    for f in ["config.toml", "phase1.ckpt", "phase2.ckpt", "phase3.ckpt", "phase3.losses.csv"] {
        assert!(runs.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(runs.join("phase1.losses.csv")).unwrap();
    assert!(csv.starts_with("phase,epoch,step,loss\n"));
    assert!(csv.lines().count() > 1);

    let test = data.join("test");
    ok(&["infer", "--checkpoint", s(&runs.join("phase3.ckpt")), "--input", s(&test), "--out", s(&pred)]);
    let manifest = std::fs::read_to_string(pred.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    let out = ok(&["eval", "--pred", s(&pred), "--gt", s(&test), "--classes", "3"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["metric"], "miou");
    assert_eq!(report["images"], 2);
    let v = report["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&v));

    ok(&["infer", "--checkpoint", s(&runs.join("phase3.ckpt")), "--input", s(&test), "--out", s(&pred), "--coarse-to-fine"]);
    ok(&["infer", "--checkpoint", s(&runs.join("phase1.ckpt")), "--input", s(&test), "--out", s(&pred), "--mode", "global-only"]);

    // a bidirectional pass needs a phase-3 model
    let out = glnet(&["infer", "--checkpoint", s(&runs.join("phase2.ckpt")), "--input", s(&test), "--out", s(&pred)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn phases_can_run_separately() {
    let dir = tempfile::tempdir().unwrap();
    let (data, runs) = (dir.path().join("data"), dir.path().join("runs"));
    synthesize(&data, "train", "0", "2");
    let out = train(&data, &runs, "2");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("phase1"));
    for phase in ["1", "2", "3", "local"] {
        assert!(train(&data, &runs, phase).status.success(), "phase {phase}");
    }
    assert!(runs.join("local.ckpt").is_file());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let small = glnet(&["synthesize", "--out", s(&data), "--canvas", "16", "--patch", "32", "--n", "1"]);
    assert_eq!(small.status.code(), Some(2));
    assert!(glnet(&["train", "--set", "sharing=sideways"]).status.code() == Some(2));
    assert!(glnet(&["frobnicate"]).status.code() == Some(2));
    let missing = glnet(&["infer", "--checkpoint", s(&dir.path().join("none.ckpt")), "--input", s(&data), "--out", s(&data)]);
    assert_ne!(missing.status.code(), Some(0));
    let stderr = String::from_utf8_lossy(&missing.stderr);
    assert!(stderr.starts_with("error: ") && stderr.contains("none.ckpt"), "{stderr}");
}

#[test]
fn sweep_writes_table_json_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let (data, runs) = (dir.path().join("data"), dir.path().join("runs"));
    synthesize(&data, "train", "0", "2");
    synthesize(&data, "test", "2", "1");
    assert!(train(&data, &runs, "all").status.success());
    let config = format!(
        "data = {:?}\nclasses = 3\naxis = \"patch_size\"\nvalues = [32, 48]\noverlap = 8\nout = {:?}\n\
         [[models]]\nlabel = \"glnet\"\nmode = \"glnet-bidir\"\ncheckpoint = {:?}\n\
         [[models]]\nlabel = \"missing\"\nmode = \"local-only\"\ncheckpoint = {:?}\n",
        s(&data),
        s(&dir.path().join("sweep")),
        s(&runs.join("phase3.ckpt")),
        s(&runs.join("local.ckpt")),
    );
    let path = dir.path().join("sweep.toml");
    std::fs::write(&path, config).unwrap();
    ok(&["sweep", "--config", s(&path)]);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("config,mode,axis,value,miou,peak_bytes,seconds"));
    assert!(rows[1..3].iter().all(|r| r.ends_with(",ok")));
    assert!(rows[3..].iter().all(|r| r.contains("skipped")));
    assert!(dir.path().join("sweep.json").is_file());
    assert!(std::fs::read_to_string(dir.path().join("sweep.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn coarse_to_fine_lesion_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, coarse, fine, pred) = (
        dir.path().join("data"),
        dir.path().join("coarse"),
        dir.path().join("fine"),
        dir.path().join("pred"),
    );
    for (split, first) in [("train", "0"), ("test", "3")] {
        ok(&["synthesize", "--kind", "lesion", "--out", s(&data), "--split", split, "--canvas", "96", "--patch", "32", "--n", "3", "--first", first, "--seed", "2"]);
    }
    for (out, boxed, phase) in [(&coarse, "boxed=false", "1"), (&fine, "boxed=true", "all")] {
        let mut args = vec!["train", "--data", s(&data), "--out", s(out), "--phase", phase, "--set", "classes=2", "--set", boxed];
        for t in TINY {
            args.extend(["--set", t]);
        }
        ok(&args);
    }
    ok(&[
        "infer",
        "--checkpoint",
        s(&fine.join("phase3.ckpt")),
        "--coarse-checkpoint",
        s(&coarse.join("phase1.ckpt")),
        "--coarse-to-fine",
        "--input",
        s(&data.join("test")),
        "--out",
        s(&pred),
    ]);
    let manifest = std::fs::read_to_string(pred.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(manifest.lines().all(|l| l.contains("\"coarse_to_fine\"")));
    let out = ok(&["eval", "--pred", s(&pred), "--gt", s(&data.join("test")), "--metric", "isic"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["metric"], "isic");
}
