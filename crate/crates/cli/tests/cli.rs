//! Subcommand dispatch, output files and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use evifuse::tensor_io::{load_u8_grid, save_u8_grid};
use evifuse::{load_tensor, save_tensor, VoxelGrid};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evifuse"))
}

fn summary(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, shape: &[usize], data: Vec<f32>) -> PathBuf {
    let p = dir.join(name);
    save_tensor(&VoxelGrid::new(shape, data).unwrap(), &p).unwrap();
    p
}

/// Two-voxel belief volumes (N = 2): masses `(s0, s1, u)` per voxel.
fn beliefs(dir: &Path, name: &str, voxels: &[[f32; 3]]) -> PathBuf {
    write(
        dir,
        name,
        &[voxels.len(), 1, 1, 3],
        voxels.iter().flatten().copied().collect(),
    )
}

#[test]
fn fuse_raw_and_renormalized() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = beliefs(d, "a.npy", &[[0.6, 0.2, 0.2], [0.0, 0.0, 1.0]]);
    let b = beliefs(d, "b.npy", &[[0.6, 0.2, 0.2], [0.5, 0.25, 0.25]]);
    let out = d.join("f.npy");
    let s = summary(
        &bin()
            .args(["fuse", "--no-renorm", "--a"])
            .arg(&a)
            .arg("--b")
            .arg(&b)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap(),
    );
    assert_eq!(s["command"], "fuse");
    assert_eq!(s["stats"]["renormalized"], false);
    let f = load_tensor(&out).unwrap();
    // 0.36 + (0.12 + 0.12) / 2 = 0.48 ; 0.04 + 0.04 / 2 = 0.08 ; 0.04
    let expect = [0.48, 0.08, 0.04, 0.25, 0.125, 0.25];
    for (got, want) in f.data().iter().zip(expect) {
        assert!((got - want).abs() < 1e-6, "{:?}", f.data());
    }

    summary(
        &bin()
            .args(["fuse", "--a"])
            .arg(&a)
            .arg("--b")
            .arg(&b)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap(),
    );
    let f = load_tensor(&out).unwrap();
    for v in 0..2 {
        let total: f32 = f.voxel(v).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn fuse_from_logits_and_uncertainty_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let la = write(
        d,
        "la.npy",
        &[2, 2, 1, 2],
        vec![1.0, -1.0, 0.0, 0.0, 3.0, 2.0, -2.0, 0.5],
    );
    let fused = d.join("f.npy");
    summary(
        &bin()
            .args(["fuse", "--logits", "--a"])
            .arg(&la)
            .arg("--b")
            .arg(&la)
            .arg("--out")
            .arg(&fused)
            .output()
            .unwrap(),
    );
    assert_eq!(load_tensor(&fused).unwrap().shape(), &[2, 2, 1, 3]);

    let u = d.join("u.npy");
    let s = summary(
        &bin()
            .args(["uncertainty", "--belief"])
            .arg(&fused)
            .arg("--out")
            .arg(&u)
            .output()
            .unwrap(),
    );
    let (min, max) = (
        s["stats"]["min"].as_f64().unwrap(),
        s["stats"]["max"].as_f64().unwrap(),
    );
    assert!(0.0 <= min && min <= max && max <= 1.0);
    assert_eq!(load_tensor(&u).unwrap().shape(), &[2, 2, 1]);
}

#[test]
fn mix_then_restore_recovers_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = write(d, "a.npy", &[6, 5, 4], (0..120).map(|v| v as f32).collect());
    let b = write(
        d,
        "b.npy",
        &[6, 5, 4],
        (0..120).map(|v| -(v as f32)).collect(),
    );
    let (ma, mb, mask) = (d.join("ma.npy"), d.join("mb.npy"), d.join("mask.npy"));
    let s = summary(
        &bin()
            .args(["mix", "--zero-size", "3,2,2", "--seed", "4", "--a"])
            .arg(&a)
            .arg("--b")
            .arg(&b)
            .arg("--out-a")
            .arg(&ma)
            .arg("--out-b")
            .arg(&mb)
            .arg("--mask-out")
            .arg(&mask)
            .output()
            .unwrap(),
    );
    assert_eq!(s["stats"]["zero_count"], 12);
    let (dims, values) = load_u8_grid(&mask).unwrap();
    assert_eq!(dims, [6, 5, 4]);
    assert_eq!(values.iter().filter(|&&v| v == 0).count(), 12);

    let (ra, rb) = (d.join("ra.npy"), d.join("rb.npy"));
    summary(
        &bin()
            .args(["restore", "--a"])
            .arg(&ma)
            .arg("--b")
            .arg(&mb)
            .arg("--mask")
            .arg(&mask)
            .arg("--out-a")
            .arg(&ra)
            .arg("--out-b")
            .arg(&rb)
            .output()
            .unwrap(),
    );
    assert_eq!(std::fs::read(&ra).unwrap(), std::fs::read(&a).unwrap());
    assert_eq!(std::fs::read(&rb).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn slice_export_writes_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let v = write(d, "v.npy", &[3, 2, 2], (0..12).map(|v| v as f32).collect());
    let img = d.join("s.pgm");
    let s = summary(
        &bin()
            .args(["slice-export", "--slice", "1", "--input"])
            .arg(&v)
            .arg("--out")
            .arg(&img)
            .output()
            .unwrap(),
    );
    assert_eq!(s["stats"]["width"], 3);
    let bytes = std::fs::read(&img).unwrap();
    let header = b"P5\n3 2\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    // slice z = 1: row y = 0 holds 1, 5, 9 and row y = 1 holds 3, 7, 11
    assert_eq!(&bytes[header.len()..], &[0, 102, 204, 51, 153, 255]);
}

#[test]
fn train_save_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = d.join("model");
    let out = bin()
        .args([
            "train-toy",
            "--set",
            "dims=6",
            "--set",
            "labeled=2",
            "--set",
            "unlabeled=2",
            "--set",
            "test=2",
        ])
        .args([
            "--set",
            "pretrain_epochs=2",
            "--set",
            "selftrain_epochs=1",
            "--seed",
            "3",
            "--out",
        ])
        .arg(&model)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let lines: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["stage"], "pretrain");
    assert_eq!(lines[2]["stage"], "self_train");
    let s = summary(&out);
    assert_eq!(s["inputs"]["settings"]["seed"], 3);
    assert!(s["stats"]["student"]["dice"].is_number());
    assert!(model.join("layer1_weight.npy").exists());

    let e = summary(
        &bin()
            .args(["eval", "--count", "2", "--size", "6", "--model"])
            .arg(&model)
            .output()
            .unwrap(),
    );
    let dice = e["stats"]["dice"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dice));
}

fn code(out: Output) -> i32 {
    assert!(out.stdout.is_empty() || !out.status.success());
    assert!(!out.stderr.is_empty());
    out.status.code().unwrap()
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let u = write(d, "u.npy", &[2, 2, 2], vec![0.1; 8]);
    let w = d.join("w.npy");

    // validation
    assert_eq!(
        code(
            bin()
                .args(["weights", "--epoch", "11", "--epochs", "10", "--u"])
                .arg(&u)
                .arg("--out")
                .arg(&w)
                .output()
                .unwrap()
        ),
        1
    );
    assert_eq!(
        code(
            bin()
                .args(["weights", "--order", "sideways", "--epoch", "1", "--epochs", "2", "--u"])
                .arg(&u)
                .arg("--out")
                .arg(&w)
                .output()
                .unwrap()
        ),
        1
    );
    assert_eq!(code(bin().args(["no-such-command"]).output().unwrap()), 1);
    assert_eq!(
        code(
            bin()
                .args(["train-toy", "--set", "lambda1=-1"])
                .output()
                .unwrap()
        ),
        1
    );

    // i/o and format
    let missing = d.join("missing.npy");
    assert_eq!(
        code(
            bin()
                .args(["weights", "--epoch", "1", "--epochs", "2", "--u"])
                .arg(&missing)
                .arg("--out")
                .arg(&w)
                .output()
                .unwrap()
        ),
        2
    );
    let labels = d.join("labels.npy");
    save_u8_grid([2, 2, 2], &[0; 8], &labels).unwrap();
    assert_eq!(
        code(
            bin()
                .args(["weights", "--epoch", "1", "--epochs", "2", "--u"])
                .arg(&labels)
                .arg("--out")
                .arg(&w)
                .output()
                .unwrap()
        ),
        2
    );

    // numerical: opposite certain beliefs leave no mass to renormalize
    let a = beliefs(d, "a.npy", &[[1.0, 0.0, 0.0]]);
    let b = beliefs(d, "b.npy", &[[0.0, 1.0, 0.0]]);
    let f = d.join("f.npy");
    assert_eq!(
        code(
            bin()
                .args(["fuse", "--a"])
                .arg(&a)
                .arg("--b")
                .arg(&b)
                .arg("--out")
                .arg(&f)
                .output()
                .unwrap()
        ),
        3
    );
}
