//! End-to-end command tests against the built binary. Everything runs at
//! miniature scale so the whole file stays fast.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_injection"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("inj-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn ok(output: &Output) {
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        "image_size=16\nbase_width=4\ndepth=2\nlatent_dim=4\nbatch_size=4\n\
         epochs_constant=1000\nepochs_decay=0\nseed=5\n",
    )
    .unwrap();
    path
}

fn make_toy(dir: &Path, per_domain: usize, size: usize) {
    ok(&bin()
        .args([
            "make-toy",
            "--out",
            dir.to_str().unwrap(),
            "--domains",
            "2",
            "--per-domain",
            &per_domain.to_string(),
            "--size",
            &size.to_string(),
            "--seed",
            "3",
        ])
        .output()
        .unwrap());
}

#[test]
fn make_toy_writes_expected_layout() {
    let dir = tmp("maketoy");
    let data = dir.join("data");
    ok(&bin()
        .args([
            "make-toy",
            "--out",
            data.to_str().unwrap(),
            "--domains",
            "2",
            "--per-domain",
            "5",
            "--size",
            "16",
        ])
        .output()
        .unwrap());
    let mut subdirs: Vec<_> = fs::read_dir(&data)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    assert_eq!(subdirs.len(), 2);
    for sub in &subdirs {
        assert_eq!(fs::read_dir(sub).unwrap().count(), 5);
    }
    assert!(data.join("manifest.txt").exists());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn make_toy_is_deterministic_per_seed() {
    let dir = tmp("maketoy-det");
    let (a, b) = (dir.join("a"), dir.join("b"));
    make_toy(&a, 3, 16);
    make_toy(&b, 3, 16);
    assert_eq!(
        fs::read(a.join("manifest.txt")).unwrap(),
        fs::read(b.join("manifest.txt")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("domain00/img0000.png")).unwrap(),
        fs::read(b.join("domain00/img0000.png")).unwrap()
    );
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn make_toy_rejects_single_domain() {
    let dir = tmp("maketoy-one");
    let output = bin()
        .args([
            "make-toy",
            "--out",
            dir.join("d").to_str().unwrap(),
            "--domains",
            "1",
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn unknown_flags_are_rejected() {
    let output = bin().args(["make-toy", "--bogus-flag", "1"]).output().unwrap();
    assert!(!output.status.success());
}

#[test]
fn train_runs_and_checkpoints() {
    let dir = tmp("train");
    let data = dir.join("data");
    make_toy(&data, 4, 16);
    let cfg = write_tiny_config(&dir);
    let out = dir.join("run");
    let output = bin()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--steps",
            "4",
        ])
        .output()
        .unwrap();
    ok(&output);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("# injection train"), "{stdout}");
    assert!(stdout.contains("# image_size=16"), "{stdout}");
    assert!(out.join("checkpoint-last.bin").exists());
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step=0,epoch=0,phase=g,adv_d="));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn train_missing_data_dir_names_path() {
    let dir = tmp("train-missing");
    let cfg = write_tiny_config(&dir);
    let output = bin()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            dir.join("nope").to_str().unwrap(),
            "--out",
            dir.join("run").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("nope"), "{stderr}");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn resume_continuation_matches_uninterrupted() {
    let dir = tmp("resume");
    let data = dir.join("data");
    make_toy(&data, 4, 16);
    let cfg = write_tiny_config(&dir);
    let full = dir.join("full");
    let part = dir.join("part");
    let run = |out: &Path, steps: &str, resume: Option<&Path>| {
        let mut cmd = bin();
        cmd.args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--steps",
            steps,
        ]);
        if let Some(r) = resume {
            cmd.args(["--resume", r.to_str().unwrap()]);
        }
        ok(&cmd.output().unwrap());
    };
    run(&full, "8", None);
    run(&part, "4", None);
    run(&part, "8", Some(&part.join("checkpoint-last.bin")));
    let full_log = fs::read_to_string(full.join("train.log")).unwrap();
    let part_log = fs::read_to_string(part.join("train.log")).unwrap();
    assert_eq!(full_log, part_log);
    assert_eq!(
        fs::read(full.join("checkpoint-last.bin")).unwrap(),
        fs::read(part.join("checkpoint-last.bin")).unwrap()
    );
    fs::remove_dir_all(&dir).unwrap();
}

fn train_tiny(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    make_toy(&data, 4, 16);
    let cfg = write_tiny_config(dir);
    let out = dir.join("run");
    ok(&bin()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--steps",
            "4",
        ])
        .output()
        .unwrap());
    (data, out.join("checkpoint-last.bin"))
}

#[test]
fn sample_grid_shape_and_determinism() {
    let dir = tmp("sample");
    let (data, ckpt) = train_tiny(&dir);
    let out = dir.join("grids");
    let input = data.join("domain00/img0000.png");
    let run = |out: &Path| {
        ok(&bin()
            .args([
                "sample",
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--input",
                input.to_str().unwrap(),
                "--target-domain",
                "1",
                "--variants",
                "7",
                "--out",
                out.to_str().unwrap(),
                "--seed",
                "9",
            ])
            .output()
            .unwrap());
    };
    run(&out);
    let grid_path = out.join("sample-d1-seed9.png");
    let grid = image::open(&grid_path).unwrap();
    // One input row: input column plus 7 variants at 16px.
    assert_eq!((grid.width(), grid.height()), (8 * 16, 16));
    let first = fs::read(&grid_path).unwrap();
    let out2 = dir.join("grids2");
    run(&out2);
    assert_eq!(first, fs::read(out2.join("sample-d1-seed9.png")).unwrap());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sample_rejects_out_of_range_domain() {
    let dir = tmp("sample-range");
    let (data, ckpt) = train_tiny(&dir);
    let output = bin()
        .args([
            "sample",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--input",
            data.join("domain00/img0000.png").to_str().unwrap(),
            "--target-domain",
            "2",
            "--out",
            dir.join("g").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("out of range"), "{stderr}");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn evaluate_writes_k_squared_rows() {
    let dir = tmp("evaluate");
    let (data, ckpt) = train_tiny(&dir);
    let out = dir.join("eval");
    let output = bin()
        .args([
            "evaluate",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--n",
            "4",
            "--pairs",
            "1900",
            "--seed",
            "2",
        ])
        .output()
        .unwrap();
    ok(&output);
    let csv = fs::read_to_string(out.join("evaluation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5, "{csv}");
    assert_eq!(lines[0], "source,target,fid,diversity");
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        assert!(cells[2].parse::<f64>().unwrap().is_finite());
        assert!(cells[3].parse::<f64>().unwrap().is_finite());
    }
    // pairs setting is recorded in the append-only report
    let report = fs::read_to_string(out.join("metric-report.csv")).unwrap();
    assert!(report.lines().count() == 5);
    assert!(report.lines().nth(1).unwrap().contains(",1900,"), "{report}");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn evaluate_rejects_oversized_n_without_replacement() {
    let dir = tmp("evaluate-n");
    let (data, ckpt) = train_tiny(&dir);
    let output = bin()
        .args([
            "evaluate",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.join("eval").to_str().unwrap(),
            "--n",
            "64",
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("--with-replacement"), "{stderr}");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn ablate_emits_six_deterministic_rows() {
    let dir = tmp("ablate");
    let data = dir.join("data");
    make_toy(&data, 4, 16);
    let cfg = write_tiny_config(&dir);
    let run = |out: &Path| {
        ok(&bin()
            .args([
                "ablate",
                "--config",
                cfg.to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--steps",
                "2",
                "--seed",
                "4",
            ])
            .output()
            .unwrap());
    };
    let out1 = dir.join("a");
    run(&out1);
    let csv = fs::read_to_string(out1.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7, "{csv}");
    assert_eq!(lines[0], "backbone,lambda_latent,fid,diversity");
    assert!(lines[1].starts_with("unet,0.5,"));
    assert!(lines[6].starts_with("resnet,10,"));
    let out2 = dir.join("b");
    run(&out2);
    assert_eq!(csv, fs::read_to_string(out2.join("ablation.csv")).unwrap());
    fs::remove_dir_all(&dir).unwrap();
}
