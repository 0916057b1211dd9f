//! End-to-end behaviour of the `sgl` binary: exit codes, fetch checks, and a
//! miniature sweep → aggregate → plot pipeline on synthetic IDX files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sgl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgl")).args(args).env_remove("SGL_DATA_DIR").output().expect("spawn sgl")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Canonically sized IDX files with pseudo-random pixels and labels.
fn write_synthetic_mnist(dir: &Path) {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    for (prefix, n) in [("train", 60_000u32), ("t10k", 10_000)] {
        let mut img = Vec::with_capacity(16 + n as usize * 784);
        for v in [0x803u32, n, 28, 28] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        let mut lab = Vec::with_capacity(8 + n as usize);
        lab.extend_from_slice(&0x801u32.to_be_bytes());
        lab.extend_from_slice(&n.to_be_bytes());
        for _ in 0..n {
            let label = (next() % 10) as u8;
            lab.push(label);
            // Class-dependent bright band so the teacher has something to learn.
            for p in 0..784usize {
                let band = p / 78 == label as usize;
                img.push(if band { 200 + (next() % 56) as u8 } else { (next() % 64) as u8 });
            }
        }
        fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
    }
}

#[test]
fn usage_errors_exit_1() {
    let o = sgl(&["run", "--mode", "bogus"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert_eq!(code(&sgl(&["frobnicate"])), 1);
    let o = sgl(&["run", "--mode", "control", "--audit-estimator", "mb:0"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = sgl(&["sweep", "--seeds", "1,1"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert_eq!(code(&sgl(&["--help"])), 0);
}

#[test]
fn fetch_offline_without_files_is_setup_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let o = sgl(&["fetch", "--data-dir", dir, "--mirror", "http://127.0.0.1:9/"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn aggregate_and_plot_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(code(&sgl(&["aggregate", "--out", out])), 2);
    fs::write(tmp.path().join("aggregate-control.csv"), "step,n,kl_mean,kl_sd\r\n").unwrap();
    let o = sgl(&["plot", "--out", out]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("plot error"), "{}", stderr(&o));
}

#[test]
fn synthetic_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    write_synthetic_mnist(&data);
    let data_s = data.to_str().unwrap();

    // Pre-placed valid files: fetch is a no-op.
    let o = sgl(&["fetch", "--data-dir", data_s, "--mirror", "http://127.0.0.1:9/"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("60000 train / 10000 test"));

    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();
    let small = ["--epochs", "1", "--batch-size", "8192", "--audit-estimator", "mb:1"];
    let sweep = |extra: &[&str]| {
        let mut args = vec!["sweep", "--modes", "control,projection", "--seeds", "0..3", "--workers", "2"];
        args.extend_from_slice(&small);
        args.extend_from_slice(&["--data-dir", data_s, "--out", out_s]);
        args.extend_from_slice(extra);
        sgl(&args)
    };
    let o = sweep(&[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run_dirs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains("-seed"))
        .collect();
    assert_eq!(run_dirs.len(), 6, "{run_dirs:?}");
    for d in &run_dirs {
        for f in ["steps.csv", "summary.txt", "teacher.ckpt", "base.ckpt"] {
            assert!(out.join(d).join(f).is_file(), "{d}/{f}");
        }
    }
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 7);
    assert!(manifest.lines().nth(1).unwrap().starts_with("control-seed0,control,0,ok"));
    // 60,000 noise images at batch 8192 → 8 steps, logged every 10 → steps 1.
    let proj_steps = fs::read_to_string(out.join("projection-seed1/steps.csv")).unwrap();
    assert_eq!(proj_steps.lines().count(), 2);
    let ctrl_steps = fs::read_to_string(out.join("control-seed1/steps.csv")).unwrap();
    assert_eq!(ctrl_steps.lines().count(), 9);

    // Resume skips every finished run and leaves bytes untouched.
    let before = fs::read(out.join("control-seed2/steps.csv")).unwrap();
    let mtime = fs::metadata(out.join("control-seed2/summary.txt")).unwrap().modified().unwrap();
    let o = sweep(&["--resume"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stderr(&o).matches("already complete").count(), 6, "{}", stderr(&o));
    assert_eq!(fs::read(out.join("control-seed2/steps.csv")).unwrap(), before);
    assert_eq!(fs::metadata(out.join("control-seed2/summary.txt")).unwrap().modified().unwrap(), mtime);
    assert_eq!(fs::read_to_string(out.join("manifest.csv")).unwrap(), manifest);

    // A single run reproduces the sweep's bytes.
    let solo = tmp.path().join("solo");
    let mut args = vec!["run", "--mode", "control", "--seed", "2"];
    args.extend_from_slice(&small);
    args.extend_from_slice(&["--data-dir", data_s, "--out", solo.to_str().unwrap()]);
    let o = sgl(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(solo.join("control-seed2/steps.csv")).unwrap(), before);

    let o = sgl(&["aggregate", "--out", out_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("aggregate-control.csv").is_file() && out.join("aggregate-projection.csv").is_file());
    assert!(!out.join("aggregate-liminal.csv").exists());
    let o = sgl(&["plot", "--out", out_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fig1 = fs::read(out.join("fig1.svg")).unwrap();
    assert!(out.join("fig2a.svg").is_file() && !out.join("fig2b.svg").exists());
    sgl(&["plot", "--out", out_s]);
    assert_eq!(fs::read(out.join("fig1.svg")).unwrap(), fig1);

    // Truncating an input file turns fetch into an integrity error naming it.
    let victim = data.join("t10k-labels-idx1-ubyte");
    fs::write(&victim, [0u8; 10]).unwrap();
    let o = sgl(&["fetch", "--data-dir", data_s, "--mirror", "http://127.0.0.1:9/"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("t10k-labels-idx1-ubyte"), "{}", stderr(&o));
}
