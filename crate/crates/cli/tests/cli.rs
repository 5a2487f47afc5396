//! End-to-end behaviors of the `nscl` binary: artifact schemas, file-based
//! task streams, exit codes, and the output-root override.

use std::path::Path;
use std::process::{Command, Output};

use nscl_cli::dataset::save_raw;
use nscl_core::linalg::Matrix;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_nscl")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().unwrap()
}

fn small_config() -> &'static str {
    "seed = 9\nepochs = 3\nsynth.tasks = 2\nsynth.train_per_class = 20\nsynth.test_per_class = 5\n"
}

fn relative_files(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn both_modes_emit_the_same_artifact_schema() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), small_config()).unwrap();
    for (mode, out) in [("nscl", "a"), ("plain-adam", "b")] {
        let output = run_in(
            dir.path(),
            &["run", "--config", "cfg.txt", "--set", &format!("mode={mode}"), "--set", &format!("out_dir={out}")],
        );
        assert!(output.status.success(), "{mode}: {}", String::from_utf8_lossy(&output.stderr));
    }
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(relative_files(&a), relative_files(&b), "file sets differ");
    for f in relative_files(&a) {
        if !f.ends_with(".csv") {
            continue;
        }
        let header_a = std::fs::read_to_string(a.join(&f)).unwrap().lines().next().unwrap().to_string();
        let header_b = std::fs::read_to_string(b.join(&f)).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header_a, header_b, "schema of {f} differs between modes");
    }
}

#[test]
fn file_based_tasks_run_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    // Two linearly separable blobs per task, CSV format.
    for t in 0..2 {
        let mut train = String::new();
        let mut test = String::new();
        for i in 0..12 {
            let (cls, sign) = (i % 2, if i % 2 == 0 { 1.0 } else { -1.0 });
            let x = sign * (2.0 + 0.05 * (i as f64)) + t as f64;
            let row = format!("{x},{},{}\n", -x * 0.5, cls + 5);
            if i < 8 {
                train.push_str(&row);
            } else {
                test.push_str(&row);
            }
        }
        std::fs::write(dir.path().join(format!("t{t}_train.csv")), &train).unwrap();
        std::fs::write(dir.path().join(format!("t{t}_test.csv")), &test).unwrap();
    }
    let cfg = "seed = 3\nepochs = 3\nbatch_size = 4\narch = dense:8,relu\ntasks = files\nformat = csv\n\
               task.0.train = t0_train.csv\ntask.0.test = t0_test.csv\n\
               task.1.train = t1_train.csv\ntask.1.test = t1_test.csv\nout_dir = csv_out\n";
    std::fs::write(dir.path().join("cfg.txt"), cfg).unwrap();
    let output = run_in(dir.path(), &["run", "--config", "cfg.txt"]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));

    // Same stream in raw-f32.
    for t in 0..2 {
        let features = Matrix::from_rows(&[
            &[1.0 + t as f64, -0.5],
            &[-1.0, 0.5],
            &[2.0, -1.0],
            &[-2.0, 1.0],
        ]);
        let labels = [0usize, 1, 0, 1];
        save_raw(&dir.path().join(format!("t{t}.train.nsf")), &features, &labels, 2).unwrap();
        save_raw(&dir.path().join(format!("t{t}.test.nsf")), &features, &labels, 2).unwrap();
    }
    let cfg = "seed = 3\nepochs = 2\nbatch_size = 2\narch = dense:4,relu\ntasks = files\nformat = raw-f32\n\
               task.0.train = t0.train.nsf\ntask.0.test = t0.test.nsf\n\
               task.1.train = t1.train.nsf\ntask.1.test = t1.test.nsf\nout_dir = raw_out\n";
    std::fs::write(dir.path().join("cfg2.txt"), cfg).unwrap();
    let output = run_in(dir.path(), &["run", "--config", "cfg2.txt"]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn malformed_csv_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "1.0,oops,0\n").unwrap();
    std::fs::write(dir.path().join("ok.csv"), "1.0,2.0,0\n0.5,0.1,1\n").unwrap();
    let cfg = "seed = 1\ntasks = files\ntask.0.train = bad.csv\ntask.0.test = ok.csv\n";
    std::fs::write(dir.path().join("cfg.txt"), cfg).unwrap();
    let output = run_in(dir.path(), &["run", "--config", "cfg.txt"]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("kind=data"), "{stderr}");
    assert!(stderr.contains("line 1"), "{stderr}");
}

#[test]
fn config_error_exits_1_before_any_training() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), format!("{}a = 0.5\n", small_config())).unwrap();
    let output = run_in(dir.path(), &["run", "--config", "cfg.txt", "--set", "out_dir=never"]);
    assert_eq!(output.status.code(), Some(1));
    assert!(!dir.path().join("never").exists(), "config error must precede artifacts");
}

#[test]
fn unknown_verify_suite_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_in(dir.path(), &["verify", "bogus"]);
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn verify_projector_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_in(dir.path(), &["verify", "projector"]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("all checks passed"), "{stdout}");
}

#[test]
fn spectra_needs_a_valid_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_in(dir.path(), &["spectra", "--checkpoint", "missing.ckpt"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn spectra_reads_a_run_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), small_config()).unwrap();
    let output = run_in(dir.path(), &["run", "--config", "cfg.txt", "--set", "out_dir=r"]);
    assert!(output.status.success());
    let output = run_in(
        dir.path(),
        &["spectra", "--checkpoint", "r/covariance.ckpt", "--a", "5", "--out-dir", "sp"],
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(dir.path().join("sp/summary.csv").exists());
    assert!(dir.path().join("sp/layer_0.csv").exists());
}

#[test]
fn out_root_env_var_reroots_relative_output() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("artifacts_root");
    std::fs::write(dir.path().join("cfg.txt"), small_config()).unwrap();
    let output = Command::new(bin())
        .current_dir(dir.path())
        .env("NSCL_OUT_ROOT", &root)
        .args(["run", "--config", "cfg.txt", "--set", "out_dir=exp1"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(root.join("exp1/metrics.csv").exists());
    assert!(!dir.path().join("exp1").exists());
}
