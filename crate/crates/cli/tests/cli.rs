//! End-to-end checks of the command-line surface: exit codes, CSV outputs,
//! the run manifest, determinism under a fixed seed, and config-file
//! handling.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jsq-lab"))
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("missing {name}: {e}"))
}

fn temp_dir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("jsq-lab-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn ruin_subcommand_prints_closed_form() {
    let out = temp_dir("ruin");
    let status = bin()
        .args(["--out"])
        .arg(&out)
        .args([
            "ruin", "--p", "0.6", "--q", "0.4", "--z", "1", "--a", "2", "--s", "0.5",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let csv = read(&out, "ruin.csv");
    let line = csv
        .lines()
        .find(|l| l.starts_with("ruin_probability"))
        .unwrap();
    let value: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
    assert!((value - 0.4).abs() < 1e-12);
    let manifest = read(&out, "manifest.txt");
    assert!(manifest.contains("file=ruin.csv"));
    assert!(manifest.contains("fnv1a="));
}

#[test]
fn outputs_are_deterministic_for_fixed_seed() {
    let out1 = temp_dir("det1");
    let out2 = temp_dir("det2");
    for out in [&out1, &out2] {
        let status = bin()
            .args(["--out"])
            .arg(out)
            .args([
                "couple", "--n", "4", "--b", "1", "--beta", "1.0", "--reps", "200", "--seed", "9",
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(read(&out1, "coupling.csv"), read(&out2, "coupling.csv"));
}

#[test]
fn spline_check_passes() {
    let out = temp_dir("spline");
    let status = bin()
        .args(["--out"])
        .arg(&out)
        .arg("spline-check")
        .status()
        .unwrap();
    assert!(status.success());
    let csv = read(&out, "spline_check.csv");
    assert!(csv.contains("weights_sum_to_one,pass"));
    assert!(!csv.contains("FAIL"));
}

#[test]
fn invalid_parameters_fail_with_nonzero_exit() {
    let out = temp_dir("invalid");
    let output = bin()
        .args(["--out"])
        .arg(&out)
        .args(["solve", "--n", "4", "--b", "1", "--beta", "2.0"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("beta"), "stderr: {stderr}");
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let out = temp_dir("config");
    let config_path = out.join("lab.conf");
    std::fs::write(&config_path, "[model]\nn = 3\nb = 1\nbeta = 0.5\n").unwrap();
    let status = bin()
        .args(["--out"])
        .arg(&out)
        .args(["--config"])
        .arg(&config_path)
        .args(["solve"])
        .status()
        .unwrap();
    assert!(status.success());
    let csv = read(&out, "stationary.csv");
    // n = 3, b = 1 enumerates 10 states plus the header row.
    assert_eq!(csv.lines().count(), 11);

    // A flag overrides the file value.
    let status = bin()
        .args(["--out"])
        .arg(&out)
        .args(["--config"])
        .arg(&config_path)
        .args(["solve", "--n", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    let csv = read(&out, "stationary.csv");
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn malformed_config_reports_line() {
    let out = temp_dir("badconfig");
    let config_path = out.join("bad.conf");
    std::fs::write(&config_path, "n = 3\nnot a pair\n").unwrap();
    let output = bin()
        .args(["--out"])
        .arg(&out)
        .args(["--config"])
        .arg(&config_path)
        .args(["solve", "--n", "2"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("line 2"), "stderr: {stderr}");
}

#[test]
fn lyapunov_subcommand_runs_feasible_instance() {
    let out = temp_dir("lyap");
    let status = bin()
        .args(["--out"])
        .arg(&out)
        .args([
            "lyapunov",
            "--n",
            "400",
            "--b",
            "1",
            "--beta",
            "4.0",
            "--samples",
            "6",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let csv = read(&out, "lyapunov.csv");
    assert!(csv.starts_with("q1,q2,gxv,bound_rhs,margin"));
    assert!(csv.lines().count() > 1);
}
