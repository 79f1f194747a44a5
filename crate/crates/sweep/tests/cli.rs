use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn coopspin(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coopspin"))
        .args(args)
        .env("COOPSPIN_OUT", out)
        .env_remove("COOPSPIN_WORKERS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_dir(stdout: &[u8]) -> PathBuf {
    PathBuf::from(
        String::from_utf8_lossy(stdout)
            .lines()
            .next()
            .expect("run dir on stdout"),
    )
}

#[test]
fn feedback_sweep_writes_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.toml",
        "[system]\n[feedback]\nxi_grid = [\"0 /s\", \"0.01 /s\", \"0.05 /s\"]\n",
    );
    let out = coopspin(
        &[
            "feedback-sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--workers",
            "2",
        ],
        &tmp.path().join("runs"),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = run_dir(&out.stdout);
    assert!(dir.starts_with(tmp.path().join("runs")));
    for f in ["table.csv", "fits.json", "metadata.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let table = fs::read_to_string(dir.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);

    // offline refit of the written table
    let fit = coopspin(
        &["fit", "inverse", dir.join("table.csv").to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(
        fit.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&fit.stderr)
    );
    let json: serde_json::Value = serde_json::from_slice(&fit.stdout).unwrap();
    assert_eq!(json["model"], "inverse");
    let gamma = json["parameters"][0].as_f64().unwrap();
    assert!((gamma - 1.0 / 31.0).abs() < 0.01 / 31.0, "{gamma}");
}

#[test]
fn json_format_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.toml",
        "[system]\n[feedback]\nxi_grid = [0.0, 0.1]\n",
    );
    let out = coopspin(
        &[
            "feedback-sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--format",
            "json",
            "--out",
            tmp.path().join("o").to_str().unwrap(),
        ],
        &tmp.path().join("ignored"),
    );
    assert_eq!(out.status.code(), Some(0));
    let dir = run_dir(&out.stdout);
    assert!(
        dir.starts_with(tmp.path().join("o")),
        "--out beats the environment"
    );
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("table.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
}

#[test]
fn config_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "[system]\nt2_intrinsic = -3\n");
    let out = coopspin(&["decay", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("system.t2_intrinsic"));

    let cfg = write(tmp.path(), "typo.toml", "[system]\n[feedbak]\nxi = 0.1\n");
    let out = coopspin(&["decay", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("feedbak"));

    let cfg = write(
        tmp.path(),
        "noisy.toml",
        "[system]\n[noise]\nmagnetic = \"3 fT/rtHz\"\n",
    );
    let out = coopspin(
        &["sensitivity", "--config", cfg.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn numerical_failures_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = write(tmp.path(), "short.csv", "swept,eta\n0.1,5\n0.2,6\n");
    let out = coopspin(&["fit", "lorentzian", csv.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn decay_writes_its_timeseries() {
    let tmp = tempfile::tempdir().unwrap();
    let out = coopspin(&["decay"], &tmp.path().join("runs"));
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = run_dir(&out.stdout);
    let ts = dir.join("timeseries.csv");
    assert!(fs::read_to_string(&ts)
        .unwrap()
        .starts_with("t,px,py,pz,signal\n"));
    let fit = coopspin(&["fit", "decay", ts.to_str().unwrap()], tmp.path());
    assert_eq!(fit.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_slice(&fit.stdout).unwrap();
    let names: Vec<&str> = json["names"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let tau = json["parameters"][names.iter().position(|n| *n == "tau").unwrap()]
        .as_f64()
        .unwrap();
    assert!((tau - 31.0).abs() < 0.31, "{tau}");
}
