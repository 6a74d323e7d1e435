//! End-to-end runs of the `driftmap` binary.

use std::path::Path;
use std::process::{Command, Output};

use driftmap_core::train::preset;
use tempfile::TempDir;

fn driftmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftmap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn train_generator(dir: &TempDir) -> String {
    let run = path(dir, "run");
    let out = driftmap(&[
        "train",
        "--preset",
        "two-moons-gen",
        "--steps",
        "10",
        "--out",
        &run,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    run
}

#[test]
fn train_writes_run_directory() {
    let dir = TempDir::new().unwrap();
    let run = train_generator(&dir);
    for f in ["checkpoint.json", "runlog.jsonl", "metrics.json"] {
        assert!(Path::new(&run).join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(Path::new(&run).join("runlog.jsonl")).unwrap();
    assert!(log.lines().count() >= 1);
}

#[test]
fn missing_config_fails() {
    let dir = TempDir::new().unwrap();
    let out = driftmap(&[
        "train",
        "--config",
        &path(&dir, "absent.json"),
        "--out",
        &path(&dir, "run"),
    ]);
    assert_ne!(code(&out), 0);
}

#[test]
fn unknown_config_key_names_the_key() {
    let dir = TempDir::new().unwrap();
    let mut value: serde_json::Value =
        serde_json::from_str(&preset("two-moons-gen").unwrap().to_json()).unwrap();
    value["learning_rate_typo"] = serde_json::json!(0.1);
    let cfg = path(&dir, "cfg.json");
    std::fs::write(&cfg, value.to_string()).unwrap();
    let out = driftmap(&["train", "--config", &cfg, "--out", &path(&dir, "run")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate_typo"));
}

#[test]
fn sample_is_reproducible_and_handles_zero() {
    let dir = TempDir::new().unwrap();
    let ck = Path::new(&train_generator(&dir)).join("checkpoint.json");
    let ck = ck.to_str().unwrap();
    let (a, b, empty) = (
        path(&dir, "a.csv"),
        path(&dir, "b.csv"),
        path(&dir, "empty.csv"),
    );
    for target in [&a, &b] {
        assert_eq!(
            code(&driftmap(&[
                "sample",
                "--checkpoint",
                ck,
                "--n",
                "64",
                "--seed",
                "9",
                "--out",
                target
            ])),
            0
        );
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 65);
    assert_eq!(
        code(&driftmap(&[
            "sample",
            "--checkpoint",
            ck,
            "--n",
            "0",
            "--out",
            &empty
        ])),
        0
    );
    assert_eq!(std::fs::read_to_string(&empty).unwrap().trim(), "x,y");
}

#[test]
fn density_exports_grid_and_report() {
    let dir = TempDir::new().unwrap();
    let run = path(&dir, "lik");
    let out = driftmap(&[
        "train",
        "--preset",
        "mixture-likelihood",
        "--steps",
        "5",
        "--out",
        &run,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ck = Path::new(&run).join("checkpoint.json");
    let grid = path(&dir, "grid.csv");
    let out = driftmap(&[
        "--json",
        "density",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--res",
        "20",
        "--analytic",
        "--out",
        &grid,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["n"], 400);
    assert!(report["estimate"].as_f64().unwrap().is_finite());
    let text = std::fs::read_to_string(&grid).unwrap();
    assert!(text.starts_with("x,y,logp,logp_ref"));
    assert_eq!(text.lines().count(), 401);

    let gen = train_generator(&dir);
    let wrong = Path::new(&gen).join("checkpoint.json");
    assert_eq!(
        code(&driftmap(&[
            "density",
            "--checkpoint",
            wrong.to_str().unwrap(),
            "--out",
            &grid
        ])),
        2
    );
}

#[test]
fn verify_exit_codes_follow_the_checks() {
    let out = driftmap(&["--json", "verify", "--only", "divergence"]);
    assert_eq!(code(&out), 0);
    let checks: Vec<serde_json::Value> = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(!checks.is_empty() && checks.iter().all(|c| c["pass"] == true));

    let out = driftmap(&[
        "verify",
        "--only",
        "divergence",
        "--divergence-tol",
        "1e-12",
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn default_verify_reports_match_exit_code() {
    let dir = TempDir::new().unwrap();
    let report = path(&dir, "verify.json");
    let out = driftmap(&["verify", "--out", &report]);
    let checks: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let all_pass = checks.iter().all(|c| c["pass"] == true);
    assert_eq!(code(&out), if all_pass { 0 } else { 4 });
}

#[test]
fn export_and_presets() {
    let dir = TempDir::new().unwrap();
    let csv = path(&dir, "moons.csv");
    assert_eq!(
        code(&driftmap(&[
            "data",
            "export",
            "--kind",
            "two_moons",
            "--n",
            "10",
            "--out",
            &csv
        ])),
        0
    );
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 11);
    let out = driftmap(&["presets"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).lines().any(|l| l.trim() == "two-moons-gen"));
}
