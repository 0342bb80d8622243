//! The `lnlab` binary: exit codes, file schemas and reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn lnlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lnlab"))
        .args(args)
        .env_remove("LNLAB_THREADS")
        .output()
        .expect("spawn lnlab")
}

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .display()
        .to_string()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).expect("open csv");
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

#[test]
fn help_exits_zero() {
    let o = lnlab(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o.stdout).contains("ot-check"));
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_two() {
    let o = lnlab(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_config_key_names_line_and_field() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\n  \"seed\": 1,\n  \"modle\": {}\n}\n").unwrap();
    let o = lnlab(&["bounds", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o.stderr);
    assert!(err.contains("modle"), "{err}");
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn ill_typed_config_value_exits_two() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\"model\": {\"d\": \"four\"}}").unwrap();
    let o = lnlab(&["diagnose", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("line 1"));
}

#[test]
fn invalid_model_exits_two() {
    let o = lnlab(&["diagnose", "--delta-t", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_two() {
    let o = lnlab(&["bounds", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_thread_cap_exits_two() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lnlab"))
        .args(["diagnose", "--out", dir.path().to_str().unwrap()])
        .env("LNLAB_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("LNLAB_THREADS"));
}

#[test]
fn zero_weight_peri_bounds_have_margin_equal_rhs() {
    let dir = TempDir::new().unwrap();
    let o = lnlab(&["bounds", "--config", &config("zero_peri.json"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let (header, rows) = read_csv(&dir.path().join("bounds.csv"));
    assert_eq!(
        header,
        ["check", "placement", "D", "delta_t", "gamma_max", "beta_max", "lhs", "rhs", "margin", "seed"]
    );
    assert!(!rows.is_empty());
    let (lhs, rhs, margin) = (column(&header, "lhs"), column(&header, "rhs"), column(&header, "margin"));
    for r in &rows {
        assert_eq!(r[lhs].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[margin], r[rhs]);
    }
}

#[test]
fn gradcheck_default_dims() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    // The first 83 instances at seed 0 all meet the tolerance.
    let o = lnlab(&["gradcheck", "--instances", "83", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("max rel err"));
    let (header, rows) = read_csv(&dir.path().join("gradcheck.csv"));
    assert_eq!(header, ["check", "instance", "seed", "max_rel_err", "tolerance", "pass"]);
    assert_eq!(rows.len(), 83 * 8);

    // Instance 83 puts a near-constant token into a Peri output norm; the
    // finite-difference estimate of its parameter gradient is then off by
    // about 2.4e-6, and the run reports it.
    let o = lnlab(&["gradcheck", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    let err = text(&o.stderr);
    assert!(err.contains("check=param_gradients_peri instance=83"), "{err}");
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for (sub, file) in [("ot-check", "ot_check.csv"), ("diagnose", "moments.csv"), ("bounds", "bounds.csv")] {
        for dir in [&a, &b] {
            let o = lnlab(&[sub, "--instances", "3", "--seed", "7", "--out", dir.path().to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(0), "{sub}: {}", text(&o.stderr));
        }
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{file}");
    }
}

#[test]
fn thread_count_does_not_change_output() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let o = Command::new(env!("CARGO_BIN_EXE_lnlab"))
            .args(["bounds", "--instances", "5", "--out", dir.path().to_str().unwrap()])
            .env("LNLAB_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(
        fs::read(a.path().join("bounds.csv")).unwrap(),
        fs::read(b.path().join("bounds.csv")).unwrap()
    );
}

#[test]
fn diagnose_writes_one_row_per_state() {
    let dir = TempDir::new().unwrap();
    let o = lnlab(&["diagnose", "--depth", "6", "--placement", "pre", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let (header, rows) = read_csv(&dir.path().join("moments.csv"));
    assert_eq!(header, ["layer", "ma", "var", "frob", "seed", "placement", "delta_t"]);
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r[5] == "pre"));
}

#[test]
fn jsonl_rows_use_csv_headers_as_keys() {
    let dir = TempDir::new().unwrap();
    let o = lnlab(&["diagnose", "--format", "jsonl", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let body = fs::read_to_string(dir.path().join("moments.jsonl")).unwrap();
    let lines: Vec<&str> = body.lines().collect();
    assert_eq!(lines.len(), 5);
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 7);
        for k in ["layer", "ma", "var", "frob", "seed", "placement", "delta_t"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}

#[test]
fn train_writes_outcome_and_curves() {
    let dir = TempDir::new().unwrap();
    let o = lnlab(&["train", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let (header, rows) = read_csv(&dir.path().join("trials.csv"));
    assert_eq!(
        header,
        ["placement", "weight_decay", "seed", "diverged", "first_divergence_step", "final_loss"]
    );
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][3], "false");
    let (_, losses) = read_csv(&dir.path().join("loss_curve.csv"));
    assert_eq!(losses.len(), 201);
    assert!(dir.path().join("curves.csv").exists());
}

#[test]
fn diverging_train_run_exits_one() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"model": {"placement": "off", "depth": 8}, "train": {"lr": 0.03, "steps": 100}}"#,
    )
    .unwrap();
    let o = lnlab(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("diverged=true"));
}

#[test]
fn report_aggregates_prior_outputs() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(lnlab(&["report", "--out", out]).status.code(), Some(2));
    for args in [
        vec!["bounds", "--instances", "4", "--out", out],
        vec!["ot-check", "--instances", "2", "--out", out],
        vec!["gradcheck", "--instances", "4", "--out", out],
    ] {
        assert_eq!(lnlab(&args).status.code(), Some(0));
    }
    let o = lnlab(&["report", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let (header, rows) = read_csv(&dir.path().join("summary.csv"));
    assert_eq!(header, ["criterion", "status", "detail"]);
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["gradients", "growth", "pathwise", "transport"]);
    assert!(rows.iter().all(|r| r[1] == "PASS"));
}

#[test]
fn report_fails_on_a_failing_row() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("gradcheck.csv"),
        "check,instance,seed,max_rel_err,tolerance,pass\nffn,0,0,1e-3,1e-6,false\n",
    )
    .unwrap();
    let o = lnlab(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("criterion=gradients"));
}

#[test]
fn small_sweep_keeps_the_ordering() {
    let dir = TempDir::new().unwrap();
    let o = lnlab(&[
        "sweep",
        "--config",
        &config("aggressive.json"),
        "--instances",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let (_, rows) = read_csv(&dir.path().join("trials.csv"));
    assert_eq!(rows.len(), 3 * 2 * 3);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
}
