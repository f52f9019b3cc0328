use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// The bundled Merton config shrunk to test size.
fn small_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let text = std::fs::read_to_string(bundled("merton.json")).unwrap();
    let mut cfg: Value = serde_json::from_str(&text).unwrap();
    cfg["grid"]["n_radial"] = 30.into();
    cfg["grid"]["n_angular"] = 21.into();
    cfg["solver"]["dt"] = 0.05.into();
    cfg["simulation"]["n_paths"] = 300.into();
    cfg["simulation"]["dt"] = 0.01.into();
    cfg["simulation"]["horizon"] = 5.0.into();
    cfg["refine"]["levels"] = 2.into();
    edit(&mut cfg);
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conehjb"))
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env_remove("CONEHJB_THREADS")
        .output()
        .unwrap()
}

fn ok(output: &Output) -> Value {
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    serde_json::from_slice(&output.stdout).unwrap()
}

fn error_json(output: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&output.stderr);
    let line = stderr.lines().find(|l| l.starts_with("{\"error\"")).expect("error JSON on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn missing_beta_names_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |c| {
        c["utility"].as_object_mut().unwrap().remove("beta");
    });
    let out = run(&cfg, &dir.path().join("out"), &["solve"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"]["field"], "utility.beta");
    assert!(!dir.path().join("out/field.csv").exists());
}

#[test]
fn nonpositive_beta_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |c| c["utility"]["beta"] = 0.0.into());
    let out = run(&cfg, &dir.path().join("out"), &["solve"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "validation");
    assert_eq!(err["error"]["field"], "utility.beta");
}

#[test]
fn unknown_and_missing_schema_fields_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |c| c["grid"]["radius"] = 1.0.into());
    let out = run(&cfg, &dir.path().join("out"), &["solve"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "parse");

    let cfg = small_config(dir.path(), |c| {
        c.as_object_mut().unwrap().remove("schema_version");
    });
    let out = run(&cfg, &dir.path().join("out"), &["solve"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["field"], "schema_version");
}

#[test]
fn bundled_configs_validate() {
    for name in ["merton.json", "jumps.json"] {
        let cfg = conehjb_cli::config::load(&bundled(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(cfg.schema_version, conehjb_cli::config::SCHEMA_VERSION);
    }
}

#[test]
fn same_seed_gives_identical_results() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let mut files = Vec::new();
    for (k, seed) in ["5", "5", "6"].iter().enumerate() {
        let out = dir.path().join(format!("run{k}"));
        ok(&run(&cfg, &out, &["--seed", seed, "simulate", "--policy", "merton"]));
        files.push(std::fs::read(out.join("results.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_ne!(files[0], files[2]);
    let text = String::from_utf8(files[0].clone()).unwrap();
    assert_eq!(text.lines().next(), Some("path_id,theta,J"));
    assert_eq!(text.lines().count(), 301);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&run(&cfg, &a, &["--threads", "1", "simulate", "--policy", "zero"]));
    ok(&run(&cfg, &b, &["--threads", "3", "simulate", "--policy", "zero"]));
    assert_eq!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(b.join("results.csv")).unwrap());
}

#[test]
fn solve_writes_a_consistent_field() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out = dir.path().join("out");
    let summary = ok(&run(&cfg, &out, &["solve"]));
    assert_eq!(summary["converged"], true);
    let mut reader = csv::Reader::from_path(out.join("field.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["x1", "x2", "W", "branch", "c_star", "trade_gen"]
    );
    let mut rows = 0;
    for row in reader.records() {
        let row = row.unwrap();
        let w: f64 = row[2].parse().unwrap();
        assert!(w >= 0.0 && w.is_finite());
        match &row[3] {
            "boundary" => assert_eq!(w, 0.0),
            "hold" => assert!(row[4].parse::<f64>().unwrap() >= 0.0),
            "trade" => {
                row[5].parse::<usize>().unwrap();
            }
            other => panic!("branch {other}"),
        }
        rows += 1;
    }
    assert_eq!(rows, 30 * 21);
    let diag: Value = serde_json::from_str(&std::fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["nodes"], rows);
    assert_eq!(diag["certificate"]["verified"], true);
}

#[test]
fn diagnostics_round_trip_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    ok(&run(&cfg, &first, &["--seed", "9", "solve"]));
    ok(&run(&first.join("diagnostics.json"), &second, &["solve"]));
    assert_eq!(std::fs::read(first.join("field.csv")).unwrap(), std::fs::read(second.join("field.csv")).unwrap());
    let a = conehjb_cli::config::load(&first.join("diagnostics.json")).unwrap();
    let b = conehjb_cli::config::load(&second.join("diagnostics.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seed, 9);
}

#[test]
fn saved_field_drives_the_grid_policy() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out = dir.path().join("out");
    ok(&run(&cfg, &out, &["solve", "--out", "w.csv"]));
    let field = out.join("w.csv");
    let from_file = ok(&run(&cfg, &out, &["simulate", "--policy", &format!("grid:{}", field.display()), "--out", "a.csv"]));
    let solved = ok(&run(&cfg, &out, &["simulate", "--policy", "grid", "--out", "b.csv"]));
    assert_eq!(from_file["value"]["mean"], solved["value"]["mean"]);
    assert_eq!(std::fs::read(out.join("a.csv")).unwrap(), std::fs::read(out.join("b.csv")).unwrap());

    let other = small_config(dir.path(), |c| c["grid"]["n_radial"] = 31.into());
    let out2 = run(&other, &out, &["simulate", "--policy", &format!("grid:{}", field.display())]);
    assert_eq!(out2.status.code(), Some(2));
}

#[test]
fn verify_writes_the_certificate() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out = dir.path().join("out");
    let summary = ok(&run(&cfg, &out, &["verify", "--p", "1,1", "--rho", "0.3", "--out", "cert.json"]));
    assert_eq!(summary["verified"], true);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(out.join("cert.json")).unwrap()).unwrap();
    let cert = &doc["certificate"];
    for key in ["p", "rho", "kappa_p", "beta_threshold", "tight_beta_threshold", "report"] {
        assert!(!cert[key].is_null(), "missing {key}");
    }
    assert!(cert["scale"].as_f64().unwrap() > 0.0);

    let summary = ok(&run(&cfg, &out, &["verify", "--p", "1,1", "--rho", "0.5", "--out", "c2.json"]));
    assert_eq!(summary["verified"], true);
    assert!(summary["scale"].is_null());

    let slow = small_config(dir.path(), |c| c["utility"]["beta"] = 0.005.into());
    let summary = ok(&run(&slow, &out, &["verify", "--out", "c3.json"]));
    assert_eq!(summary["verified"], false);
}

#[test]
fn refine_and_bench_write_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |c| {
        c["simulation"]["n_paths"] = 50.into();
    });
    let out = dir.path().join("out");
    ok(&run(&cfg, &out, &["refine"]));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("refine.json")).unwrap()).unwrap();
    assert_eq!(report["levels"].as_array().unwrap().len(), 2);
    ok(&run(&cfg, &out, &["bench"]));
    let timings = std::fs::read_to_string(out.join("timings.csv")).unwrap();
    let tasks: Vec<_> = timings.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(tasks, ["certificate", "solve", "simulate_zero", "simulate_grid"]);
}
