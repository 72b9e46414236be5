use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gaintuner_core::balancer::ControlGains;
use serde_json::Value;
use tempfile::TempDir;

fn models() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/models")
}

fn gaintuner(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaintuner"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn desired(name: &str) -> String {
    models().join(name).display().to_string()
}

#[test]
fn check_rank_reports_deficiency() {
    let dir = TempDir::new().unwrap();
    let o = gaintuner(dir.path(), &["check-rank", "--model", "chain7"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("rank(Γ) = 37"), "{s}");
    assert!(s.contains("= 37 (n = 7, n_c = 1)"), "{s}");
    assert!(s.contains("NOT full row rank"), "{s}");
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "check-rank");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn tune_chain7_writes_spd_gains() {
    let dir = TempDir::new().unwrap();
    let d = desired("chain7_desired.json");
    let o = gaintuner(dir.path(), &["tune", "--model", "chain7", "--desired", &d]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let gains = ControlGains::from_json(&fs::read_to_string(dir.path().join("gains.json")).unwrap()).unwrap();
    assert_eq!(gains.n(), 7);
    gains.validate().unwrap();
    let r = json(&dir.path().join("tune_report.json"));
    assert_eq!(r["correction_applied"], false);
    assert_eq!(r["rank"]["rank"], 37);
    assert!(r["spectral_abscissa"].as_f64().unwrap() < 0.0);
}

#[test]
fn tune_biped_notes_correction() {
    let dir = TempDir::new().unwrap();
    let d = desired("biped14_desired.json");
    let o = gaintuner(dir.path(), &["tune", "--model", "biped14", "--desired", &d]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("two-feet correction applied"));
    let r = json(&dir.path().join("tune_report.json"));
    assert_eq!(r["correction_applied"], true);
    assert_eq!(r["free_dimension"], 8);
}

#[test]
fn malformed_desired_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"Q1\": [[1.0]]").unwrap();
    let out = dir.path().join("out");
    let o = gaintuner(&out, &["tune", "--model", "chain7", "--desired", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("parsing desired dynamics"));
    assert_eq!(json(&out.join("manifest.json"))["status"], "input_error");
}

#[test]
fn unknown_flag_and_missing_model_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(gaintuner(dir.path(), &["tune", "--bogus"]).status.code(), Some(1));
    assert_eq!(gaintuner(dir.path(), &["check-rank", "--model", "no-such-model"]).status.code(), Some(1));
}

#[test]
fn numeric_failure_exits_two() {
    // A single-joint offset cannot be closed through both feet.
    let dir = TempDir::new().unwrap();
    let o = gaintuner(dir.path(), &["simulate", "--model", "biped14", "--perturb", "0.05", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(json(&dir.path().join("manifest.json"))["status"], "numeric_failure");
}

#[test]
fn track_spd_converges_monotonically() {
    let dir = TempDir::new().unwrap();
    let target = dir.path().join("k.json");
    fs::write(&target, "[[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]]").unwrap();
    let o = gaintuner(dir.path(), &["track-spd", "--target", target.to_str().unwrap(), "--cold-start"]);
    assert!(o.status.success());
    let r = json(&dir.path().join("result.json"));
    assert_eq!(r["status"], "Converged");
    assert!(r["V_final"].as_f64().unwrap() <= 1e-8 * r["V0"].as_f64().unwrap());
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,V,orth_err"));
    let v: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(v.len() > 10);
    assert!(v.windows(2).all(|w| w[1] <= w[0] + 1e-9 * (1.0 + w[0])));
}

#[test]
fn simulate_at_equilibrium_is_flat() {
    let dir = TempDir::new().unwrap();
    let o = gaintuner(dir.path(), &["simulate", "--model", "chain7", "--duration", "0.5"]);
    assert!(o.status.success());
    let s = json(&dir.path().join("summary.json"));
    assert!(s["max_joint_deviation"].as_f64().unwrap() <= 1e-9);
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,q_j0,"));
    assert!(dir.path().join("trajectory.gp").exists());
}

#[test]
fn linearize_writes_all_blocks() {
    let dir = TempDir::new().unwrap();
    assert!(gaintuner(dir.path(), &["linearize", "--model", "chain7"]).status.success());
    let l = json(&dir.path().join("linearization.json"));
    for key in ["Q1", "Q2", "A", "A_numeric", "eigenvalues", "C1", "C2", "C3", "C4"] {
        assert!(!l[key].is_null(), "{key}");
    }
    assert_eq!(l["A"].as_array().unwrap().len(), 14);
    assert!(l["numeric_relative_gap"].as_f64().unwrap() < 1e-6);
}

#[test]
fn step_response_reports_each_joint() {
    let dir = TempDir::new().unwrap();
    let o = gaintuner(
        dir.path(),
        &["step-response", "--model", "chain7", "--joint", "1", "--joint", "4", "--duration", "1.5"],
    );
    assert!(o.status.success());
    let r = json(&dir.path().join("step_response.json"));
    let r = r.as_array().unwrap();
    assert_eq!(r.len(), 2);
    assert_eq!(r[1]["joint"], 4);
    assert!(dir.path().join("step_joint4_linear.csv").exists());
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let d = desired("chain7_desired.json");
    for dir in [&a, &b] {
        assert!(gaintuner(dir.path(), &["tune", "--model", "chain7", "--desired", &d]).status.success());
        let args = ["simulate", "--model", "chain7", "--perturb", "0.05", "--seed", "11", "--duration", "0.2"];
        assert!(gaintuner(&dir.path().join("sim"), &args).status.success());
    }
    for f in ["gains.json", "tune_report.json", "sim/trajectory.csv", "sim/summary.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = TempDir::new().unwrap();
    let args = ["simulate", "--model", "chain7", "--perturb", "0.05", "--seed", "12", "--duration", "0.2"];
    assert!(gaintuner(c.path(), &args).status.success());
    assert_ne!(
        fs::read(a.path().join("sim/trajectory.csv")).unwrap(),
        fs::read(c.path().join("trajectory.csv")).unwrap()
    );
}

#[test]
fn thread_cap_is_validated() {
    let dir = TempDir::new().unwrap();
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_gaintuner"))
            .env("GAINTUNER_THREADS", threads)
            .args(["--out", dir.path().to_str().unwrap(), "check-rank", "--model", "chain7"])
            .output()
            .unwrap()
    };
    assert!(run("1").status.success());
    assert_eq!(run("0").status.code(), Some(1));
}
