use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delaymp"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn cfg(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Write a modified copy of a shipped config.
fn variant(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> String {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(configs().join(name)).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join(format!("variant-{name}"));
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path.display().to_string()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn simulate_is_deterministic_and_manifest_lists_outputs() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let config = cfg("ex34_noisy.json");
    let args = ["simulate", "--config", &config, "--paths", "100", "--seed", "7", "--horizon", "5"];
    let oa = run(&args, &a);
    let ob = run(&[&args[..], &["--threads", "1"]].concat(), &b);
    assert_eq!(code(&oa), 0, "{}", stderr(&oa));
    assert_eq!(code(&ob), 0, "{}", stderr(&ob));
    let pa = std::fs::read(a.join("paths.csv")).unwrap();
    assert_eq!(pa, std::fs::read(b.join("paths.csv")).unwrap());
    let (header, rows) = csv_rows(&a.join("paths.csv"));
    assert_eq!(header, ["path_id", "t", "X", "Y", "A", "u"]);
    assert_eq!(rows.len(), 100 * 51);

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let digest: String = Sha256::digest(std::fs::read(&config).unwrap()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(manifest["config_sha256"], Value::from(digest));
    assert_eq!(manifest["seed"], Value::from(7));
    assert_eq!(manifest["outputs"], serde_json::json!(["paths.csv"]));
    assert_eq!(manifest["exit_code"], Value::from(0));
}

#[test]
fn other_seed_other_paths() {
    let dir = TempDir::new().unwrap();
    let config = cfg("ex34_noisy.json");
    let mut files = Vec::new();
    for (i, seed) in ["1", "2"].iter().enumerate() {
        let out = dir.path().join(i.to_string());
        let o = run(&["simulate", "--config", &config, "--paths", "10", "--seed", seed, "--horizon", "2"], &out);
        assert_eq!(code(&o), 0);
        files.push(std::fs::read(out.join("paths.csv")).unwrap());
    }
    assert_ne!(files[0], files[1]);
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = run(&["simulate", "--config", "no/such/config.json"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no/such/config.json"));
}

#[test]
fn misaligned_dt_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = run(&["simulate", "--config", &cfg("ex35.json"), "--dt", "0.3"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("grid mismatch"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = run(&["simulate", "--config", &cfg("zero.json"), "--bogus"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn second_adjoint_of_example_without_delay() {
    let dir = TempDir::new().unwrap();
    let o = run(&["adjoint", "--system", "second", "--config", &cfg("ex34.json"), "--dt", "0.001"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = csv_rows(&dir.path().join("adjoint.csv"));
    assert_eq!(header, ["t", "p1", "p2", "p3", "q1", "q2"]);
    let p0 = rows[0][1];
    for r in &rows {
        assert!(r[2].abs() <= 1e-6 && r[3].abs() <= 1e-6 && r[4].abs() <= 1e-6 && r[5].abs() <= 1e-6);
        if r[0] <= 10.0 {
            let exact = p0 * (-0.05 * r[0]).exp();
            assert!((r[1] - exact).abs() <= 1e-4 * exact);
        }
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("picard_report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], Value::from(true));
    assert!(report["ratios"].is_array());
}

#[test]
fn first_adjoint_of_zero_problem_is_zero() {
    let dir = TempDir::new().unwrap();
    let o = run(&["adjoint", "--system", "first", "--config", &cfg("zero.json")], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = csv_rows(&dir.path().join("adjoint.csv"));
    assert!(rows.iter().all(|r| r[1..].iter().all(|v| *v == 0.0)));
}

#[test]
fn too_small_weight_reports_bad_weight() {
    let dir = TempDir::new().unwrap();
    let o = run(&["adjoint", "--config", &cfg("stiff.json"), "--weight-lambda", "0.01"], dir.path());
    assert_eq!(code(&o), 2);
    let report = std::fs::read_to_string(dir.path().join("picard_report.json")).unwrap();
    assert!(report.contains("too small"), "{report}");
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("picard_report.json"));
}

#[test]
fn picard_diagnostics_on_regression_mode() {
    let dir = TempDir::new().unwrap();
    let o = run(&["picard-diagnostics", "--config", &cfg("lq_jumps.json"), "--paths", "200"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("picard_diagnostics.json")).unwrap()).unwrap();
    assert_eq!(d["contraction"]["within_half"], Value::from(true));
    assert_eq!(d["report"]["schedule"], Value::from("picard"));
}

#[test]
fn necessary_check_passes_at_closed_form() {
    let dir = TempDir::new().unwrap();
    let o = run(&["check", "--principle", "necessary", "--control", "closed_form", "--config", &cfg("ex34.json")], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("check_report.json").exists());
    assert!(dir.path().join("check_report.txt").exists());
}

#[test]
fn sufficient_check_rejects_overspending() {
    let dir = TempDir::new().unwrap();
    let table = dir.path().join("bad_u.csv");
    let rows: String = (0..=4000).map(|k| format!("{},{}\n", k as f64 * 0.01, 1.2 * 0.15)).collect();
    std::fs::write(&table, format!("t,u\n{rows}")).unwrap();
    let control = format!("file:{}", table.display());
    let out = dir.path().join("out");
    let o = run(&["check", "--principle", "sufficient1", "--control", &control, "--config", &cfg("ex34.json")], &out);
    assert_eq!(code(&o), 2);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(out.join("check_report.json")).unwrap()).unwrap();
    let worst = r["gaps"].as_array().unwrap().iter().map(|g| g["gap"].as_f64().unwrap()).fold(0.0, f64::max);
    assert!(worst > 0.0);
}

#[test]
fn sufficient_check_passes_at_closed_form() {
    let dir = TempDir::new().unwrap();
    let o = run(&["check", "--principle", "sufficient1", "--config", &cfg("ex34.json")], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn convex_reward_fails_concavity() {
    let dir = TempDir::new().unwrap();
    let config = variant(dir.path(), "ex34.json", |v| v["problem"]["coefficients"]["gamma"] = Value::from(1.5));
    let out = dir.path().join("out");
    let o = run(&["check", "--principle", "sufficient1", "--control", "constant:0.1", "--config", &config], &out);
    assert_eq!(code(&o), 2);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(out.join("check_report.json")).unwrap()).unwrap();
    assert_eq!(r["concavity"]["pass"], Value::from(false));
}

#[test]
fn sweep_over_gamma_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let o = run(&["sweep", "--config", &cfg("ex34.json"), "--param", "gamma", "--values", "0.3,0.5,0.7"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    let (mu, rho, horizon) = (0.05, 0.1, 40.0);
    for r in rows {
        let gamma: f64 = r[1].parse().unwrap();
        let j: f64 = r[2].parse().unwrap();
        let se: f64 = r[3].parse().unwrap();
        // consumption k X(t) with X = e^{(mu - k) t}, truncated at the horizon
        let k = mu + (rho - mu) / (1.0 - gamma);
        let c = rho - gamma * (mu - k);
        let exact = k.powf(gamma) / gamma * (1.0 - (-c * horizon).exp()) / c;
        assert!((j - exact).abs() <= 2.0 * se + 1e-3 * exact, "gamma {gamma}: {j} vs {exact}");
    }
}

#[test]
fn sweep_rejects_empty_and_unknown() {
    let dir = TempDir::new().unwrap();
    let o = run(&["sweep", "--config", &cfg("ex34.json"), "--param", "gamma", "--values"], dir.path());
    assert_eq!(code(&o), 1);
    let o = run(&["sweep", "--config", &cfg("ex34.json"), "--param", "nonsense", "--values", "1"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn sweep_over_seed() {
    let dir = TempDir::new().unwrap();
    let o = run(
        &["sweep", "--config", &cfg("ex34_noisy.json"), "--paths", "200", "--horizon", "5", "--param", "seed", "--values", "3,3,4"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let j: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(j[0], j[1]);
    assert_ne!(j[0], j[2]);
}

#[test]
fn example_commands_write_tables() {
    let dir = TempDir::new().unwrap();
    let o = run(&["example34", "--config", &cfg("ex34.json")], dir.path());
    assert_eq!(code(&o), 0);
    let s: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("example34.json")).unwrap()).unwrap();
    assert!((s["p0_star"].as_f64().unwrap() - 0.15f64.powf(-0.5)).abs() < 1e-12);

    let o = run(&["example35", "--config", &cfg("ex35.json")], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("example35.json")).unwrap()).unwrap();
    assert_eq!(s["constraint_satisfied"], Value::from(true));
    assert!(s["k"].as_f64().unwrap() > 0.0);

    let o = run(&["example35", "--config", &cfg("ex34.json")], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn objective_writes_per_path_values() {
    let dir = TempDir::new().unwrap();
    let o = run(&["objective", "--config", &cfg("lq_jumps.json"), "--paths", "50"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = csv_rows(&dir.path().join("objectives.csv"));
    assert_eq!(header, ["path_id", "J"]);
    assert_eq!(rows.len(), 50);
    let est: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("objective.json")).unwrap()).unwrap();
    let mean = rows.iter().map(|r| r[1]).sum::<f64>() / 50.0;
    assert!((est["mean"].as_f64().unwrap() - mean).abs() < 1e-12 * (1.0 + mean.abs()));
}
