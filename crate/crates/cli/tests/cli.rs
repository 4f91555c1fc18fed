use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iproject"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn two_atom(dir: &Path) -> (PathBuf, PathBuf) {
    let atoms = write(dir, "atoms.csv", "w,x\n0.5,0\n0.5,1\n");
    let family = write(dir, "family.json", r#"{"kind": "custom", "members": [[-1, 2]]}"#);
    (atoms, family)
}

#[test]
fn project_two_atom_instance() {
    let dir = TempDir::new().unwrap();
    let (atoms, family) = two_atom(dir.path());
    let out = dir.path().join("result.json");
    let trace = dir.path().join("trace.csv");
    let o = run(&["project", "--input", s(&atoms), "--family", s(&family), "--output", s(&out), "--trace", s(&trace)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out);
    assert!((v["kl"].as_f64().unwrap() - 0.056633).abs() < 1e-6);
    assert!(v["assumptions"]["laplace_ok"].as_bool().unwrap());
    let t = std::fs::read_to_string(&trace).unwrap();
    assert!(t.starts_with("stage,epsilon,cells,value,iterations,duality_gap\n"));
    assert!(t.lines().count() >= 2);
}

#[test]
fn feasible_reference_gives_zero_kl() {
    let dir = TempDir::new().unwrap();
    let atoms = write(dir.path(), "atoms.csv", "w,x1,x2\n1,0.1,0.4\n1,0.3,0.9\n1,0.5,0.5\n");
    let family = write(dir.path(), "family.json", r#"{"kind": "unconditional_fsd", "lower": 0, "upper": 1}"#);
    let out = dir.path().join("r.json");
    let o = run(&["project", "--input", s(&atoms), "--family", s(&family), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&out)["kl"].as_f64().unwrap(), 0.0);
}

#[test]
fn missing_input_exits_with_one() {
    let dir = TempDir::new().unwrap();
    let (_, family) = two_atom(dir.path());
    let o = run(&["project", "--input", "/nonexistent/atoms.csv", "--family", s(&family)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn malformed_csv_reports_line() {
    let dir = TempDir::new().unwrap();
    let (_, family) = two_atom(dir.path());
    let atoms = write(dir.path(), "bad.csv", "w,x\n0.5,0\n0.5,oops\n");
    let o = run(&["project", "--input", s(&atoms), "--family", s(&family)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn output_is_byte_identical_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let atoms = dir.path().join("atoms.csv");
    let family = dir.path().join("family.json");
    let g = run(&["gen", "--kind", "fsd", "--n", "30", "--seed", "9", "--output", s(&atoms), "--family-out", s(&family)]);
    assert_eq!(g.status.code(), Some(0));
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    run(&["project", "--input", s(&atoms), "--family", s(&family), "--output", s(&a)]);
    run(&["--threads", "4", "project", "--input", s(&atoms), "--family", s(&family), "--output", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn result_round_trips_through_verify() {
    let dir = TempDir::new().unwrap();
    let atoms = dir.path().join("atoms.csv");
    let family = dir.path().join("family.json");
    run(&["gen", "--kind", "fsd", "--n", "25", "--seed", "4", "--output", s(&atoms), "--family-out", s(&family)]);
    let res = dir.path().join("r.json");
    run(&["project", "--input", s(&atoms), "--family", s(&family), "--output", s(&res)]);
    let ver = dir.path().join("v.json");
    let o = run(&["verify", "--input", s(&atoms), "--family", s(&family), "--result", s(&res), "--output", s(&ver)]);
    let kl = json(&res)["kl"].as_f64().unwrap();
    let v = json(&ver);
    assert!((v["kl"].as_f64().unwrap() - kl).abs() <= 1e-10);
    assert_eq!(o.status.code(), Some(if v["feasible"].as_bool().unwrap() { 0 } else { 2 }));
}

#[test]
fn fsd_partition_at_half_has_at_most_eight_cells() {
    let dir = TempDir::new().unwrap();
    let atoms = dir.path().join("atoms.csv");
    let family = dir.path().join("family.json");
    run(&["gen", "--kind", "fsd", "--n", "40", "--seed", "1", "--output", s(&atoms), "--family-out", s(&family)]);
    let out = dir.path().join("p.json");
    let o = run(&["partition", "--input", s(&atoms), "--family", s(&family), "--epsilon", "0.5", "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let p = json(&out);
    assert!(p["n_cells"].as_u64().unwrap() <= 8);

    let o = run(&["partition", "--input", s(&atoms), "--family", s(&family), "--epsilon", "2", "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&out)["n_cells"].as_u64(), Some(1));
}

#[test]
fn conditional_partition_reports_cube_count() {
    let dir = TempDir::new().unwrap();
    let mut csv = String::from("w,x1,x2,z\n");
    for k in 0..24 {
        let z = (k as f64 + 0.5) / 24.0;
        csv.push_str(&format!("1,{},{},{z}\n", (k * 7 % 24) as f64 / 24.0, (k * 5 % 24) as f64 / 24.0));
    }
    let atoms = write(dir.path(), "atoms.csv", &csv);
    let family = write(dir.path(), "family.json", r#"{"kind": "conditional_fsd", "lower": 0, "upper": 1, "d_z": 1}"#);
    let out = dir.path().join("p.json");
    let o = run(&["partition", "--input", s(&atoms), "--family", s(&family), "--epsilon", "0.5", "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let p = json(&out);
    let r0 = p["r0"].as_u64().unwrap();
    let n1 = p["n1"].as_u64().unwrap();
    assert_eq!(p["n2"].as_u64().unwrap(), 2 * r0);
    assert_eq!(p["n_cells"].as_u64().unwrap(), n1 * 2 * r0);
}

#[test]
fn compare_agrees_with_dykstra() {
    let dir = TempDir::new().unwrap();
    let mut csv = String::from("w,x1,x2\n1,0,1\n");
    for k in 0..29 {
        let u = ((k * 11 + 3) % 29) as f64 / 29.0;
        let v = ((k * 17 + 5) % 29) as f64 / 29.0;
        csv.push_str(&format!("1,{u},{}\n", v * v));
    }
    let atoms = write(dir.path(), "atoms.csv", &csv);
    let family = write(dir.path(), "family.json", r#"{"kind": "unconditional_fsd", "lower": 0, "upper": 1}"#);
    let out = dir.path().join("c.json");
    let o = run(&["compare", "--input", s(&atoms), "--family", s(&family), "--resolution", "1", "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let c = json(&out);
    assert!(c["value_gap"].as_f64().unwrap() <= 1e-4);

    let o = run(&["compare", "--input", s(&atoms), "--family", s(&family), "--max-atoms", "10"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_overrides_flags() {
    let dir = TempDir::new().unwrap();
    let (atoms, family) = two_atom(dir.path());
    let out = dir.path().join("from_config.json");
    let cfg = write(
        dir.path(),
        "run.json",
        &format!(r#"{{"input": "{}", "output": "{}", "stages": 2}}"#, s(&atoms), s(&out)),
    );
    let o = run(&["project", "--input", "/nonexistent.csv", "--family", s(&family), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(json(&out)["stages"].as_array().unwrap().len() <= 2);
}

#[test]
fn pava_oracle_on_generated_marginal_instance() {
    let dir = TempDir::new().unwrap();
    let atoms = write(dir.path(), "atoms.csv", "w,x\n1,0.1\n1,0.3\n1,0.5\n1,0.7\n1,0.9\n");
    let family = write(
        dir.path(),
        "family.json",
        r#"{"kind": "marginal_given_g", "upper": 1, "g": [[0.1, 0.05], [0.3, 0.3], [0.5, 0.4], [0.7, 0.6], [0.9, 1.0]]}"#,
    );
    let out = dir.path().join("o.json");
    let o = run(&["oracle", "--method", "pava", "--input", s(&atoms), "--family", s(&family), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let c = json(&out);
    assert!(c["density_l1"].as_f64().unwrap() <= 1e-6, "{c}");
}
