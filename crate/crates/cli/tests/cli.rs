use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_asreach"))
}

fn systems(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../systems").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn matrix(dir: &Path, name: &str, rows: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, rows).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn classify_linear_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let a2 = matrix(d.path(), "a2.json", "[[0,0],[0,0]]");
    let b2 = matrix(d.path(), "b2.json", "[[1,0],[0,1]]");
    let o = run(&["classify-linear", "--matrix-a", &a2, "--matrix-b", &b2]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("NeutralDimAtMost2"));

    let a3 = matrix(d.path(), "a3.json", "[[0,0,0],[0,0,0],[0,0,0]]");
    let b3 = matrix(d.path(), "b3.json", "[[1,0,0],[0,1,0],[0,0,1]]");
    assert_eq!(code(&run(&["classify-linear", "--matrix-a", &a3, "--matrix-b", &b3])), 10);

    let bad = matrix(d.path(), "bad.json", "[[0,0],[0");
    assert_eq!(code(&run(&["classify-linear", "--matrix-a", &bad, "--matrix-b", &b2])), 2);

    let b_def = matrix(d.path(), "bdef.json", "[[1,0],[0,0]]");
    let o = run(&["classify-linear", "--matrix-a", &a2, "--matrix-b", &b_def]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("full row rank"));

    let jordan = systems("jordan_block.json");
    let o = run(&["classify-linear", "--system", jordan.to_str().unwrap()]);
    assert_eq!(code(&o), 10);
    assert!(stdout(&o).contains("DefectiveNeutralBlock"));
}

#[test]
fn synthesize_doublewell_and_constant_drift() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("dw");
    let sys = systems("doublewell.json");
    let o = run(&[
        "synthesize",
        "--system",
        sys.to_str().unwrap(),
        "--zeta0",
        "(x1 - 1)^2 - 0.04",
        "--lambda-grid",
        "4,16,32",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["drift.json", "variant.json", "verification.json", "eps_trace.csv", "lambda_sweep.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let out2 = d.path().join("cd");
    let cd = systems("constant_drift.json");
    let o = run(&["synthesize", "--system", cd.to_str().unwrap(), "--seed", "1", "--out", out2.to_str().unwrap()]);
    assert_eq!(code(&o), 11);
    assert!(stdout(&o).contains("dual certificate"));
    assert!(out2.join("drift_infeasible.json").exists());
}

#[test]
fn simulate_is_deterministic_and_replayable() {
    let d = tempfile::tempdir().unwrap();
    let sys = systems("brownian_2.json");
    let args = |out: &Path| {
        vec![
            "simulate".to_string(),
            "--system".into(),
            sys.to_string_lossy().into_owned(),
            "--x0=2,0".into(),
            "--dt".into(),
            "0.01".into(),
            "--tmax".into(),
            "5".into(),
            "--ntraj".into(),
            "50".into(),
            "--seed".into(),
            "11".into(),
            "--out".into(),
            out.to_string_lossy().into_owned(),
        ]
    };
    let (a, b, c) = (d.path().join("a"), d.path().join("b"), d.path().join("c"));
    assert_eq!(code(&bin().args(args(&a)).output().unwrap()), 0);
    assert_eq!(code(&bin().args(args(&b)).output().unwrap()), 0);
    let csv = fs::read(a.join("cdf.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("cdf.csv")).unwrap());

    let m = a.join("manifest.json");
    let manifest = fs::read_to_string(&m).unwrap();
    assert!(manifest.contains("\"sha256\""));
    let o = run(&["replay", m.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(csv, fs::read(c.join("cdf.csv")).unwrap());
}

#[test]
fn simulate_rejects_bad_config() {
    let d = tempfile::tempdir().unwrap();
    let sys = systems("brownian_2.json");
    let s = sys.to_str().unwrap();
    let out = d.path().join("x");
    let o = out.to_str().unwrap();
    let base = ["simulate", "--system", s, "--tmax", "1", "--seed", "1", "--out", o];
    assert_eq!(code(&bin().args(base).args(["--x0=2,0", "--ntraj", "0"]).output().unwrap()), 2);
    assert_eq!(code(&bin().args(base).args(["--x0=2", "--ntraj", "5"]).output().unwrap()), 2);
    assert_eq!(code(&bin().args(["simulate", "--system", s, "--x0=2,0", "--tmax", "1", "--ntraj", "5", "--out", o]).output().unwrap()), 2);
}

#[test]
fn verify_exit_codes() {
    let sys = systems("doublewell.json");
    let s = sys.to_str().unwrap();
    let cert = |name: &str| systems(&format!("certificates/{name}.json")).to_string_lossy().into_owned();
    let verify = |c: &str| run(&["verify", "--system", s, "--certificate", c, "--box=-3,3", "--seed", "5"]);
    assert_eq!(code(&verify(&cert("doublewell_variant_lambda16"))), 0);
    let o = verify(&cert("doublewell_variant_lambda1"));
    assert_eq!(code(&o), 13);
    assert!(stdout(&o).contains("beta_decrease failed at"));
    assert_eq!(code(&verify(&cert("constant_v"))), 13);
    assert_eq!(code(&verify(&cert("doublewell_drift"))), 0);
    // a system file is not a certificate
    assert_eq!(code(&verify(s)), 2);
}

#[test]
fn divergence_demo_and_poly_parse() {
    let o = run(&["demo-divergence", "--dt", "0.01", "--steps", "20"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.starts_with("threshold 8.7177978871"));
    assert_eq!(text.matches(",true\n").count(), 20);
    let o = run(&["demo-divergence", "--dt", "0.75", "--steps", "3"]);
    assert!(stdout(&o).starts_with("threshold 1.4142135624"));
    let o = run(&["demo-divergence", "--dt", "0.01", "--x0", "1", "--steps", "50"]);
    assert!(stdout(&o).contains("diverged false"));
    assert_eq!(code(&run(&["demo-divergence", "--dt", "0"])), 2);

    let o = run(&["poly-parse", "--n", "1", "-4*x1^3 + 4*x1"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["terms"].as_array().unwrap().len(), 2);
    assert_eq!(code(&run(&["poly-parse", "--n", "1", "x2"])), 2);
}
