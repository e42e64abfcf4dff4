use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ou-tree"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_tree(dir: &Path) -> String {
    let p = dir.join("t.nwk");
    fs::write(&p, "((A:1,B:1):1,(C:1.5,D:1.5):0.5,(E:0.4,F:0.4):1.6);\n").unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn simulate_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let tree = write_tree(dir.path());
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--tree", &tree, "--alpha", "0.5", "--gamma", "1", "--reps", "4", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let data = out.join("data.csv");
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("A,B,C,D,E,F"));

    let o = run(&["fit", "--tree", &tree, "--data", data.to_str().unwrap(), "--mode", "reml"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    for l in &lines {
        let (a, g, s) = (l["alpha_hat"].as_f64().unwrap(), l["gamma_hat"].as_f64().unwrap(), l["sigma2_hat"].as_f64().unwrap());
        assert!((s - 2.0 * a * g).abs() <= 1e-12 * s);
        assert_eq!(l["mode"], "reml");
    }

    let fits = dir.path().join("fits");
    let o = run(&["fit", "--tree", &tree, "--data", data.to_str().unwrap(), "--out", fits.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(fits.join("fits.csv")).unwrap();
    assert!(csv.starts_with("replicate,mode,mu_hat,gamma_hat,alpha_hat,sigma2_hat,loglik,boundary_flag"));
}

#[test]
fn simulation_output_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let tree = write_tree(dir.path());
    let args = ["simulate", "--tree", &tree, "--alpha", "0.5", "--gamma", "1", "--reps", "3", "--seed", "11"];
    assert_eq!(run(&args).stdout, run(&args).stdout);
    let with_workers = bin().args(args).env("OU_TREE_WORKERS", "2").output().unwrap();
    assert_eq!(with_workers.stdout, run(&args).stdout);
}

#[test]
fn bound_on_a_star_spec() {
    let o = run(&["bound", "--spec", r#"{"m":1,"degrees":[10],"ages":[1.0]}"#, "--alpha", "0.1", "--gamma", "1"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let lower = v["mu_var_lower_bound"].as_f64().unwrap();
    let exact = v["mu_var_gls"].as_f64().unwrap();
    assert!((lower - 0.8368583).abs() < 1e-6);
    assert!((lower - exact).abs() < 1e-12);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"tree":{"dense_tip":{"d":2,"q":0.7,"t0":0,"m":4}},"sizes":[16],"replicates":0,"seed":1}"#).unwrap();
    let o = run(&["subsample-experiment", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("replicates"));

    fs::write(&cfg, r#"{"tree":{"dense_tip":{"d":2,"q":0.7,"t0":0,"m":4}},"sizes":[16]}"#).unwrap();
    let o = run(&["subsample-experiment", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    let o = run(&["fit", "--tree", "/nonexistent.nwk", "--data", "/nonexistent.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["simulate", "--alpha", "1", "--gamma", "1", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["fit", "--mode", "bayes", "--tree", "x", "--data", "y"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let tree = write_tree(dir.path());
    let data = dir.path().join("flat.csv");
    fs::write(&data, "A,B,C,D,E,F\n1,1,1,1,1,1\n").unwrap();
    let o = run(&["fit", "--tree", &tree, "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn experiment_flags_and_reproducible_output() {
    let dir = tempfile::tempdir().unwrap();
    let spec = r#"{"d":2,"q":0.7,"t0":0.0,"m":5}"#;
    let go = |out: &Path| {
        let o = run(&[
            "subsample-experiment", "--spec", spec, "--sizes", "32,16,8", "--reps", "3", "--sequences", "2", "--seed", "9",
            "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    go(&a);
    go(&b);
    for f in ["config.json", "fits.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(a.join("fits.csv")).unwrap().lines().count(), 1 + 2 * 3 * 3);
}

#[test]
fn study_and_micro_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.json");
    fs::write(&cfg, r#"{"degrees":[8],"ages":[1.0,0.5],"last_degrees":[4,8],"gamma":1,"alpha":0.5,"replicates":10,"seed":2}"#).unwrap();
    let out = dir.path().join("study");
    let o = run(&["symtree-study", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 3);

    let cfg = dir.path().join("micro.json");
    fs::write(
        &cfg,
        r#"{"tree":{"dense_tip":{"d":2,"q":0.7,"t0":0.0,"m":6}},
            "pairs":[{"theta1":{"mu":0,"alpha":0.1,"gamma":1},"theta2":{"mu":0,"alpha":0.2,"gamma":0.5}}],
            "m_max":12}"#,
    )
    .unwrap();
    let out = dir.path().join("micro");
    let o = run(&["micro-report", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rao = fs::read_to_string(out.join("rao_sums.csv")).unwrap();
    assert_eq!(rao.lines().count(), 1 + 11);
    assert!(out.join("age_histogram.csv").exists());
}
