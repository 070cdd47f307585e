use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn plearner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plearner"))
        .args(args)
        .env_remove("PLEARNER_THREADS")
        .output()
        .expect("spawn plearner")
}

fn ok(args: &[&str]) -> Output {
    let out = plearner(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn simulate(dir: &Path, n: usize) -> (String, String) {
    let d = dir.join("d");
    ok(&["simulate", "--n", &n.to_string(), "--seed", "1", "--out", d.to_str().unwrap()]);
    (
        d.join("data.csv").to_str().unwrap().to_string(),
        d.join("schema.json").to_str().unwrap().to_string(),
    )
}

#[test]
fn simulate_writes_expected_columns_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = simulate(dir.path(), 120);
    let text = fs::read_to_string(&data).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "y,a,x1,x2,x3,x4,x5,z1,w1");
    assert_eq!(lines.count(), 120);
    let d = dir.path().join("d");
    assert!(d.join("truth.csv").exists());
    assert!(d.join("resolved_config.json").exists());
}

#[test]
fn fit_writes_model_scores_and_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = simulate(dir.path(), 150);
    let m = dir.path().join("m");
    let before = fs::read(&data).unwrap();
    ok(&[
        "fit", "--input", &data, "--schema", &schema, "--final", "kernel_ridge", "--out", m.to_str().unwrap(),
    ]);
    assert_eq!(fs::read(&data).unwrap(), before, "input was modified");
    let model: serde_json::Value = serde_json::from_str(&fs::read_to_string(m.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["family"], "kernel_ridge");
    let scores = fs::read_to_string(m.join("scores.csv")).unwrap();
    assert!(scores.starts_with("unit_id,gamma,fold,clipped\n"));
    assert_eq!(scores.lines().count(), 151);
    let tau = fs::read_to_string(m.join("tau_hat.csv")).unwrap();
    assert_eq!(tau.lines().count(), 151);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(m.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["command"], "fit");
    assert_eq!(resolved["pipeline"]["final_stage"], "kernel_ridge");
}

#[test]
fn rate_rerun_reproduces_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = simulate(dir.path(), 160);
    let run = |name: &str| {
        let r = dir.path().join(name);
        ok(&[
            "rate", "--input", &data, "--schema", &schema, "--direction", "harm_asc", "--boot", "50", "--seed", "3",
            "--out", r.to_str().unwrap(),
        ]);
        r
    };
    let (r1, r2) = (run("r1"), run("r2"));
    for file in ["rate.json", "toc.csv", "rate.txt"] {
        assert_eq!(fs::read(r1.join(file)).unwrap(), fs::read(r2.join(file)).unwrap(), "{file} differs");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(r1.join("rate.json")).unwrap()).unwrap();
    assert!(report["autoc"].is_f64());
    assert!(report["autoc_se"].as_f64().unwrap() > 0.0);
    assert_eq!(report["direction"], "harm_asc");
    assert!(fs::read_to_string(r1.join("toc.csv")).unwrap().starts_with("q,toc\n"));
}

#[test]
fn blp_prints_table_and_reads_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = simulate(dir.path(), 150);
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "clip = 20.0\n[nuisance]\nn_folds = 3\n").unwrap();
    let b = dir.path().join("b");
    let out = ok(&[
        "blp", "--input", &data, "--schema", &schema, "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("(BLP)") && stdout.contains("(ATE)") && stdout.contains("Num. obs."));
    assert!(b.join("blp.csv").exists() && b.join("blp.json").exists() && b.join("report.txt").exists());
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(b.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["pipeline"]["clip"], 20.0);
    assert_eq!(resolved["pipeline"]["nuisance"]["n_folds"], 3);
    let folds: std::collections::BTreeSet<String> = fs::read_to_string(b.join("scores.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().to_string())
        .collect();
    assert_eq!(folds.into_iter().collect::<Vec<_>>(), ["1", "2", "3"]);
}

#[test]
fn invalid_config_fails_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = simulate(dir.path(), 50);
    let x = dir.path().join("x");
    let out = plearner(&["scores", "--input", &data, "--folds", "1", "--out", x.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error: "));
    assert!(!x.exists());
}

#[test]
fn missing_input_and_unknown_subcommand_fail() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.csv");
    let out = plearner(&["fit", "--input", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.contains("none.csv"));
    assert!(!plearner(&["frobnicate"]).status.success());
}

#[test]
fn thread_flag_does_not_change_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = simulate(dir.path(), 120);
    let run = |name: &str, threads: &str| {
        let s = dir.path().join(name);
        ok(&["--threads", threads, "scores", "--input", &data, "--seed", "5", "--out", s.to_str().unwrap()]);
        fs::read(s.join("scores.csv")).unwrap()
    };
    assert_eq!(run("s1", "1"), run("s3", "3"));
}

/// Simulated units written under clinical column names, with two proxies of
/// each kind.
fn support_like(dir: &Path, n: usize) -> (String, String) {
    let draw = plearner::simulate::generate(n, 8, &plearner::simulate::DgpConfig::default());
    let d = &draw.dataset;
    let x_names = ["age", "sex", "aps1", "surv2md1", "dnr1"];
    let mut csv = format!("t3d30,RHC,pafi1,paco21,ph1,hema1,{}\n", x_names.join(","));
    for i in 0..n {
        let (z, w) = (d.z()[(i, 0)], d.w()[(i, 0)]);
        let mut row = vec![d.y()[i], f64::from(d.a()[i]), z, z * z, w, 0.5 * w + d.x()[(i, 0)]];
        row.extend((0..5).map(|j| d.x()[(i, j)]));
        csv.push_str(&row.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    let data = dir.join("support.csv");
    fs::write(&data, csv).unwrap();
    let schema = dir.join("schema.toml");
    fs::write(
        &schema,
        format!(
            "outcome = \"t3d30\"\ntreatment = [\"RHC\"]\nz_proxies = [\"pafi1\", \"paco21\"]\nw_proxies = [\"ph1\", \"hema1\"]\ncovariates = [{}]\n",
            x_names.iter().map(|s| format!("\"{s}\"")).collect::<Vec<_>>().join(", ")
        ),
    )
    .unwrap();
    (data.to_str().unwrap().to_string(), schema.to_str().unwrap().to_string())
}

#[test]
fn support_schema_produces_both_report_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = support_like(dir.path(), 160);
    let b = dir.path().join("b");
    let table1 = ok(&["blp", "--input", &data, "--schema", &schema, "--out", b.to_str().unwrap()]);
    let table1 = String::from_utf8(table1.stdout).unwrap();
    for term in ["(Intercept)", "age", "sex", "aps1", "surv2md1", "dnr1", "Num. obs.", "***p<0.001"] {
        assert!(table1.contains(term), "missing {term} in\n{table1}");
    }
    let r = dir.path().join("r");
    let table2 = ok(&[
        "rate", "--input", &data, "--schema", &schema, "--direction", "harm_asc", "--boot", "50", "--out",
        r.to_str().unwrap(),
    ]);
    let table2 = String::from_utf8(table2.stdout).unwrap();
    assert!(table2.contains("AUTOC") && table2.contains("Std.err") && table2.contains("Kernel ridge"));
    let c = dir.path().join("c");
    ok(&["blp", "--input", &data, "--schema", &schema, "--estimand", "catt", "--out", c.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.join("blp.json")).unwrap()).unwrap();
    let treated = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1) == Some("1"))
        .count();
    assert_eq!(report["blp"]["n_used"], treated);
}
