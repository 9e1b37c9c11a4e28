use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Copies the fixture directory so that relative config paths resolve inside it.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fixtures()).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, dir.path().join(p.file_name().unwrap())).unwrap();
    }
    dir
}

fn ccbym2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccbym2")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fit(ws: &Path, out: &str) -> Output {
    let cfg = ws.join("fit.toml");
    let out = ws.join(out);
    ccbym2(&["fit", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

/// Reads a CSV as maps keyed by header name.
fn csv_maps(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    csv::Reader::from_path(path).unwrap().deserialize().map(|r| r.unwrap()).collect()
}

fn num(row: &std::collections::HashMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|_| panic!("{key} = {:?}", row[key]))
}

fn printed(text: &str, key: &str) -> f64 {
    text.lines().find_map(|l| l.strip_prefix(key)).unwrap().trim().parse().unwrap()
}

#[test]
fn fit_writes_every_artifact_and_passes_the_gate() {
    let ws = workspace();
    let o = fit(ws.path(), "run");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("gate: pass"), "{}", stdout(&o));
    let run = ws.path().join("run");
    for f in ["chain_1.csv", "chain_4.csv", "summary.csv", "diagnostics.csv", "coefficients.csv", "residuals.csv", "manifest.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(csv_rows(&run.join("chain_1.csv")), 500);
    assert_eq!(csv_rows(&run.join("residuals.csv")), 9);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["details"]["n_obs"], 60);
    assert_eq!(m["details"]["dropped_rows"], 1);
    assert_eq!(m["details"]["large_areas"], serde_json::json!(["north", "south"]));
    assert_eq!(m["seed"], 11);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 8);
}

#[test]
fn reruns_with_the_same_seed_are_bitwise_identical() {
    let ws = workspace();
    assert_eq!(fit(ws.path(), "a").status.code(), Some(0));
    assert_eq!(fit(ws.path(), "b").status.code(), Some(0));
    for k in 1..=4 {
        let f = format!("chain_{k}.csv");
        assert_eq!(fs::read(ws.path().join("a").join(&f)).unwrap(), fs::read(ws.path().join("b").join(&f)).unwrap());
    }
}

#[test]
fn predict_ranks_profiles_and_rejects_tampered_draws() {
    let ws = workspace();
    assert_eq!(fit(ws.path(), "run").status.code(), Some(0));
    let cfg = ws.path().join("fit.toml");
    let run = ws.path().join("run");
    let pred = ws.path().join("pred");
    let args = ["predict", "--config", cfg.to_str().unwrap(), "--draws", run.to_str().unwrap(), "--out", pred.to_str().unwrap()];
    let o = ccbym2(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // 4 binary covariates x 10 ages
    assert_eq!(csv_rows(&pred.join("profiles.csv")), 160);
    assert_eq!(csv_rows(&pred.join("scenarios.csv")), 4);

    let rows = csv_maps(&pred.join("profiles.csv"));
    let inv_logit = |x: f64| 1.0 / (1.0 + (-x).exp());
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(num(r, "rank"), (k + 1) as f64);
        for (p, l) in [("probability", "log_odds"), ("probability_lower", "log_odds_lower"), ("probability_upper", "log_odds_upper")] {
            assert!((num(r, p) - inv_logit(num(r, l))).abs() < 1e-9, "{p} vs {l} in row {k}");
        }
        assert!(num(r, "probability_lower") <= num(r, "probability") && num(r, "probability") <= num(r, "probability_upper"));
        assert!(num(r, "relative_odds_lower") > 0.0 && num(r, "relative_odds_lower") <= num(r, "relative_odds_upper"));
    }
    let p: Vec<f64> = rows.iter().map(|r| num(r, "probability")).collect();
    assert!(p.windows(2).all(|w| w[0] >= w[1]), "profiles are not ranked");

    let chain = run.join("chain_2.csv");
    let mut text = fs::read_to_string(&chain).unwrap();
    let last = text.lines().last().unwrap().to_owned();
    text.push_str(&last);
    text.push('\n');
    fs::write(&chain, text).unwrap();
    let o = ccbym2(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("manifest mismatch"), "{}", stderr(&o));
}

#[test]
fn spatial_model_without_a_graph_is_a_config_error() {
    let ws = workspace();
    let text = fs::read_to_string(ws.path().join("fit.toml")).unwrap();
    let cut = text.replace("[graph]\npath = \"lattice.csv\"\n", "");
    fs::write(ws.path().join("fit.toml"), cut).unwrap();
    let o = fit(ws.path(), "run");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("graph"), "{}", stderr(&o));
    assert!(!ws.path().join("run").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let ws = workspace();
    let text = fs::read_to_string(ws.path().join("fit.toml")).unwrap();
    fs::write(ws.path().join("fit.toml"), text.replace("n_chains = 4", "n_chain = 4")).unwrap();
    assert_eq!(fit(ws.path(), "run").status.code(), Some(1));
}

#[test]
fn diagnose_reports_and_gates() {
    let ws = workspace();
    assert_eq!(fit(ws.path(), "run").status.code(), Some(0));
    let run = ws.path().join("run");
    let diag = ws.path().join("diag");
    let o = ccbym2(&["diagnose", "--draws", run.to_str().unwrap(), "--out", diag.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("4 chains x 500 draws"));
    assert_eq!(fs::read(diag.join("diagnostics.csv")).unwrap(), fs::read(run.join("diagnostics.csv")).unwrap());
    // every finite R-hat exceeds 0.5, so an absurd threshold must trip the gate
    let o = ccbym2(&["diagnose", "--draws", run.to_str().unwrap(), "--fail-rhat", "0.5", "--warn-rhat", "0.4"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn simulate_writes_tidy_rows() {
    let ws = workspace();
    let cfg = ws.path().join("study.toml");
    let out = ws.path().join("study");
    let o = ccbym2(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // 2 simulations x 2 models x 4 quantities
    assert_eq!(csv_rows(&out.join("study.csv")), 16);
    assert!(out.join("trend.csv").is_file() && out.join("manifest.json").is_file());

    // every trend row is the plain mean over matching study rows
    let study = csv_maps(&out.join("study.csv"));
    let trend = csv_maps(&out.join("trend.csv"));
    assert!(!trend.is_empty());
    for t in &trend {
        let (lo, hi) = (num(t, "pi_lower"), num(t, "pi_upper"));
        let sel: Vec<_> = study
            .iter()
            .filter(|r| r["model"] == t["model"] && r["quantity"] == t["quantity"] && (lo..=hi).contains(&num(r, "pi")))
            .collect();
        assert_eq!(sel.len() as f64, num(t, "n_sims"));
        let mean = |k: &str| sel.iter().map(|r| num(r, k)).sum::<f64>() / sel.len() as f64;
        assert!((mean("bias") - num(t, "mean_bias")).abs() < 1e-12);
        assert!((mean("rmse_paper") - num(t, "mean_rmse_paper")).abs() < 1e-12);
    }
    let covered: usize = trend.iter().map(|t| num(t, "n_sims") as usize).sum();
    assert_eq!(covered, study.len());

    let replay = ccbym2(&["simulate", "--config", cfg.to_str().unwrap(), "--replay", "1"]);
    assert_eq!(replay.status.code(), Some(0));
    let full = fs::read_to_string(out.join("study.csv")).unwrap();
    let replayed = stdout(&replay);
    let mut lines = replayed.lines();
    assert_eq!(lines.next(), full.lines().next());
    for line in lines {
        assert!(full.lines().any(|l| l == line), "replayed row not in the study: {line}");
    }
}

#[test]
fn graph_utilities() {
    let pair = fixtures().join("pair.csv");
    let o = ccbym2(&["graph", "scale", "--graph", pair.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let s: f64 = stdout(&o).trim().parse().unwrap();
    assert!((s - 0.25).abs() < 1e-12, "{s}");

    let o = ccbym2(&["graph", "check", "--graph", fixtures().join("lattice.csv").to_str().unwrap()]);
    assert_eq!(stdout(&o).trim(), "9 nodes, 12 edges, 1 component");
    let o = ccbym2(&["graph", "check", "--lattice", "3x3"]);
    assert_eq!(stdout(&o).trim(), "9 nodes, 12 edges, 1 component");

    let ws = tempfile::tempdir().unwrap();
    let values = ws.path().join("values.csv");
    fs::write(&values, "area,value\n1,1\n2,0\n3,1\n4,0\n5,1\n6,0\n7,1\n8,0\n9,1\n").unwrap();
    let o = ccbym2(&["graph", "moran", "--lattice", "3x3", "--values", values.to_str().unwrap(), "--permutations", "99"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    // a checkerboard on the 3x3 lattice puts unlike values on every edge
    assert!((printed(&text, "morans_i:") + 1.0).abs() < 1e-12, "{text}");
    assert!((printed(&text, "expected:") + 1.0 / 8.0).abs() < 1e-12, "{text}");
}

#[test]
fn moran_reads_the_residual_column_of_a_fit() {
    let ws = workspace();
    assert_eq!(fit(ws.path(), "run").status.code(), Some(0));
    let res = ws.path().join("run").join("residuals.csv");
    let graph = ws.path().join("lattice.csv");
    let o = ccbym2(&["graph", "moran", "--graph", graph.to_str().unwrap(), "--values", res.to_str().unwrap(), "--column", "residual"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);

    // Moran's I recomputed from the file with binary lattice weights
    let rows = csv_maps(&res);
    let vals: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| !r["residual"].is_empty())
        .map(|r| (r["area"].parse().unwrap(), num(r, "residual")))
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().map(|v| v.1).sum::<f64>() / n;
    let value = |a: usize| vals.iter().find(|v| v.0 == a).map(|v| v.1 - mean);
    let (mut cross, mut w) = (0.0, 0.0);
    for line in fs::read_to_string(&graph).unwrap().lines() {
        let (a, b) = line.split_once(',').unwrap();
        let (Ok(a), Ok(b)) = (a.trim().parse(), b.trim().parse()) else { continue };
        if let (Some(x), Some(y)) = (value(a), value(b)) {
            cross += 2.0 * x * y;
            w += 2.0;
        }
    }
    let ss: f64 = vals.iter().map(|v| (v.1 - mean).powi(2)).sum();
    let expect = n / w * cross / ss;
    assert!((printed(&text, "morans_i:") - expect).abs() < 1e-9, "{text} vs {expect}");
    assert!((printed(&text, "expected:") + 1.0 / (n - 1.0)).abs() < 1e-12, "{text}");
    assert_eq!(printed(&text, "areas:"), n);

    let o = ccbym2(&["graph", "moran", "--graph", graph.to_str().unwrap(), "--values", res.to_str().unwrap(), "--column", "nope"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(ccbym2(&["fit"]).status.code(), Some(1));
    assert_eq!(ccbym2(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(ccbym2(&["--help"]).status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_ccbym2"))
        .args(["graph", "check", "--lattice", "2x2"])
        .env("CCBYM2_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_data_file_is_a_config_error() {
    let ws = workspace();
    fs::remove_file(ws.path().join("survey.csv")).unwrap();
    let o = fit(ws.path(), "run");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not found"));
}
