use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn heat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heat")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = heat(args);
    assert!(out.status.success(), "heat {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).expect("readable")).expect("valid json")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn synth_run_eval_pipeline_has_consistent_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["synth", "--p", "12", "--M", "3", "--n0", "90", "--hete-ratio", "0", "--seed", "7", "--out", &p(t, "data")]);
    ok(&["run", "--data", &p(t, "data"), "--rounds", "3", "--out", &p(t, "est")]);
    let printed = ok(&["eval", "--estimate", &p(t, "est"), "--truth", &p(t, "data"), "--out", &p(t, "eval")]);
    assert!(printed.contains("frobenius_sq_over_p"));

    let meta = json(&t.join("data/meta.json"));
    let run = json(&t.join("est/manifest.json"));
    let eval = json(&t.join("eval/manifest.json"));
    assert_eq!(meta["command"], "synth");
    assert_eq!(run["command"], "run");
    assert_eq!(eval["command"], "eval");
    assert_eq!(meta["sizes"], run["counts"]);
    assert_eq!(run["config"]["estimation"]["rounds"], 3);
    assert_eq!(run["level_selection"], "fixed constants");
    assert_eq!(run["total_scalars"], run["protocol_scalars"]);

    for m in 0..3 {
        assert!(t.join(format!("data/site_{m}.csv")).exists());
        assert!(t.join(format!("data/omega_{m}.csv")).exists());
        assert!(t.join(format!("est/omega_tilde_{m}.csv")).exists());
        assert!(t.join(format!("est/lambda_hat_{m}.csv")).exists());
    }
    for r in 0..=3 {
        assert!(t.join(format!("est/round_{r}/omega_tilde_0.csv")).exists());
    }
    let losses = fs::read_to_string(t.join("eval/losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 5, "header plus t = 0..=3");
    let report = json(&t.join("eval/report.json"));
    assert_eq!(report["series"].as_array().unwrap().len(), 4);
}

#[test]
fn external_csvs_without_header_are_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["synth", "--p", "6", "--M", "2", "--n0", "60", "--seed", "1", "--out", &p(t, "syn")]);
    let ext = t.join("ext");
    fs::create_dir(&ext).unwrap();
    for m in 0..2 {
        let text = fs::read_to_string(t.join(format!("syn/site_{m}.csv"))).unwrap();
        let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        fs::write(ext.join(format!("site_{}.csv", m + 10)), body).unwrap();
    }
    ok(&["run", "--data", &ext.display().to_string(), "--rounds", "1", "--out", &p(t, "est")]);
    let run = json(&t.join("est/manifest.json"));
    assert_eq!(run["site_ids"], serde_json::json!([10, 11]));
    assert!(t.join("est/omega_tilde_11.csv").exists());
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["synth", "--p", "10", "--M", "3", "--n0", "70", "--hete-ratio", "0.5", "--seed", "5", "--out", &p(t, "data")]);
    for threads in ["1", "8"] {
        ok(&["run", "--data", &p(t, "data"), "--rounds", "2", "--kappa", "0.3", "--threads", threads, "--out", &p(t, &format!("e{threads}"))]);
    }
    for name in ["gamma_hat.csv", "omega_tilde_2.csv", "ledger.csv", "round_2/levels2.csv"] {
        assert_eq!(fs::read(t.join("e1").join(name)).unwrap(), fs::read(t.join("e8").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn missing_truth_file_exits_two_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["synth", "--p", "6", "--M", "2", "--n0", "50", "--out", &p(t, "data")]);
    ok(&["run", "--data", &p(t, "data"), "--rounds", "1", "--out", &p(t, "est")]);
    fs::remove_file(t.join("data/omega_1.csv")).unwrap();
    let out = heat(&["eval", "--estimate", &p(t, "est"), "--truth", &p(t, "data"), "--out", &p(t, "eval")]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("omega_1.csv"), "stderr: {err}");
}

#[test]
fn malformed_csv_reports_file_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    let mut rows = String::from("a,b\n");
    for i in 0..12 {
        rows.push_str(&format!("{i},{}\n", if i == 4 { "oops".into() } else { (i * 2).to_string() }));
    }
    fs::write(data.join("site_0.csv"), rows).unwrap();
    let out = heat(&["run", "--data", &data.display().to_string(), "--out", &p(tmp.path(), "est")]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("site_0.csv:6"), "stderr: {err}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(heat(&["synth", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(heat(&["eval", "--r", "3"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[synth]\nunknown = 1\n").unwrap();
    assert_eq!(heat(&["--config", &cfg.display().to_string(), "synth"]).status.code(), Some(2));
    let out = heat(&["synth", "--p", "5", "--degree", "9", "--out", &p(tmp.path(), "x")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn toml_config_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("study.toml");
    fs::write(&cfg, "[synth]\np = 8\nsites = 4\nn0 = 60\nseed = 3\n").unwrap();
    ok(&["--config", &cfg.display().to_string(), "synth", "--M", "2", "--out", &p(tmp.path(), "data")]);
    let meta = json(&tmp.path().join("data/meta.json"));
    assert_eq!(meta["config"]["synth"]["p"], 8);
    assert_eq!(meta["config"]["synth"]["sites"], 2);
    assert_eq!(meta["sizes"].as_array().unwrap().len(), 2);
}

#[test]
fn rounds_prints_the_suggested_count() {
    assert_eq!(ok(&["rounds", "--M", "5", "--p", "100", "--n", "400", "--s0", "5"]).trim(), "3");
    assert_eq!(heat(&["rounds", "--M", "5", "--p", "100", "--n", "40", "--s0", "50"]).status.code(), Some(2));
}

#[test]
fn bench_writes_results_chart_and_reuses_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let out = p(tmp.path(), "bench");
    let args = ["bench", "--n0", "60", "--p", "8", "--M", "2", "--hete-ratio", "0,1", "--reps", "3", "--rounds", "2", "--out", &out];
    ok(&args);
    let results = fs::read_to_string(tmp.path().join("bench/results.csv")).unwrap();
    assert!(results.starts_with("schema,"));
    // 2 cells x 4 statistics x (3 rounds + pooled oracle), plus the header.
    assert_eq!(results.lines().count(), 1 + 2 * 4 * 4);
    let svg = fs::read_to_string(tmp.path().join("bench/chart.svg")).unwrap();
    assert!(svg.contains("M = 2, p = 8"));
    let before = results.clone();
    ok(&args);
    assert_eq!(fs::read_to_string(tmp.path().join("bench/results.csv")).unwrap(), before);
}

#[test]
fn run_accepts_every_synth_output() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cases = [("4", "1", "30", "0", "er"), ("9", "4", "45", "1", "banded"), ("15", "2", "200", "0.5", "er"), ("3", "6", "25", "0.25", "banded")];
    for (i, (pp, m, n0, h, g)) in cases.iter().enumerate() {
        let data = p(t, &format!("d{i}"));
        let seed = i.to_string();
        ok(&["synth", "--p", pp, "--M", m, "--n0", n0, "--hete-ratio", h, "--graph", g, "--degree", "1", "--seed", &seed, "--out", &data]);
        for kappa in ["0", "0.4"] {
            let est = p(t, &format!("e{i}_{kappa}"));
            ok(&["run", "--data", &data, "--rounds", "2", "--kappa", kappa, "--out", &est]);
            ok(&["eval", "--estimate", &est, "--truth", &data, "--out", &p(t, &format!("v{i}_{kappa}"))]);
        }
    }
}
