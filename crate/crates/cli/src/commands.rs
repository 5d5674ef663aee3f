use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use heat::datagen::{GraphKind, GraphSpec, Synthetic};
use heat::ensemble::PrecisionEnsemble;
use heat::eval::{evaluate_matrices, run_experiment, ExperimentGrid, LossReport, Reductions};
use heat::io::{format_value, read_matrix, write_matrix};
use heat::protocol::{expected_scalars, simulate, suggest_rounds};
use heat::site::{LambdaRule, SiteDataset};
use heat::threshold::ThresholdRule;
use heat::Matrix;
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{BenchArgs, Cli, Command, EstimationArgs, EvalArgs, RoundsArgs, RunArgs, SynthArgs, Usage};

const MANIFEST_SCHEMA: &str = "heat-manifest-v1";

pub fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .context("building the worker pool")?;
    let threads = pool.current_num_threads();
    pool.install(|| match &cli.command {
        Command::Synth(a) => {
            apply_synth(&mut cfg, a);
            synth(&cfg, threads)
        }
        Command::Run(a) => {
            apply_run(&mut cfg, a);
            run(&cfg, threads, a.timings)
        }
        Command::Eval(a) => {
            apply_eval(&mut cfg, a);
            eval(&cfg, threads)
        }
        Command::Bench(a) => {
            apply_bench(&mut cfg, a);
            bench(&cfg, threads)
        }
        Command::Rounds(a) => rounds(a),
    })
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_synth(cfg: &mut RunConfig, a: &SynthArgs) {
    let s = &mut cfg.synth;
    set(&mut s.p, a.p);
    set(&mut s.sites, a.sites);
    set(&mut s.n0, a.n0);
    set(&mut s.hete_ratio, a.hete_ratio);
    set(&mut s.graph, a.graph);
    set(&mut s.degree, a.degree);
    set(&mut s.seed, a.seed);
    set(&mut cfg.paths.data, a.out.clone());
}

fn apply_estimation(cfg: &mut RunConfig, a: &EstimationArgs) {
    let e = &mut cfg.estimation;
    set(&mut e.rounds, a.rounds);
    set(&mut e.kappa, a.kappa);
    if let Some(c) = a.lambda_c {
        e.lambda = match e.lambda {
            LambdaRule::Scaled { .. } => LambdaRule::Scaled { c },
            LambdaRule::CrossValidated { folds, grid_points, .. } => LambdaRule::CrossValidated { c, folds, grid_points },
        };
    }
    if a.lambda_cv {
        let c = match e.lambda {
            LambdaRule::Scaled { c } | LambdaRule::CrossValidated { c, .. } => c,
        };
        e.lambda = LambdaRule::cross_validated(c);
    }
    if let Some(family) = a.rule {
        e.shrinkage.rule1 = ThresholdRule { family, ..e.shrinkage.rule1 };
        e.shrinkage.rule2 = ThresholdRule { family, ..e.shrinkage.rule2 };
    }
    set(&mut e.shrinkage.delta, a.delta);
    set(&mut e.shrinkage.level_scale, a.level_scale);
    e.tune |= a.tune;
}

fn apply_run(cfg: &mut RunConfig, a: &RunArgs) {
    set(&mut cfg.paths.data, a.data.clone());
    set(&mut cfg.paths.estimate, a.out.clone());
    set(&mut cfg.estimation.seed, a.seed);
    apply_estimation(cfg, &a.estimation);
}

fn apply_eval(cfg: &mut RunConfig, a: &EvalArgs) {
    set(&mut cfg.paths.estimate, a.estimate.clone());
    if a.truth.is_some() {
        cfg.paths.truth = a.truth.clone();
    }
    set(&mut cfg.eval.loss, a.loss);
    set(&mut cfg.eval.r, a.r);
    set(&mut cfg.paths.evaluation, a.out.clone());
}

fn apply_bench(cfg: &mut RunConfig, a: &BenchArgs) {
    let b = &mut cfg.bench;
    let list = |slot: &mut Vec<_>, v: &Vec<_>| {
        if !v.is_empty() {
            slot.clone_from(v);
        }
    };
    list(&mut b.n0, &a.n0);
    list(&mut b.p, &a.p);
    list(&mut b.sites, &a.sites);
    if !a.hete_ratio.is_empty() {
        b.hete_ratio.clone_from(&a.hete_ratio);
    }
    if !a.graph.is_empty() {
        b.graph.clone_from(&a.graph);
    }
    if !a.rule.is_empty() {
        b.rule.clone_from(&a.rule);
    }
    set(&mut b.rounds, a.rounds);
    set(&mut b.reps, a.reps);
    set(&mut b.seed, a.seed);
    b.baseline &= !a.no_baseline;
    set(&mut cfg.eval.loss, a.loss);
    set(&mut cfg.eval.r, a.r);
    set(&mut cfg.paths.bench, a.out.clone());
    let est = EstimationArgs {
        rounds: None,
        kappa: a.kappa,
        lambda_c: a.lambda_c,
        lambda_cv: false,
        rule: None,
        delta: None,
        level_scale: None,
        tune: a.tune,
    };
    apply_estimation(cfg, &est);
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| heat::Error::Io { path: dir.to_path_buf(), source: e })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| heat::Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn manifest(command: &str, cfg: &RunConfig, threads: usize, extra: Value) -> Value {
    let mut m = json!({
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "threads": threads,
        "config": cfg,
    });
    if let (Value::Object(base), Value::Object(more)) = (&mut m, extra) {
        base.extend(more);
    }
    m
}

fn write_mat(path: PathBuf, m: &Matrix) -> Result<()> {
    write_matrix(&path, m, None)?;
    Ok(())
}

fn synth(cfg: &RunConfig, threads: usize) -> Result<()> {
    let s = &cfg.synth;
    let spec = match s.graph {
        GraphKind::ErdosRenyi => GraphSpec::erdos_renyi(s.p, s.degree, s.hete_ratio, s.sites, s.seed),
        GraphKind::Banded => GraphSpec::banded(s.p, s.degree, s.hete_ratio, s.sites, s.seed),
    };
    let syn = Synthetic::generate(&spec, s.n0)?;
    let out = &cfg.paths.data;
    create_dir(out)?;
    let header: Vec<String> = (0..s.p).map(|j| format!("x{j}")).collect();
    for d in &syn.datasets {
        let m = d.site_id();
        write_matrix(out.join(format!("site_{m}.csv")), d.raw(), Some(&header))?;
        write_mat(out.join(format!("omega_{m}.csv")), syn.truth.omega(m))?;
    }
    let meta = manifest(
        "synth",
        cfg,
        threads,
        json!({
            "graph": spec,
            "sizes": syn.sizes,
            "weights": syn.truth.weights(),
            "s1": syn.profile.s1,
            "s2": syn.profile.s2,
        }),
    );
    write_json(&out.join("meta.json"), &meta)?;
    println!("wrote {} sites (p = {}, N = {}) to {}", s.sites, s.p, syn.sizes.iter().sum::<usize>(), out.display());
    Ok(())
}

/// `site_<m>.csv` files of `dir`, ordered by site id.
fn site_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| heat::Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.with_context(|| format!("listing {}", dir.display()))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(id) = name.strip_prefix("site_").and_then(|r| r.strip_suffix(".csv")).and_then(|r| r.parse().ok()) {
            out.push((id, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Usage(format!("{}: no site_<m>.csv files", dir.display())).into());
    }
    Ok(out)
}

fn run(cfg: &RunConfig, threads: usize, timings: bool) -> Result<()> {
    let files = site_files(&cfg.paths.data)?;
    let datasets = files
        .iter()
        .map(|(id, path)| SiteDataset::new(*id, read_matrix(path)?).with_context(|| format!("site file {}", path.display())))
        .collect::<Result<Vec<_>>>()?;
    let rounds = cfg.estimation.rounds;
    let sim = simulate(&datasets, rounds, &cfg.estimation.protocol())?;
    let out = &cfg.paths.estimate;
    create_dir(out)?;

    let final_est = sim.final_estimate();
    let ids = &final_est.site_ids;
    let local = out.join("round_0");
    create_dir(&local)?;
    for (id, omega) in ids.iter().zip(&sim.local_estimates) {
        write_mat(local.join(format!("omega_tilde_{id}.csv")), omega)?;
    }
    for est in &sim.estimates {
        let dir = out.join(format!("round_{}", est.round));
        create_dir(&dir)?;
        write_heat(&dir, est)?;
    }
    write_heat(out, final_est)?;
    sim.ledger.write_csv(out.join("ledger.csv"), timings)?;
    if timings {
        write_json(&out.join("timings.json"), &sim.ledger.phases)?;
    }

    let p = final_est.dim();
    let uploads_without_tuning = expected_scalars(ids.len(), p, rounds);
    let info = manifest(
        "run",
        cfg,
        threads,
        json!({
            "site_ids": ids,
            "counts": final_est.counts,
            "p": p,
            "rounds": rounds,
            "level_selection": level_selection(cfg),
            "level_scale": sim.level_scale,
            "tuning_scores": sim.tuning_scores,
            "total_scalars": sim.ledger.total_scalars(),
            "protocol_scalars": uploads_without_tuning,
            "data_files": files.iter().map(|(_, f)| f.display().to_string()).collect::<Vec<_>>(),
        }),
    );
    write_json(&out.join("manifest.json"), &info)?;
    info!("ledger: {} messages, {} scalars", sim.ledger.entries.len(), sim.ledger.total_scalars());
    println!("wrote {} rounds for {} sites to {}", rounds, ids.len(), out.display());
    Ok(())
}

/// Flags the held-out multiplier as a heuristic in every manifest.
fn level_selection(cfg: &RunConfig) -> &'static str {
    if cfg.estimation.tune {
        "heuristic: global multiplier chosen by held-out Gaussian likelihood"
    } else {
        "fixed constants"
    }
}

fn write_heat(dir: &Path, est: &heat::aggregate::HeatEstimate) -> Result<()> {
    write_mat(dir.join("gamma_hat.csv"), &est.gamma_hat)?;
    write_mat(dir.join("levels1.csv"), &est.levels1)?;
    write_mat(dir.join("levels2.csv"), &est.levels2)?;
    for (i, id) in est.site_ids.iter().enumerate() {
        write_mat(dir.join(format!("lambda_hat_{id}.csv")), &est.lambda_hats[i])?;
        write_mat(dir.join(format!("omega_tilde_{id}.csv")), &est.omega_tildes[i])?;
    }
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| heat::Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?)
}

fn usize_list(v: &Value, key: &str, path: &Path) -> Result<Vec<usize>> {
    v.get(key)
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(|x| x.as_u64().map(|u| u as usize)).collect())
        .ok_or_else(|| Usage(format!("{}: missing or malformed `{key}`", path.display())).into())
}

fn eval(cfg: &RunConfig, threads: usize) -> Result<()> {
    let est_dir = &cfg.paths.estimate;
    let manifest_path = est_dir.join("manifest.json");
    let run_manifest = read_json(&manifest_path)?;
    let ids = usize_list(&run_manifest, "site_ids", &manifest_path)?;
    let counts = usize_list(&run_manifest, "counts", &manifest_path)?;
    let rounds = run_manifest
        .get("rounds")
        .and_then(Value::as_u64)
        .ok_or_else(|| Usage(format!("{}: missing `rounds`", manifest_path.display())))? as usize;
    let truth_dir = cfg.paths.truth.clone().unwrap_or_else(|| cfg.paths.data.clone());
    let truth_mats = ids
        .iter()
        .map(|id| Ok(read_matrix(truth_dir.join(format!("omega_{id}.csv")))?))
        .collect::<Result<Vec<_>>>()?;
    let truth = PrecisionEnsemble::from_counts(truth_mats, &counts).context("truth ensemble")?;

    let mut series = Vec::with_capacity(rounds + 1);
    for t in 0..=rounds {
        let dir = est_dir.join(format!("round_{t}"));
        let mats = ids
            .iter()
            .map(|id| Ok(read_matrix(dir.join(format!("omega_tilde_{id}.csv")))?))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = mats.iter().collect();
        series.push(evaluate_matrices(&refs, &truth, cfg.eval.loss, cfg.eval.r)?);
    }
    let report = LossReport::from_reductions(cfg.eval.loss, cfg.eval.r, series.last().expect("rounds + 1 entries")).with_series(&series);

    let out = &cfg.paths.evaluation;
    create_dir(out)?;
    let mut csv = format!("t,method,{}\n", Reductions::NAMES.join(","));
    for (t, red) in series.iter().enumerate() {
        let method = match t {
            0 => "local",
            1 => "heat",
            _ => "iteheat",
        };
        let vals: Vec<String> = red.values().iter().map(|&v| format_value(v)).collect();
        csv.push_str(&format!("{t},{method},{}\n", vals.join(",")));
    }
    write_text(&out.join("losses.csv"), &csv)?;
    write_json(&out.join("report.json"), &report)?;
    let info = manifest("eval", cfg, threads, json!({ "truth": truth_dir, "rounds": rounds }));
    write_json(&out.join("manifest.json"), &info)?;
    let last = series.last().expect("nonempty");
    println!(
        "t = {rounds}: one = {:.6}, two = {:.6}, inf = {:.6}, frobenius_sq_over_p = {:.6}",
        last.one, last.two, last.inf, last.frobenius_sq_over_p
    );
    Ok(())
}

/// FNV-1a, used to key the cell cache on the full configuration.
fn fingerprint(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn bench(cfg: &RunConfig, threads: usize) -> Result<()> {
    let b = &cfg.bench;
    let grid = ExperimentGrid {
        n0: b.n0.clone(),
        p: b.p.clone(),
        sites: b.sites.clone(),
        hete_ratio: b.hete_ratio.clone(),
        graph: b.graph.clone(),
        rule: b.rule.clone(),
        rounds: b.rounds,
        target_degree: cfg.synth.degree,
        loss: cfg.eval.loss,
        r: cfg.eval.r,
        protocol: cfg.estimation.protocol(),
        baseline: b.baseline,
    };
    if !Reductions::NAMES.contains(&b.chart_statistic.as_str()) {
        return Err(Usage(format!("unknown chart statistic `{}`", b.chart_statistic)).into());
    }
    let out = &cfg.paths.bench;
    create_dir(out)?;
    let cache = out.join("cache").join(format!("{:016x}", fingerprint(&serde_json::to_string(&grid)?)));
    let results = run_experiment(&grid, b.reps, b.seed, Some(&cache))?;
    results.write_csv(out.join("results.csv"))?;
    write_text(&out.join("chart.svg"), &heat::chart::render_svg(&results, &b.chart_statistic))?;
    let failures: usize = results.cells.iter().map(|c| c.failures.len()).sum();
    let info = manifest(
        "bench",
        cfg,
        threads,
        json!({
            "cells": results.cells.len(),
            "failed_replications": failures,
            "summary": "median",
            "level_selection": level_selection(cfg),
        }),
    );
    write_json(&out.join("manifest.json"), &info)?;
    println!("wrote {} cells x {} replications to {}", results.cells.len(), b.reps, out.display());
    Ok(())
}

fn rounds(a: &RoundsArgs) -> Result<()> {
    let total = a.total.unwrap_or(a.sites * a.n);
    let t = suggest_rounds(a.sites, a.p, a.n, total, a.s0)?;
    println!("{t}");
    Ok(())
}
