//! Integrative losses, the pooled-data baseline and the replicated
//! experiment harness.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::HeatEstimate;
use crate::datagen::{GraphKind, GraphSpec, Synthetic};
use crate::ensemble::{classify_entry, EntryClass, PrecisionEnsemble};
use crate::error::{Error, Result};
use crate::lasso::LassoConfig;
use crate::matrix::{matrix_norm, Matrix, NormKind};
use crate::norms::weighted_l2_unchecked;
use crate::protocol::{simulate, ProtocolConfig};
use crate::seed::{self, stream};
use crate::site::{fit_nodewise, LambdaRule, SiteDataset};
use crate::threshold::{ThresholdFamily, ThresholdRule};

pub const RESULTS_SCHEMA: &str = "heat-results-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Weighted ℓ₁ norm of the site deviations, to the power r.
    L1,
    /// Weighted ℓ₂ norm of the site deviations, to the power r.
    L2,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "l1r" => Ok(LossKind::L1),
            "l2" | "l2r" => Ok(LossKind::L2),
            other => Err(Error::invalid(format!("unknown loss kind `{other}` (expected l1 or l2)"))),
        }
    }
}

fn check_r(r: f64) -> Result<()> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::invalid(format!("loss power r = {r} must be finite and ≥ 1")));
    }
    Ok(())
}

/// Loss matrix between estimates and an ensemble; weights come from `truth`.
/// Estimates need not be symmetric.
pub fn loss_matrix_of(est: &[&Matrix], truth: &PrecisionEnsemble, kind: LossKind, r: f64) -> Result<Matrix> {
    check_r(r)?;
    if est.len() != truth.sites() {
        return Err(Error::dim(format!("{} estimates for {} sites", est.len(), truth.sites())));
    }
    let p = truth.dim();
    if let Some(bad) = est.iter().find(|m| m.shape() != (p, p)) {
        return Err(Error::dim(format!("estimate is {:?}, expected {p}x{p}", bad.shape())));
    }
    let w = truth.weights();
    Ok(Matrix::from_fn(p, p, |j, k| {
        let dev: Vec<f64> = est.iter().zip(truth.omegas()).map(|(e, t)| e[(j, k)] - t[(j, k)]).collect();
        let norm = match kind {
            LossKind::L1 => dev.iter().zip(w).map(|(d, w)| w * d.abs()).sum(),
            LossKind::L2 => weighted_l2_unchecked(&dev, w),
        };
        if r == 1.0 {
            norm
        } else {
            norm.powf(r)
        }
    }))
}

/// Entry `(j,k)` is `‖Aⱼₖ⁽·⁾ − Bⱼₖ⁽·⁾‖ʳ` under the shared site weights.
pub fn loss_matrix(est: &PrecisionEnsemble, truth: &PrecisionEnsemble, kind: LossKind, r: f64) -> Result<Matrix> {
    if est.sites() != truth.sites() || est.dim() != truth.dim() {
        return Err(Error::dim(format!(
            "estimate has {} sites of dimension {}, truth has {} of {}",
            est.sites(),
            est.dim(),
            truth.sites(),
            truth.dim()
        )));
    }
    if est.weights().iter().zip(truth.weights()).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(Error::invalid("estimate and truth carry different site weights"));
    }
    let refs: Vec<&Matrix> = est.omegas().iter().collect();
    loss_matrix_of(&refs, truth, kind, r)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub one: f64,
    pub two: f64,
    pub inf: f64,
    pub frobenius_sq_over_p: f64,
}

impl Reductions {
    pub const NAMES: [&'static str; 4] = ["one", "two", "inf", "frobenius_sq_over_p"];

    pub fn of(loss: &Matrix) -> Result<Self> {
        let fro = matrix_norm(loss, NormKind::Frobenius)?;
        Ok(Reductions {
            one: matrix_norm(loss, NormKind::One)?,
            two: matrix_norm(loss, NormKind::Two)?,
            inf: matrix_norm(loss, NormKind::Inf)?,
            frobenius_sq_over_p: fro * fro / loss.rows() as f64,
        })
    }

    pub fn values(&self) -> [f64; 4] {
        [self.one, self.two, self.inf, self.frobenius_sq_over_p]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| self.values()[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kind: LossKind,
    pub r: f64,
    pub reductions: BTreeMap<String, f64>,
    /// Per-round reductions, `t = 0, 1, …`, for iterative runs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub series: Vec<BTreeMap<String, f64>>,
    #[serde(default)]
    pub oracle: bool,
}

fn reduction_map(r: &Reductions) -> BTreeMap<String, f64> {
    Reductions::NAMES.iter().map(|n| n.to_string()).zip(r.values()).collect()
}

impl LossReport {
    pub fn from_reductions(kind: LossKind, r: f64, red: &Reductions) -> Self {
        LossReport {
            kind,
            r,
            reductions: reduction_map(red),
            series: Vec::new(),
            oracle: false,
        }
    }

    pub fn with_series(mut self, series: &[Reductions]) -> Self {
        self.series = series.iter().map(reduction_map).collect();
        self
    }
}

pub fn evaluate(est: &PrecisionEnsemble, truth: &PrecisionEnsemble, kind: LossKind, r: f64) -> Result<LossReport> {
    let red = Reductions::of(&loss_matrix(est, truth, kind, r)?)?;
    Ok(LossReport::from_reductions(kind, r, &red))
}

/// Reductions for a list of site estimates (possibly asymmetric).
pub fn evaluate_matrices(est: &[&Matrix], truth: &PrecisionEnsemble, kind: LossKind, r: f64) -> Result<Reductions> {
    Reductions::of(&loss_matrix_of(est, truth, kind, r)?)
}

/// Node-wise Lasso on the concatenated rows of every site, replicated per
/// site with weights `nₘ/N`. Needs raw data, so it is an oracle comparator.
pub fn pooled_baseline(datasets: &[SiteDataset], lambda: &LambdaRule, lasso: &LassoConfig, seed: u64) -> Result<PrecisionEnsemble> {
    let first = datasets.first().ok_or_else(|| Error::invalid("at least one dataset is required"))?;
    let p = first.p();
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    let mut ordered: Vec<&SiteDataset> = datasets.iter().collect();
    ordered.sort_by_key(|d| d.site_id());
    for d in &ordered {
        if d.p() != p {
            return Err(Error::dim(format!("site {} has {} columns, expected {p}", d.site_id(), d.p())));
        }
        rows.extend_from_slice(d.raw().as_slice());
        counts.push(d.n());
    }
    let total: usize = counts.iter().sum();
    let pooled = SiteDataset::new(0, Matrix::from_vec(total, p, rows)?)?;
    let penalties = lambda.penalties(&pooled, lasso, seed)?;
    let fit = fit_nodewise(&pooled, &penalties, lasso)?;
    PrecisionEnsemble::from_counts(vec![fit.omega_hat; ordered.len()], &counts)
}

/// Support recovery of the heterogeneous part over off-diagonal pairs
/// `j < k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupportScore {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

impl SupportScore {
    /// `2TP / (2TP + FP + FN)`; 1 when both supports are empty.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.true_positive + self.false_positive + self.false_negative;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.true_positive as f64 / denom as f64
        }
    }
}

pub fn heterogeneity_support(est: &HeatEstimate, truth: &PrecisionEnsemble) -> SupportScore {
    let p = truth.dim();
    let mut s = SupportScore::default();
    for j in 0..p {
        for k in j + 1..p {
            let truly = classify_entry(&truth.entry_vector(j, k), 0.0) == EntryClass::Heterogeneous;
            let found = est.lambda_hats.iter().any(|l| l[(j, k)] != 0.0);
            match (truly, found) {
                (true, true) => s.true_positive += 1,
                (false, true) => s.false_positive += 1,
                (true, false) => s.false_negative += 1,
                (false, false) => {}
            }
        }
    }
    s
}

/// Fraction of all `Λ̂⁽ᵐ⁾ⱼₖ` entries that are exactly zero.
pub fn zero_deviation_fraction(est: &HeatEstimate) -> f64 {
    let total: usize = est.lambda_hats.iter().map(|l| l.as_slice().len()).sum();
    let zeros: usize = est
        .lambda_hats
        .iter()
        .map(|l| l.as_slice().iter().filter(|&&v| v == 0.0).count())
        .sum();
    zeros as f64 / total as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Summary {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and quartiles; `None` for an empty sample. Order-independent.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Summary {
        median: quantile(&v, 0.5),
        q1: quantile(&v, 0.25),
        q3: quantile(&v, 0.75),
    })
}

/// One point of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n0: usize,
    pub p: usize,
    pub sites: usize,
    pub hete_ratio: f64,
    pub graph: GraphKind,
    pub rule: ThresholdFamily,
}

impl Cell {
    /// File-name-safe identifier.
    pub fn key(&self) -> String {
        format!(
            "n{}_p{}_m{}_h{}_{}_{}",
            self.n0,
            self.p,
            self.sites,
            format!("{}", self.hete_ratio).replace('.', "p"),
            self.graph,
            self.rule
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub n0: Vec<usize>,
    pub p: Vec<usize>,
    pub sites: Vec<usize>,
    pub hete_ratio: Vec<f64>,
    pub graph: Vec<GraphKind>,
    pub rule: Vec<ThresholdFamily>,
    pub rounds: usize,
    /// ER expected degree or bandwidth.
    pub target_degree: usize,
    pub loss: LossKind,
    pub r: f64,
    /// Everything but the threshold family and seed.
    pub protocol: ProtocolConfig,
    pub baseline: bool,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            n0: vec![400],
            p: vec![100],
            sites: vec![5],
            hete_ratio: vec![0.0],
            graph: vec![GraphKind::ErdosRenyi],
            rule: vec![ThresholdFamily::Scad],
            rounds: 3,
            target_degree: 3,
            loss: LossKind::L1,
            r: 1.0,
            protocol: ProtocolConfig::default(),
            baseline: true,
        }
    }
}

impl ExperimentGrid {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &n0 in &self.n0 {
            for &p in &self.p {
                for &sites in &self.sites {
                    for &hete_ratio in &self.hete_ratio {
                        for &graph in &self.graph {
                            for &rule in &self.rule {
                                out.push(Cell { n0, p, sites, hete_ratio, graph, rule });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.cells().is_empty() {
            return Err(Error::invalid("experiment grid is empty"));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("at least one round is required"));
        }
        check_r(self.r)
    }
}

/// Per-replication losses: the round series `t = 0..=T` and the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub series: Vec<Reductions>,
    pub baseline: Option<Reductions>,
    pub heterogeneity_f1: f64,
}

/// Runs one replication of one cell with data seed `seed`.
pub fn run_replication(cell: &Cell, grid: &ExperimentGrid, rep: usize, seed: u64) -> Result<Replication> {
    let spec = GraphSpec {
        kind: cell.graph,
        ..GraphSpec::erdos_renyi(cell.p, grid.target_degree, cell.hete_ratio, cell.sites, seed)
    };
    let syn = Synthetic::generate(&spec, cell.n0)?;
    let mut cfg = grid.protocol.clone();
    cfg.seed = seed;
    let rule = ThresholdRule {
        family: cell.rule,
        ..cfg.shrinkage.rule1
    };
    cfg.shrinkage.rule1 = rule;
    cfg.shrinkage.rule2 = ThresholdRule {
        family: cell.rule,
        ..cfg.shrinkage.rule2
    };
    let sim = simulate(&syn.datasets, grid.rounds, &cfg)?;
    let local: Vec<&Matrix> = sim.local_estimates.iter().collect();
    let mut series = vec![evaluate_matrices(&local, &syn.truth, grid.loss, grid.r)?];
    for est in &sim.estimates {
        let refs: Vec<&Matrix> = est.omega_tildes.iter().collect();
        series.push(evaluate_matrices(&refs, &syn.truth, grid.loss, grid.r)?);
    }
    let baseline = if grid.baseline {
        let pooled = pooled_baseline(&syn.datasets, &cfg.lambda, &cfg.lasso, seed)?;
        Some(Reductions::of(&loss_matrix(&pooled, &syn.truth, grid.loss, grid.r)?)?)
    } else {
        None
    };
    Ok(Replication {
        rep,
        series,
        baseline,
        heterogeneity_f1: heterogeneity_support(sim.final_estimate(), &syn.truth).f1(),
    })
}

/// Data seed of replication `rep`; shared by every cell so cells are
/// compared on common random numbers.
pub fn replication_seed(seed: u64, rep: usize) -> u64 {
    seed::derive(seed::derive(seed, stream::REPLICATION), rep as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: Cell,
    pub replications: Vec<Replication>,
    pub failures: Vec<(usize, String)>,
}

impl CellOutcome {
    /// Values of `stat` at round `t` over successful replications.
    pub fn round_values(&self, t: usize, stat: &str) -> Vec<f64> {
        self.replications
            .iter()
            .filter_map(|r| r.series.get(t).and_then(|s| s.get(stat)))
            .collect()
    }

    pub fn baseline_values(&self, stat: &str) -> Vec<f64> {
        self.replications
            .iter()
            .filter_map(|r| r.baseline.and_then(|b| b.get(stat)))
            .collect()
    }
}

/// A row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema: String,
    pub n0: usize,
    pub p: usize,
    pub sites: usize,
    pub hete_ratio: f64,
    pub graph: GraphKind,
    pub rule: ThresholdFamily,
    pub method: String,
    pub t: usize,
    pub loss: LossKind,
    pub r: f64,
    pub statistic: String,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub reps_ok: usize,
    pub reps_failed: usize,
}

fn method_name(t: usize) -> &'static str {
    match t {
        0 => "local",
        1 => "heat",
        _ => "iteheat",
    }
}

impl ExperimentResults {
    pub fn rows(&self) -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for c in &self.cells {
            let base = |method: &str, t: usize, stat: &str, values: &[f64]| {
                let s = summarize(values).unwrap_or(Summary {
                    median: f64::NAN,
                    q1: f64::NAN,
                    q3: f64::NAN,
                });
                ResultRow {
                    schema: RESULTS_SCHEMA.to_string(),
                    n0: c.cell.n0,
                    p: c.cell.p,
                    sites: c.cell.sites,
                    hete_ratio: c.cell.hete_ratio,
                    graph: c.cell.graph,
                    rule: c.cell.rule,
                    method: method.to_string(),
                    t,
                    loss: self.loss,
                    r: self.r,
                    statistic: stat.to_string(),
                    median: s.median,
                    q1: s.q1,
                    q3: s.q3,
                    iqr: s.iqr(),
                    reps_ok: values.len(),
                    reps_failed: c.failures.len(),
                }
            };
            for stat in Reductions::NAMES {
                for t in 0..=self.rounds {
                    rows.push(base(method_name(t), t, stat, &c.round_values(t, stat)));
                }
                if self.baseline {
                    rows.push(base("pooled_oracle", 0, stat, &c.baseline_values(stat)));
                }
            }
        }
        rows
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for row in self.rows() {
            w.serialize(CsvRow::from(&row)).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Text form with fixed float formatting so files are byte-stable.
#[derive(Serialize)]
struct CsvRow {
    schema: String,
    n0: usize,
    p: usize,
    sites: usize,
    hete_ratio: f64,
    graph: String,
    rule: String,
    method: String,
    t: usize,
    loss: String,
    r: f64,
    statistic: String,
    median: String,
    q1: String,
    q3: String,
    iqr: String,
    reps_ok: usize,
    reps_failed: usize,
}

impl From<&ResultRow> for CsvRow {
    fn from(r: &ResultRow) -> Self {
        let f = crate::io::format_value;
        CsvRow {
            schema: r.schema.clone(),
            n0: r.n0,
            p: r.p,
            sites: r.sites,
            hete_ratio: r.hete_ratio,
            graph: r.graph.to_string(),
            rule: r.rule.to_string(),
            method: r.method.clone(),
            t: r.t,
            loss: r.loss.to_string(),
            r: r.r,
            statistic: r.statistic.clone(),
            median: f(r.median),
            q1: f(r.q1),
            q3: f(r.q3),
            iqr: f(r.iqr),
            reps_ok: r.reps_ok,
            reps_failed: r.reps_failed,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub cells: Vec<CellOutcome>,
    pub rounds: usize,
    pub loss: LossKind,
    pub r: f64,
    pub baseline: bool,
    pub replications: usize,
    pub seed: u64,
}

/// Runs every cell of `grid` for `replications` replications. With a cache
/// directory, finished cells are stored as JSON and reused on rerun.
pub fn run_experiment(grid: &ExperimentGrid, replications: usize, seed: u64, cache: Option<&Path>) -> Result<ExperimentResults> {
    grid.validate()?;
    if replications == 0 {
        return Err(Error::invalid("at least one replication is required"));
    }
    if let Some(dir) = cache {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut cells = Vec::new();
    for cell in grid.cells() {
        let cached = cache.map(|d| cell_path(d, &cell, replications, seed));
        if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
            if let Some(outcome) = load_cell(path, &cell) {
                info!("reusing cached cell {}", cell.key());
                cells.push(outcome);
                continue;
            }
        }
        let results: Vec<(usize, Result<Replication>)> = (0..replications)
            .into_par_iter()
            .map(|rep| (rep, run_replication(&cell, grid, rep, replication_seed(seed, rep))))
            .collect();
        let mut outcome = CellOutcome {
            cell,
            replications: Vec::new(),
            failures: Vec::new(),
        };
        for (rep, r) in results {
            match r {
                Ok(rep_out) => outcome.replications.push(rep_out),
                Err(e) => {
                    warn!("cell {} replication {rep} failed: {e}", cell.key());
                    outcome.failures.push((rep, e.to_string()));
                }
            }
        }
        if let Some(path) = cached {
            let text = serde_json::to_string(&outcome).map_err(|e| Error::invalid(e.to_string()))?;
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        cells.push(outcome);
    }
    Ok(ExperimentResults {
        cells,
        rounds: grid.rounds,
        loss: grid.loss,
        r: grid.r,
        baseline: grid.baseline,
        replications,
        seed,
    })
}

fn cell_path(dir: &Path, cell: &Cell, reps: usize, seed: u64) -> PathBuf {
    dir.join(format!("{}_r{}_s{}.json", cell.key(), reps, seed))
}

fn load_cell(path: &Path, cell: &Cell) -> Option<CellOutcome> {
    let text = fs::read_to_string(path).ok()?;
    let outcome: CellOutcome = serde_json::from_str(&text).ok()?;
    (outcome.cell == *cell).then_some(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ens(mats: Vec<Matrix>, w: Vec<f64>) -> PrecisionEnsemble {
        PrecisionEnsemble::new(mats, w).unwrap()
    }

    #[test]
    fn identical_inputs_have_zero_loss() {
        let a = ens(vec![Matrix::identity(3), Matrix::identity(3).scale(2.0)], vec![0.4, 0.6]);
        for kind in [LossKind::L1, LossKind::L2] {
            let rep = evaluate(&a, &a, kind, 1.0).unwrap();
            assert!(rep.reductions.values().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn opposite_deviation_example() {
        let d = 0.3;
        let truth = ens(vec![Matrix::zeros(2, 2), Matrix::zeros(2, 2)], vec![0.5, 0.5]);
        let mut a = Matrix::zeros(2, 2);
        a[(0, 1)] = d;
        a[(1, 0)] = d;
        let est = ens(vec![a.clone(), a.scale(-1.0)], vec![0.5, 0.5]);
        let l1 = loss_matrix(&est, &truth, LossKind::L1, 1.0).unwrap();
        let l2 = loss_matrix(&est, &truth, LossKind::L2, 1.0).unwrap();
        assert!((l1[(0, 1)] - d).abs() < 1e-15);
        assert!((l2[(0, 1)] - d).abs() < 1e-15);
    }

    #[test]
    fn power_law_single_site() {
        let truth = ens(vec![Matrix::identity(3)], vec![1.0]);
        let est = ens(vec![Matrix::from_fn(3, 3, |j, k| if j == k { 1.5 } else { 0.2 })], vec![1.0]);
        let l1 = loss_matrix(&est, &truth, LossKind::L1, 1.0).unwrap();
        let l2 = loss_matrix(&est, &truth, LossKind::L1, 2.0).unwrap();
        for (a, b) in l1.as_slice().iter().zip(l2.as_slice()) {
            assert!((a * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_entry_norms() {
        let d = 0.7;
        let p = 4;
        let truth = ens(vec![Matrix::zeros(p, p)], vec![1.0]);
        let mut a = Matrix::zeros(p, p);
        a[(0, 1)] = d;
        let rep = evaluate_matrices(&[&a], &truth, LossKind::L1, 1.0).unwrap();
        assert!((rep.one - d).abs() < 1e-15);
        assert!((rep.inf - d).abs() < 1e-15);
        assert!((rep.frobenius_sq_over_p - d * d / p as f64).abs() < 1e-15);
    }

    #[test]
    fn mismatched_weights_rejected() {
        let a = ens(vec![Matrix::identity(2), Matrix::identity(2)], vec![0.5, 0.5]);
        let b = ens(vec![Matrix::identity(2), Matrix::identity(2)], vec![0.3, 0.7]);
        assert!(loss_matrix(&a, &b, LossKind::L1, 1.0).unwrap_err().is_validation());
        assert!(loss_matrix(&a, &a, LossKind::L1, 0.5).is_err());
    }

    #[test]
    fn quartiles_are_order_independent() {
        let s = summarize(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (2.0, 3.0, 4.0));
        assert_eq!(summarize(&[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap(), s);
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn f1_edge_cases() {
        assert_eq!(SupportScore::default().f1(), 1.0);
        let s = SupportScore { true_positive: 3, false_positive: 1, false_negative: 1 };
        assert!((s.f1() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn grid_cross_product_and_rows() {
        let grid = ExperimentGrid {
            n0: vec![60],
            p: vec![5, 6],
            sites: vec![2],
            hete_ratio: vec![0.0, 0.5],
            rounds: 2,
            target_degree: 1,
            ..Default::default()
        };
        assert_eq!(grid.cells().len(), 4);
        let res = run_experiment(&grid, 1, 3, None).unwrap();
        let rows = res.rows();
        for stat in Reductions::NAMES {
            let per: Vec<_> = rows.iter().filter(|r| r.statistic == stat && r.t == 2).collect();
            assert_eq!(per.len(), 4);
        }
        assert!(res.cells.iter().all(|c| c.replications[0].series.len() == 3));
        let again = run_experiment(&grid, 1, 3, None).unwrap();
        assert_eq!(res, again);
    }

    #[test]
    fn cache_is_reused() {
        let dir = tempfile::tempdir().unwrap();
        let grid = ExperimentGrid {
            n0: vec![60],
            p: vec![5],
            sites: vec![2],
            rounds: 1,
            target_degree: 1,
            ..Default::default()
        };
        let a = run_experiment(&grid, 2, 1, Some(dir.path())).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        let b = run_experiment(&grid, 2, 1, Some(dir.path())).unwrap();
        assert_eq!(a, b);
    }
}
