//! Everything a site computes from its own rows: node-wise regressions, the
//! regularized and debiased precision estimates, influence-function
//! variances, and the split fits used by the iterative refinement.
//!
//! Nothing here leaves the site except a [`LocalSummary`].

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lasso::{solve_gram, GramProblem, LassoConfig};
use crate::matrix::{dot, Matrix};
use crate::seed;

/// Smallest sample size a site (or a split subset) may have.
pub const MIN_SITE_SAMPLES: usize = 10;
/// Floor on `X̌ⱼᵀ(X̌ⱼ − X̌₋ⱼγ̂ⱼ) / n` before inverting it.
pub const DENOMINATOR_FLOOR: f64 = 1e-10;
pub const DEFAULT_LAMBDA_SCALE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SiteDataset {
    site_id: usize,
    raw: Matrix,
}

impl SiteDataset {
    pub fn new(site_id: usize, raw: Matrix) -> Result<Self> {
        if raw.rows() < MIN_SITE_SAMPLES {
            return Err(Error::invalid(format!(
                "site {site_id} has {} samples, need at least {MIN_SITE_SAMPLES}",
                raw.rows()
            )));
        }
        if raw.cols() < 2 {
            return Err(Error::invalid(format!(
                "site {site_id} has {} variables, need at least 2",
                raw.cols()
            )));
        }
        if !raw.is_finite() {
            return Err(Error::invalid(format!("site {site_id} data has non-finite values")));
        }
        Ok(SiteDataset { site_id, raw })
    }

    pub fn site_id(&self) -> usize {
        self.site_id
    }

    pub fn raw(&self) -> &Matrix {
        &self.raw
    }

    pub fn n(&self) -> usize {
        self.raw.rows()
    }

    pub fn p(&self) -> usize {
        self.raw.cols()
    }

    pub fn with_site_id(mut self, site_id: usize) -> Self {
        self.site_id = site_id;
        self
    }
}

/// How the node-wise penalties `λⱼ` are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaRule {
    /// `λⱼ = c·√(log p / n)` for every column.
    Scaled { c: f64 },
    /// Per-column K-fold cross-validation over a geometric grid of scales
    /// from `c/4` to `4c`.
    CrossValidated { c: f64, folds: usize, grid_points: usize },
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::Scaled {
            c: DEFAULT_LAMBDA_SCALE,
        }
    }
}

pub fn scaled_penalty(c: f64, p: usize, n: usize) -> f64 {
    c * ((p as f64).ln() / n as f64).sqrt()
}

impl LambdaRule {
    pub fn cross_validated(c: f64) -> Self {
        LambdaRule::CrossValidated {
            c,
            folds: 5,
            grid_points: 10,
        }
    }

    fn validate(&self) -> Result<()> {
        let c = match *self {
            LambdaRule::Scaled { c } => c,
            LambdaRule::CrossValidated { c, folds, grid_points } => {
                if folds < 2 || grid_points < 1 {
                    return Err(Error::invalid("cross-validation needs ≥ 2 folds and ≥ 1 grid point"));
                }
                c
            }
        };
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::invalid(format!("lambda scale {c} must be positive")));
        }
        Ok(())
    }

    /// One penalty per column for this dataset.
    pub fn penalties(&self, data: &SiteDataset, cfg: &LassoConfig, seed: u64) -> Result<Vec<f64>> {
        self.validate()?;
        let (n, p) = (data.n(), data.p());
        match *self {
            LambdaRule::Scaled { c } => Ok(vec![scaled_penalty(c, p, n); p]),
            LambdaRule::CrossValidated { c, folds, grid_points } => {
                cross_validate(data, c, folds, grid_points, cfg, seed)
            }
        }
    }
}

fn cv_grid(c: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![c];
    }
    // descending, so warm starts move from sparse to dense
    (0..points)
        .map(|i| c * 4f64.powf(1.0 - 2.0 * i as f64 / (points - 1) as f64))
        .collect()
}

fn cross_validate(
    data: &SiteDataset,
    c: f64,
    folds: usize,
    grid_points: usize,
    cfg: &LassoConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let (n, p) = (data.n(), data.p());
    if n / folds < 2 {
        return Err(Error::invalid(format!(
            "{n} samples cannot be split into {folds} folds"
        )));
    }
    let order = permutation(n, seed);
    let grid = cv_grid(c, grid_points);
    let mut errors = vec![vec![0.0; grid.len()]; p];
    for f in 0..folds {
        let test: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
        let mut train: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
        train.sort_unstable();
        let (xt, means) = data.raw.select_rows(&train).centered();
        let sigma = xt.scaled_gram();
        let test_rows = data.raw.select_rows(&test);
        let fold_err: Vec<Vec<f64>> = (0..p)
            .into_par_iter()
            .map(|j| -> Result<Vec<f64>> {
                let mut problem = nodewise_problem(&sigma, j, 0.0);
                let mut warm: Option<Vec<f64>> = None;
                let mut out = Vec::with_capacity(grid.len());
                for &cg in &grid {
                    problem.penalty = scaled_penalty(cg, p, train.len());
                    let sol = solve_gram(&problem, cfg, warm.as_deref())?;
                    let mut err = 0.0;
                    for i in 0..test_rows.rows() {
                        let row = test_rows.row(i);
                        let mut pred = 0.0;
                        for (b, k) in (0..p).filter(|&k| k != j).enumerate() {
                            pred += (row[k] - means[k]) * sol.coefficients[b];
                        }
                        let r = row[j] - means[j] - pred;
                        err += r * r;
                    }
                    out.push(err);
                    warm = Some(sol.coefficients);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        for (acc, e) in errors.iter_mut().zip(fold_err) {
            for (a, b) in acc.iter_mut().zip(e) {
                *a += b;
            }
        }
    }
    Ok(errors
        .iter()
        .map(|e| {
            let best = e
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map_or(0, |(i, _)| i);
            scaled_penalty(grid[best], p, n)
        })
        .collect())
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    idx
}

/// Gram form of the regression of column `j` on the others.
fn nodewise_problem(sigma: &Matrix, j: usize, penalty: f64) -> GramProblem {
    let p = sigma.rows();
    let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
    GramProblem {
        gram: Matrix::from_fn(p - 1, p - 1, |a, b| sigma[(others[a], others[b])]),
        xty: others.iter().map(|&k| sigma[(k, j)]).collect(),
        yty: sigma[(j, j)],
        penalty,
    }
}

/// Output of the node-wise regressions on one block of rows.
#[derive(Clone, Debug)]
pub struct NodewiseFit {
    /// `X̌`, the column-centered rows.
    pub centered: Matrix,
    pub means: Vec<f64>,
    /// `Σ̂ = X̌ᵀX̌ / n`.
    pub sample_cov: Matrix,
    /// `γ̂ⱼ`, each of length p − 1.
    pub gammas: Vec<Vec<f64>>,
    /// `ε̂ᵢⱼ = X̌ᵢⱼ − X̌ᵢ,₋ⱼ γ̂ⱼ`, n × p.
    pub residuals: Matrix,
    /// `Ω̂`, not symmetric in general.
    pub omega_hat: Matrix,
    pub penalties: Vec<f64>,
    /// Columns whose diagonal denominator hit [`DENOMINATOR_FLOOR`].
    pub floored_columns: Vec<usize>,
    /// Columns whose Lasso did not certify convergence.
    pub unconverged_columns: Vec<usize>,
}

impl NodewiseFit {
    pub fn n(&self) -> usize {
        self.centered.rows()
    }

    pub fn p(&self) -> usize {
        self.centered.cols()
    }
}

/// Node-wise Lasso on a dataset with one penalty per column.
pub fn fit_nodewise(dataset: &SiteDataset, penalties: &[f64], cfg: &LassoConfig) -> Result<NodewiseFit> {
    fit_rows(dataset.raw(), penalties, cfg)
}

fn fit_rows(raw: &Matrix, penalties: &[f64], cfg: &LassoConfig) -> Result<NodewiseFit> {
    let p = raw.cols();
    if penalties.len() != p {
        return Err(Error::dim(format!("{} penalties for {p} columns", penalties.len())));
    }
    if let Some(bad) = penalties.iter().position(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::invalid(format!(
            "penalty for column {bad} is {}, must be positive",
            penalties[bad]
        )));
    }
    let (centered, means) = raw.centered();
    let sigma = centered.scaled_gram();

    struct Column {
        gamma: Vec<f64>,
        diag: f64,
        floored: bool,
        converged: bool,
    }
    let columns: Vec<Column> = (0..p)
        .into_par_iter()
        .map(|j| -> Result<Column> {
            let problem = nodewise_problem(&sigma, j, penalties[j]);
            let sol = solve_gram(&problem, cfg, None)?;
            let mut denom = sigma[(j, j)] - dot(&problem.xty, &sol.coefficients);
            let floored = denom <= DENOMINATOR_FLOOR;
            if floored {
                denom = DENOMINATOR_FLOOR;
            }
            Ok(Column {
                diag: 1.0 / denom,
                gamma: sol.coefficients,
                floored,
                converged: sol.converged,
            })
        })
        .collect::<Result<_>>()?;

    // Ω̂ = C·diag(Ω̂ⱼⱼ) with C the identity minus the regression coefficients
    let mut coef = Matrix::identity(p);
    let mut omega_hat = Matrix::zeros(p, p);
    for (j, col) in columns.iter().enumerate() {
        omega_hat[(j, j)] = col.diag;
        for (b, k) in (0..p).filter(|&k| k != j).enumerate() {
            coef[(k, j)] = -col.gamma[b];
            omega_hat[(k, j)] = -col.gamma[b] * col.diag;
        }
    }
    let residuals = centered.matmul(&coef)?;

    let floored_columns: Vec<usize> = (0..p).filter(|&j| columns[j].floored).collect();
    if !floored_columns.is_empty() {
        warn!(
            "diagonal denominator floored at {DENOMINATOR_FLOOR:e}·n for columns {floored_columns:?}"
        );
    }
    let unconverged_columns: Vec<usize> = (0..p).filter(|&j| !columns[j].converged).collect();
    if !unconverged_columns.is_empty() {
        warn!("node-wise Lasso did not converge for columns {unconverged_columns:?}");
    }

    Ok(NodewiseFit {
        centered,
        means,
        sample_cov: sigma,
        gammas: columns.into_iter().map(|c| c.gamma).collect(),
        residuals,
        omega_hat,
        penalties: penalties.to_vec(),
        floored_columns,
        unconverged_columns,
    })
}

/// `Ω̄ = Ω̂ + Ω̂ᵀ − Ω̂ᵀ Σ̂ Ω̂`.
pub fn debias(fit: &NodewiseFit) -> Matrix {
    debias_parts(&fit.omega_hat, &fit.sample_cov)
}

pub(crate) fn debias_parts(omega_hat: &Matrix, sigma: &Matrix) -> Matrix {
    let quad = omega_hat
        .t_matmul(&sigma.matmul(omega_hat).expect("square"))
        .expect("square");
    let p = omega_hat.rows();
    Matrix::from_fn(p, p, |j, k| omega_hat[(j, k)] + omega_hat[(k, j)] - quad[(j, k)]).symmetrized()
}

/// `v̂ⱼₖ = (1/n) Σᵢ (Ω̄ⱼₖ − Ω̄ⱼⱼ Ω̄ₖₖ ε̂ᵢⱼ ε̂ᵢₖ)²`.
pub fn estimate_variances(fit: &NodewiseFit, omega_bar: &Matrix) -> Matrix {
    let p = fit.p();
    let n = fit.n();
    let eps_t = fit.residuals.transpose();
    let upper: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let ej = eps_t.row(j);
            (j..p)
                .map(|k| {
                    let ek = eps_t.row(k);
                    let centre = omega_bar[(j, k)];
                    let scale = omega_bar[(j, j)] * omega_bar[(k, k)];
                    let s: f64 = ej
                        .iter()
                        .zip(ek)
                        .map(|(a, b)| {
                            let phi = centre - scale * a * b;
                            phi * phi
                        })
                        .sum();
                    s / n as f64
                })
                .collect()
        })
        .collect();
    let mut v = Matrix::zeros(p, p);
    for (j, row) in upper.into_iter().enumerate() {
        for (off, val) in row.into_iter().enumerate() {
            v[(j, j + off)] = val;
            v[(j + off, j)] = val;
        }
    }
    v
}

/// Split-sample pieces for the iterative rounds.
#[derive(Clone, Debug)]
pub struct SplitFit {
    pub kappa: f64,
    /// `I⁽ᵐ¹⁾`, sorted.
    pub subset1: Vec<usize>,
    /// `I⁽ᵐ²⁾`, sorted.
    pub subset2: Vec<usize>,
    /// `Ω̂⁽ᵐ¹⁾`, fit on subset 1 with penalties inflated by `1/√(1−κ)`.
    pub omega_hat_1: Matrix,
    /// `Σ̂⁽ᵐ²⁾`, the centered sample covariance of subset 2.
    pub sigma_hat_2: Matrix,
    pub penalties_1: Vec<f64>,
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::invalid(format!("split proportion {kappa} must lie in [0, 1)")));
    }
    Ok(())
}

fn split_from_fit(kappa: f64, n: usize, fit: &NodewiseFit) -> SplitFit {
    let all: Vec<usize> = (0..n).collect();
    SplitFit {
        kappa,
        subset1: all.clone(),
        subset2: all,
        omega_hat_1: fit.omega_hat.clone(),
        sigma_hat_2: fit.sample_cov.clone(),
        penalties_1: fit.penalties.clone(),
    }
}

/// Splits the rows into `I⁽ᵐ¹⁾ ∪ I⁽ᵐ²⁾` with `|I⁽ᵐ²⁾| = round(κ n)` and fits
/// the pieces. `κ = 0` means no split: both roles use every row.
pub fn split_and_refit(
    dataset: &SiteDataset,
    kappa: f64,
    penalties: &[f64],
    cfg: &LassoConfig,
    seed: u64,
) -> Result<SplitFit> {
    check_kappa(kappa)?;
    let n = dataset.n();
    if kappa == 0.0 {
        let fit = fit_nodewise(dataset, penalties, cfg)?;
        return Ok(split_from_fit(0.0, n, &fit));
    }
    let n2 = (kappa * n as f64).round() as usize;
    let n1 = n - n2;
    if n1 < MIN_SITE_SAMPLES || n2 < MIN_SITE_SAMPLES {
        return Err(Error::invalid(format!(
            "split of {n} samples at κ = {kappa} leaves subsets of {n1} and {n2}, need at least {MIN_SITE_SAMPLES} each"
        )));
    }
    let order = permutation(n, seed);
    let mut subset2: Vec<usize> = order[..n2].to_vec();
    let mut subset1: Vec<usize> = order[n2..].to_vec();
    subset1.sort_unstable();
    subset2.sort_unstable();

    let inflation = 1.0 / (1.0 - kappa).sqrt();
    let penalties_1: Vec<f64> = penalties.iter().map(|l| l * inflation).collect();
    let fit1 = fit_rows(&dataset.raw().select_rows(&subset1), &penalties_1, cfg)?;
    let (x2, _) = dataset.raw().select_rows(&subset2).centered();
    Ok(SplitFit {
        kappa,
        subset1,
        subset2,
        omega_hat_1: fit1.omega_hat,
        sigma_hat_2: x2.scaled_gram(),
        penalties_1,
    })
}

/// One symmetrized debiasing step around the current integrated estimate:
/// `½(B + Bᵀ)` with `B = Ω̂⁽ᵐ¹⁾ᵀ + Ω̃ − Ω̂⁽ᵐ¹⁾ᵀ Σ̂⁽ᵐ²⁾ Ω̃`.
pub fn iterate_debias(split: &SplitFit, current: &Matrix) -> Result<Matrix> {
    let p = split.omega_hat_1.rows();
    if current.shape() != (p, p) {
        return Err(Error::dim(format!(
            "current estimate is {:?}, expected {p}x{p}",
            current.shape()
        )));
    }
    let correction = split
        .omega_hat_1
        .t_matmul(&split.sigma_hat_2.matmul(current)?)?;
    let b = Matrix::from_fn(p, p, |j, k| {
        split.omega_hat_1[(k, j)] + current[(j, k)] - correction[(j, k)]
    });
    Ok(b.symmetrized())
}

/// What a site sends to the coordinator in the first round.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSummary {
    pub site_id: usize,
    pub n: usize,
    pub omega_bar: Matrix,
    pub v_hat: Matrix,
    pub kappa: f64,
}

impl LocalSummary {
    pub fn p(&self) -> usize {
        self.omega_bar.rows()
    }

    /// Scalars carried: both matrices plus `n` and `κ`.
    pub fn scalar_count(&self) -> usize {
        2 * self.p() * self.p() + 2
    }
}

/// A site after local estimation.
#[derive(Clone, Debug)]
pub struct SiteState {
    pub site_id: usize,
    pub fit: NodewiseFit,
    pub omega_bar: Matrix,
    pub v_hat: Matrix,
    pub split: Option<SplitFit>,
}

impl SiteState {
    /// Node-wise fit, debiasing and variance estimation in one go.
    pub fn estimate(dataset: &SiteDataset, penalties: &[f64], cfg: &LassoConfig) -> Result<Self> {
        let fit = fit_nodewise(dataset, penalties, cfg)?;
        let omega_bar = debias(&fit);
        let v_hat = estimate_variances(&fit, &omega_bar);
        Ok(SiteState {
            site_id: dataset.site_id(),
            fit,
            omega_bar,
            v_hat,
            split: None,
        })
    }

    pub fn n(&self) -> usize {
        self.fit.n()
    }

    /// Attaches split pieces, reusing the full fit when `κ = 0`.
    pub fn prepare_split(&mut self, dataset: &SiteDataset, kappa: f64, cfg: &LassoConfig, seed: u64) -> Result<()> {
        check_kappa(kappa)?;
        let split = if kappa == 0.0 {
            split_from_fit(0.0, self.n(), &self.fit)
        } else {
            split_and_refit(dataset, kappa, &self.fit.penalties, cfg, seed)?
        };
        self.split = Some(split);
        Ok(())
    }

    pub fn kappa(&self) -> f64 {
        self.split.as_ref().map_or(0.0, |s| s.kappa)
    }

    pub fn iterate(&self, current: &Matrix) -> Result<Matrix> {
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("site {} has no split fit", self.site_id)))?;
        iterate_debias(split, current)
    }

    pub fn summarize(&self) -> LocalSummary {
        LocalSummary {
            site_id: self.site_id,
            n: self.n(),
            omega_bar: self.omega_bar.clone(),
            v_hat: self.v_hat.clone(),
            kappa: self.kappa(),
        }
    }
}

/// Free-function form of [`SiteState::summarize`].
pub fn summarize(state: &SiteState) -> LocalSummary {
    state.summarize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_rows(n: usize, p: usize, seed_: u64) -> Matrix {
        let mut rng = seed::rng(seed_);
        Matrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    fn dataset(n: usize, p: usize, seed_: u64) -> SiteDataset {
        SiteDataset::new(0, gaussian_rows(n, p, seed_)).unwrap()
    }

    #[test]
    fn dataset_validation() {
        assert!(SiteDataset::new(0, Matrix::zeros(9, 3)).is_err());
        assert!(SiteDataset::new(0, Matrix::zeros(20, 1)).is_err());
        assert!(SiteDataset::new(0, Matrix::zeros(20, 2)).is_ok());
    }

    #[test]
    fn full_shrinkage_gives_inverse_sample_variance() {
        let data = dataset(60, 4, 1);
        let fit = fit_nodewise(&data, &[10.0; 4], &LassoConfig::default()).unwrap();
        for j in 0..4 {
            assert!(fit.gammas[j].iter().all(|&g| g == 0.0));
            let var = fit.sample_cov[(j, j)];
            assert!((fit.omega_hat[(j, j)] - 1.0 / var).abs() < 1e-12);
            for k in (0..4).filter(|&k| k != j) {
                assert_eq!(fit.omega_hat[(k, j)], 0.0);
            }
        }
        // residuals are the centered data when γ̂ = 0
        assert!(fit.residuals.max_abs_diff(&fit.centered) < 1e-14);
    }

    #[test]
    fn zero_estimate_debiases_to_zero() {
        let data = dataset(30, 3, 2);
        let mut fit = fit_nodewise(&data, &[0.1; 3], &LassoConfig::default()).unwrap();
        fit.omega_hat = Matrix::zeros(3, 3);
        assert_eq!(debias(&fit).max_abs(), 0.0);
    }

    #[test]
    fn debias_matches_explicit_triple_product() {
        let data = dataset(40, 5, 3);
        let fit = fit_nodewise(&data, &[0.2; 5], &LassoConfig::default()).unwrap();
        let o = &fit.omega_hat;
        let s = &fit.sample_cov;
        let mut expected = Matrix::zeros(5, 5);
        for j in 0..5 {
            for k in 0..5 {
                let mut q = 0.0;
                for a in 0..5 {
                    for b in 0..5 {
                        q += o[(a, j)] * s[(a, b)] * o[(b, k)];
                    }
                }
                expected[(j, k)] = o[(j, k)] + o[(k, j)] - q;
            }
        }
        let got = debias(&fit);
        assert!(got.max_abs_diff(&expected) < 1e-12);
        assert!(got.is_symmetric(0.0));
    }

    #[test]
    fn variances_match_two_loop_reference() {
        let data = dataset(50, 3, 4);
        let fit = fit_nodewise(&data, &[0.1; 3], &LassoConfig::default()).unwrap();
        let ob = debias(&fit);
        let v = estimate_variances(&fit, &ob);
        for j in 0..3 {
            for k in 0..3 {
                let mut acc = 0.0;
                for i in 0..50 {
                    let phi = ob[(j, k)] - ob[(j, j)] * ob[(k, k)] * fit.residuals[(i, j)] * fit.residuals[(i, k)];
                    acc += phi * phi;
                }
                assert!((v[(j, k)] - acc / 50.0).abs() < 1e-12);
                assert!(v[(j, k)] >= 0.0);
            }
        }
        assert!(v.is_symmetric(0.0));
    }

    #[test]
    fn zero_residuals_give_squared_centre() {
        let data = dataset(30, 3, 5);
        let mut fit = fit_nodewise(&data, &[0.1; 3], &LassoConfig::default()).unwrap();
        fit.residuals = Matrix::zeros(30, 3);
        let ob = debias(&fit);
        let v = estimate_variances(&fit, &ob);
        for j in 0..3 {
            for k in 0..3 {
                assert!((v[(j, k)] - ob[(j, k)] * ob[(j, k)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn no_split_limit_reuses_full_fit() {
        let data = dataset(50, 4, 6);
        let cfg = LassoConfig::default();
        let fit = fit_nodewise(&data, &[0.1; 4], &cfg).unwrap();
        let split = split_and_refit(&data, 0.0, &[0.1; 4], &cfg, 1).unwrap();
        assert_eq!(split.omega_hat_1, fit.omega_hat);
        assert_eq!(split.sigma_hat_2, fit.sample_cov);
    }

    #[test]
    fn half_split_cardinalities() {
        let data = dataset(200, 3, 7);
        let split = split_and_refit(&data, 0.5, &[0.1; 3], &LassoConfig::default(), 9).unwrap();
        assert_eq!(split.subset2.len(), 100);
        assert_eq!(split.subset1.len(), 100);
        let mut all: Vec<usize> = split.subset1.iter().chain(&split.subset2).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_small_subsets_and_bad_kappa() {
        let data = dataset(25, 3, 8);
        let cfg = LassoConfig::default();
        assert!(split_and_refit(&data, 0.9, &[0.1; 3], &cfg, 1).is_err());
        assert!(split_and_refit(&data, 1.0, &[0.1; 3], &cfg, 1).is_err());
        assert!(split_and_refit(&data, -0.1, &[0.1; 3], &cfg, 1).is_err());
    }

    #[test]
    fn iterate_debias_zero_and_fixed_point() {
        let data = dataset(80, 4, 10);
        let cfg = LassoConfig::default();
        let split = split_and_refit(&data, 0.5, &[0.1; 4], &cfg, 3).unwrap();
        let zero = iterate_debias(&split, &Matrix::zeros(4, 4)).unwrap();
        let o1 = &split.omega_hat_1;
        let expected = o1.add(&o1.transpose()).unwrap().scale(0.5);
        assert!(zero.max_abs_diff(&expected) < 1e-15);

        let inv = split.sigma_hat_2.spd_inverse().unwrap();
        let out = iterate_debias(&split, &inv).unwrap();
        assert!(out.max_abs_diff(&inv) < 1e-10);

        assert!(iterate_debias(&split, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn iterate_debias_matches_explicit_algebra() {
        let data = dataset(60, 4, 11);
        let split = split_and_refit(&data, 0.5, &[0.15; 4], &LassoConfig::default(), 5).unwrap();
        let current = Matrix::from_fn(4, 4, |j, k| if j == k { 1.5 } else { 0.1 * (j + k) as f64 });
        let o1t = split.omega_hat_1.transpose();
        let b = o1t
            .add(&current)
            .unwrap()
            .sub(&o1t.matmul(&split.sigma_hat_2).unwrap().matmul(&current).unwrap())
            .unwrap();
        let expected = b.add(&b.transpose()).unwrap().scale(0.5);
        let got = iterate_debias(&split, &current).unwrap();
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn penalty_inflation_is_certified_by_kkt() {
        let data = dataset(120, 4, 12);
        let cfg = LassoConfig::default();
        let kappa = 0.5;
        let lambda = 0.08;
        let split = split_and_refit(&data, kappa, &[lambda; 4], &cfg, 13).unwrap();
        let inflated = lambda / (1.0f64 - kappa).sqrt();
        assert!(split.penalties_1.iter().all(|&l| (l - inflated).abs() < 1e-15));
        // refit subset 1 directly and check KKT at the inflated level
        let sub = data.raw().select_rows(&split.subset1);
        let (xc, _) = sub.centered();
        let sigma = xc.scaled_gram();
        for j in 0..4 {
            let prob = nodewise_problem(&sigma, j, inflated);
            let diag = split.omega_hat_1[(j, j)];
            let gamma: Vec<f64> = (0..4)
                .filter(|&k| k != j)
                .map(|k| -split.omega_hat_1[(k, j)] / diag)
                .collect();
            let corr = prob.correlations(&gamma);
            assert!(crate::lasso::kkt_residual(&corr, &gamma, inflated) <= cfg.kkt_tol + 1e-12);
            // and the uninflated level is violated whenever some coefficient is active
            if gamma.iter().any(|&g| g != 0.0) {
                assert!(crate::lasso::kkt_residual(&corr, &gamma, lambda) > cfg.kkt_tol);
            }
        }
    }

    #[test]
    fn summary_carries_exactly_the_payload_fields() {
        let data = dataset(40, 5, 14).with_site_id(3);
        let state = SiteState::estimate(&data, &[0.2; 5], &LassoConfig::default()).unwrap();
        let s = summarize(&state);
        assert_eq!(s.site_id, 3);
        assert_eq!(s.n, 40);
        assert_eq!(s.scalar_count(), 2 * 25 + 2);
        assert_eq!(s.kappa, 0.0);
        assert!(s.omega_bar.is_symmetric(0.0) && s.v_hat.is_symmetric(0.0));
    }

    #[test]
    fn cross_validated_penalties_come_from_the_grid() {
        let data = dataset(60, 4, 15);
        let rule = LambdaRule::cross_validated(0.5);
        let pens = rule.penalties(&data, &LassoConfig::default(), 3).unwrap();
        let grid: Vec<f64> = cv_grid(0.5, 10).iter().map(|&c| scaled_penalty(c, 4, 60)).collect();
        for l in pens {
            assert!(grid.iter().any(|g| (g - l).abs() < 1e-15));
        }
        assert!(LambdaRule::Scaled { c: 0.0 }.penalties(&data, &LassoConfig::default(), 0).is_err());
    }

    #[test]
    fn nonpositive_penalties_rejected() {
        let data = dataset(30, 3, 16);
        assert!(fit_nodewise(&data, &[0.1, 0.0, 0.1], &LassoConfig::default()).is_err());
        assert!(fit_nodewise(&data, &[0.1, 0.1], &LassoConfig::default()).is_err());
    }
}
