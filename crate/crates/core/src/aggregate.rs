//! Coordinator-side estimation: weighted pooling of the debiased site
//! estimates, entry-adaptive shrinkage levels, and double thresholding into
//! a common part `Γ̂` and per-site deviations `Λ̂⁽ᵐ⁾`.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{weighted_average, PrecisionEnsemble};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::norms::weights_from_counts;
use crate::site::LocalSummary;
use crate::threshold::ThresholdRule;

/// Variance entries below this are raised to it before entering a level.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShrinkageConfig {
    pub delta: f64,
    pub c1_bar: f64,
    pub c2_bar: f64,
    pub c1_tilde: f64,
    pub c2_tilde: f64,
    /// Sparsity used by the higher-order terms; ignored while their constants are 0.
    pub s0_hint: usize,
    pub rule1: ThresholdRule,
    pub rule2: ThresholdRule,
    /// Common multiplier on both level matrices.
    pub level_scale: f64,
}

impl Default for ShrinkageConfig {
    fn default() -> Self {
        ShrinkageConfig {
            delta: 0.1,
            c1_bar: 0.0,
            c2_bar: 0.0,
            c1_tilde: 0.0,
            c2_tilde: 0.0,
            s0_hint: 0,
            rule1: ThresholdRule::default(),
            rule2: ThresholdRule::default(),
            level_scale: 1.0,
        }
    }
}

impl ShrinkageConfig {
    pub fn with_rules(rule: ThresholdRule) -> Self {
        ShrinkageConfig {
            rule1: rule,
            rule2: rule,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::invalid(format!("delta = {} must be positive", self.delta)));
        }
        for (name, c) in [
            ("c1_bar", self.c1_bar),
            ("c2_bar", self.c2_bar),
            ("c1_tilde", self.c1_tilde),
            ("c2_tilde", self.c2_tilde),
        ] {
            if !(c >= 0.0) || !c.is_finite() {
                return Err(Error::invalid(format!("{name} = {c} must be finite and ≥ 0")));
            }
        }
        if !(self.level_scale >= 0.0) || !self.level_scale.is_finite() {
            return Err(Error::invalid(format!("level scale {} must be finite and ≥ 0", self.level_scale)));
        }
        self.rule1.validated()?;
        self.rule2.validated()?;
        Ok(())
    }
}

/// Level matrices `λ₁ⱼₖ` (common part) and `λ₂ⱼₖ` (deviations).
#[derive(Clone, Debug, PartialEq)]
pub struct ShrinkageLevels {
    pub levels1: Matrix,
    pub levels2: Matrix,
}

impl ShrinkageLevels {
    pub fn scaled(&self, factor: f64) -> Self {
        ShrinkageLevels {
            levels1: self.levels1.scale(factor),
            levels2: self.levels2.scale(factor),
        }
    }

    fn max_sum(&self) -> f64 {
        self.levels1.max_abs() + self.levels2.max_abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatEstimate {
    pub gamma_hat: Matrix,
    pub lambda_hats: Vec<Matrix>,
    pub omega_tildes: Vec<Matrix>,
    pub levels1: Matrix,
    pub levels2: Matrix,
    pub round: usize,
    pub site_ids: Vec<usize>,
    pub counts: Vec<usize>,
}

impl HeatEstimate {
    pub fn sites(&self) -> usize {
        self.omega_tildes.len()
    }

    pub fn dim(&self) -> usize {
        self.gamma_hat.rows()
    }

    pub fn weights(&self) -> Vec<f64> {
        weights_from_counts(&self.counts).expect("counts validated on construction")
    }

    pub fn levels(&self) -> ShrinkageLevels {
        ShrinkageLevels {
            levels1: self.levels1.clone(),
            levels2: self.levels2.clone(),
        }
    }

    /// `Ω̃⁽·⁾` as an ensemble weighted by `nₘ/N`.
    pub fn ensemble(&self) -> Result<PrecisionEnsemble> {
        PrecisionEnsemble::from_counts(self.omega_tildes.clone(), &self.counts)
    }

    /// Largest `|Σₘ nₘ Λ̂⁽ᵐ⁾ⱼₖ|`.
    pub fn identification_residual(&self) -> f64 {
        let p = self.dim();
        let mut worst: f64 = 0.0;
        for j in 0..p {
            for k in 0..p {
                let s: f64 = self
                    .lambda_hats
                    .iter()
                    .zip(&self.counts)
                    .map(|(l, &n)| n as f64 * l[(j, k)])
                    .sum();
                worst = worst.max(s.abs());
            }
        }
        worst
    }
}

/// Dimension `p`, counts and weights shared by a batch of summaries.
fn check_summaries(summaries: &[LocalSummary]) -> Result<(usize, Vec<usize>, Vec<f64>)> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::invalid("at least one site summary is required"))?;
    let p = first.p();
    for s in summaries {
        if s.omega_bar.shape() != (p, p) || s.v_hat.shape() != (p, p) {
            return Err(Error::dim(format!(
                "site {} summary is {:?}/{:?}, expected {p}x{p}",
                s.site_id,
                s.omega_bar.shape(),
                s.v_hat.shape()
            )));
        }
    }
    let counts: Vec<usize> = summaries.iter().map(|s| s.n).collect();
    let weights = weights_from_counts(&counts)?;
    Ok((p, counts, weights))
}

/// `Ω̄ = Σₘ (nₘ/N) Ω̄⁽ᵐ⁾`.
pub fn pooled_average(summaries: &[LocalSummary]) -> Result<Matrix> {
    let (_, _, weights) = check_summaries(summaries)?;
    let mats: Vec<&Matrix> = summaries.iter().map(|s| &s.omega_bar).collect();
    Ok(weighted_average(&mats, &weights))
}

/// Floors each variance vector, warning once per call.
struct Floored<'a> {
    variances: &'a [&'a Matrix],
}

impl Floored<'_> {
    fn entry(&self, j: usize, k: usize) -> Vec<f64> {
        self.variances.iter().map(|v| v[(j, k)].max(VARIANCE_FLOOR)).collect()
    }

    fn warn_if_floored(&self) {
        let hits: usize = self
            .variances
            .iter()
            .map(|v| v.as_slice().iter().filter(|&&x| !(x >= VARIANCE_FLOOR)).count())
            .sum();
        if hits > 0 {
            warn!("{hits} variance entries floored at {VARIANCE_FLOOR:e}");
        }
    }
}

/// Fills a symmetric matrix from its upper triangle.
fn symmetric_from_upper(p: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..p).into_par_iter().map(|j| (j..p).map(|k| f(j, k)).collect()).collect();
    let mut out = Matrix::zeros(p, p);
    for (j, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            out[(j, j + off)] = v;
            out[(j + off, j)] = v;
        }
    }
    out
}

fn deviation_level(l1: f64, l2: f64, linf: f64, log_p: f64, total: f64, delta: f64) -> f64 {
    (1.0 + delta) * ((l1 + 2.0 * 2f64.sqrt() * l2 * log_p.sqrt() + 4.0 * linf * log_p) / total).sqrt()
}

struct Scalars {
    m: f64,
    log_p: f64,
    total: f64,
    n_min: f64,
}

fn scalars(p: usize, counts: &[usize]) -> Scalars {
    Scalars {
        m: counts.len() as f64,
        log_p: (p as f64).ln(),
        total: counts.iter().sum::<usize>() as f64,
        n_min: *counts.iter().min().expect("nonempty") as f64,
    }
}

/// First-round plug-in levels from the site variance estimates.
pub fn shrinkage_levels_round1(summaries: &[LocalSummary], config: &ShrinkageConfig) -> Result<ShrinkageLevels> {
    config.validate()?;
    let (p, counts, weights) = check_summaries(summaries)?;
    let vars: Vec<&Matrix> = summaries.iter().map(|s| &s.v_hat).collect();
    Ok(levels_round1(p, &counts, &weights, &vars, config))
}

fn levels_round1(p: usize, counts: &[usize], weights: &[f64], vars: &[&Matrix], config: &ShrinkageConfig) -> ShrinkageLevels {
    let floored = Floored { variances: vars };
    floored.warn_if_floored();
    let sc = scalars(p, counts);
    let s0 = config.s0_hint as f64;
    let extra1 = config.c1_bar * s0 * sc.m * sc.log_p / sc.total;
    let extra2 = config.c2_bar * sc.m.sqrt() * s0 * sc.log_p / (sc.n_min * sc.total).sqrt();
    let scale = config.level_scale;
    let levels1 = symmetric_from_upper(p, |j, k| {
        let v = floored.entry(j, k);
        let l1w: f64 = v.iter().zip(weights).map(|(a, w)| w * a).sum();
        scale * ((2.0 + config.delta) * (l1w * sc.log_p / sc.total).sqrt() + extra1)
    });
    let levels2 = symmetric_from_upper(p, |j, k| {
        let v = floored.entry(j, k);
        let l1: f64 = v.iter().sum();
        let l2 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let linf = v.iter().fold(0.0f64, |a, &b| a.max(b));
        scale * (deviation_level(l1, l2, linf, sc.log_p, sc.total, config.delta) + extra2)
    });
    ShrinkageLevels { levels1, levels2 }
}

/// Levels for round `t ≥ 2`. `κₘ = 1` stands in for unsplit sites.
pub fn shrinkage_levels_iter(
    prev: &ShrinkageLevels,
    variances: &[&Matrix],
    counts: &[usize],
    kappas: &[f64],
    config: &ShrinkageConfig,
    t: usize,
) -> Result<ShrinkageLevels> {
    config.validate()?;
    if t < 2 {
        return Err(Error::invalid(format!("iterative levels start at round 2, got {t}")));
    }
    if variances.len() != counts.len() || kappas.len() != counts.len() || counts.is_empty() {
        return Err(Error::dim(format!(
            "{} variance matrices, {} counts and {} split proportions",
            variances.len(),
            counts.len(),
            kappas.len()
        )));
    }
    if let Some(k) = kappas.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
        return Err(Error::invalid(format!("split proportion {k} must lie in (0, 1]")));
    }
    let p = prev.levels1.rows();
    if variances.iter().any(|v| v.shape() != (p, p)) {
        return Err(Error::dim(format!("variance matrices must be {p}x{p}")));
    }
    weights_from_counts(counts)?;
    let floored = Floored { variances };
    floored.warn_if_floored();
    let sc = scalars(p, counts);
    let s0 = config.s0_hint as f64;
    let carry = s0 * (sc.log_p / sc.n_min).sqrt() * prev.max_sum();
    let extra1 = config.c1_tilde * (sc.m * sc.log_p / sc.total + carry);
    let extra2 = config.c2_tilde * (sc.m.sqrt() * sc.log_p / (sc.n_min * sc.total).sqrt() + carry);
    let scale = config.level_scale;
    let levels1 = symmetric_from_upper(p, |j, k| {
        let v = floored.entry(j, k);
        let a: f64 = v
            .iter()
            .zip(counts)
            .zip(kappas)
            .map(|((x, &n), kap)| n as f64 / (kap * sc.total) * x)
            .sum();
        scale * ((2.0 + config.delta) * (a * sc.log_p / sc.total).sqrt() + extra1)
    });
    let levels2 = symmetric_from_upper(p, |j, k| {
        let r: Vec<f64> = floored.entry(j, k).iter().zip(kappas).map(|(x, kap)| x / kap).collect();
        let b1: f64 = r.iter().sum();
        let b2 = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        let binf = r.iter().fold(0.0f64, |a, &b| a.max(b));
        scale * (deviation_level(b1, b2, binf, sc.log_p, sc.total, config.delta) + extra2)
    });
    Ok(ShrinkageLevels { levels1, levels2 })
}

/// Double thresholding of site matrices at the given levels.
pub fn threshold_ensemble(
    site_mats: &[&Matrix],
    counts: &[usize],
    levels: &ShrinkageLevels,
    config: &ShrinkageConfig,
) -> Result<(Matrix, Vec<Matrix>)> {
    let weights = weights_from_counts(counts)?;
    if site_mats.len() != counts.len() {
        return Err(Error::dim(format!("{} matrices for {} counts", site_mats.len(), counts.len())));
    }
    let p = levels.levels1.rows();
    if site_mats.iter().any(|m| m.shape() != (p, p)) || levels.levels2.shape() != (p, p) {
        return Err(Error::dim(format!("site matrices and levels must all be {p}x{p}")));
    }
    let pooled = weighted_average(site_mats, &weights);
    let per_row: Vec<Vec<(f64, Vec<f64>)>> = (0..p)
        .into_par_iter()
        .map(|j| {
            (j..p)
                .map(|k| {
                    let centre = pooled[(j, k)];
                    let g = config.rule1.apply_uni(centre, levels.levels1[(j, k)]);
                    let dev: Vec<f64> = site_mats.iter().map(|o| o[(j, k)] - centre).collect();
                    let l = config.rule2.apply_multi(&dev, levels.levels2[(j, k)], &weights);
                    (g, l)
                })
                .collect()
        })
        .collect();
    let mut gamma = Matrix::zeros(p, p);
    let mut lambdas = vec![Matrix::zeros(p, p); site_mats.len()];
    for (j, row) in per_row.into_iter().enumerate() {
        for (off, (g, l)) in row.into_iter().enumerate() {
            let k = j + off;
            gamma[(j, k)] = g;
            gamma[(k, j)] = g;
            for (lm, v) in lambdas.iter_mut().zip(l) {
                lm[(j, k)] = v;
                lm[(k, j)] = v;
            }
        }
    }
    Ok((gamma, lambdas))
}

fn assemble(
    gamma_hat: Matrix,
    lambda_hats: Vec<Matrix>,
    levels: ShrinkageLevels,
    round: usize,
    site_ids: Vec<usize>,
    counts: Vec<usize>,
) -> HeatEstimate {
    let omega_tildes = lambda_hats
        .iter()
        .map(|l| gamma_hat.add(l).expect("same shape"))
        .collect();
    HeatEstimate {
        gamma_hat,
        lambda_hats,
        omega_tildes,
        levels1: levels.levels1,
        levels2: levels.levels2,
        round,
        site_ids,
        counts,
    }
}

/// First-round estimate from the site summaries.
pub fn heat(summaries: &[LocalSummary], config: &ShrinkageConfig) -> Result<HeatEstimate> {
    let levels = shrinkage_levels_round1(summaries, config)?;
    heat_at_levels(summaries, levels, config)
}

/// First-round estimate with caller-supplied levels.
pub fn heat_at_levels(summaries: &[LocalSummary], levels: ShrinkageLevels, config: &ShrinkageConfig) -> Result<HeatEstimate> {
    config.validate()?;
    let (_, counts, _) = check_summaries(summaries)?;
    let mats: Vec<&Matrix> = summaries.iter().map(|s| &s.omega_bar).collect();
    let (gamma, lambdas) = threshold_ensemble(&mats, &counts, &levels, config)?;
    Ok(assemble(
        gamma,
        lambdas,
        levels,
        1,
        summaries.iter().map(|s| s.site_id).collect(),
        counts,
    ))
}

/// One iterative round from the re-debiased site matrices `Ω̄⁽ᵐ,ᵗ⁾`, given
/// in the same site order as `prev`. Unsplit sites pass `κₘ = 1`.
pub fn iteheat_round(
    prev: &HeatEstimate,
    iter_summaries: &[(usize, Matrix)],
    variances: &[&Matrix],
    kappas: &[f64],
    config: &ShrinkageConfig,
) -> Result<HeatEstimate> {
    if iter_summaries.len() != prev.sites() {
        return Err(Error::dim(format!(
            "{} iterate uploads for {} sites",
            iter_summaries.len(),
            prev.sites()
        )));
    }
    for ((id, _), expected) in iter_summaries.iter().zip(&prev.site_ids) {
        if id != expected {
            return Err(Error::Protocol(format!("iterate upload from site {id}, expected site {expected}")));
        }
    }
    let t = prev.round + 1;
    let levels = shrinkage_levels_iter(&prev.levels(), variances, &prev.counts, kappas, config, t)?;
    let mats: Vec<&Matrix> = iter_summaries.iter().map(|(_, m)| m).collect();
    let (gamma, lambdas) = threshold_ensemble(&mats, &prev.counts, &levels, config)?;
    Ok(assemble(gamma, lambdas, levels, t, prev.site_ids.clone(), prev.counts.clone()))
}
