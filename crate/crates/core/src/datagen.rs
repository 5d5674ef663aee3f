//! Synthetic heterogeneous ensembles and Gaussian site data.
//!
//! Graph structure, the common/heterogeneous partition and the edge values
//! each draw from their own seed stream, so raising `hete_ratio` under a
//! fixed seed only moves edges from the common to the heterogeneous set.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{PrecisionEnsemble, SparsityProfile};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{self, stream};
use crate::site::{SiteDataset, MIN_SITE_SAMPLES};

/// Added to `max |λ_min(B⁽ᵐ⁾)|` when shifting the diagonal.
pub const DIAGONAL_MARGIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    #[serde(alias = "er")]
    ErdosRenyi,
    Banded,
}

impl GraphKind {
    pub fn name(self) -> &'static str {
        match self {
            GraphKind::ErdosRenyi => "er",
            GraphKind::Banded => "banded",
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "er" | "erdos_renyi" | "erdos-renyi" => Ok(GraphKind::ErdosRenyi),
            "banded" | "band" => Ok(GraphKind::Banded),
            other => Err(Error::invalid(format!("unknown graph kind '{other}' (expected er or banded)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub kind: GraphKind,
    pub p: usize,
    /// Expected off-diagonal nonzeros per column (ER) or the bandwidth.
    pub target_degree: usize,
    pub edge_weight_range: (f64, f64),
    /// Common in-band value is `band_rho^|j−k|`.
    pub band_rho: f64,
    pub hete_ratio: f64,
    pub sites: usize,
    pub seed: u64,
}

impl GraphSpec {
    pub fn erdos_renyi(p: usize, target_degree: usize, hete_ratio: f64, sites: usize, seed: u64) -> Self {
        GraphSpec {
            kind: GraphKind::ErdosRenyi,
            p,
            target_degree,
            edge_weight_range: (0.4, 0.8),
            band_rho: 0.5,
            hete_ratio,
            sites,
            seed,
        }
    }

    pub fn banded(p: usize, bandwidth: usize, hete_ratio: f64, sites: usize, seed: u64) -> Self {
        GraphSpec {
            kind: GraphKind::Banded,
            target_degree: bandwidth,
            ..GraphSpec::erdos_renyi(p, bandwidth, hete_ratio, sites, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::invalid(format!("dimension p = {} must be at least 2", self.p)));
        }
        if self.sites == 0 {
            return Err(Error::invalid("at least one site is required"));
        }
        if self.target_degree >= self.p {
            return Err(Error::invalid(format!(
                "target degree {} must be below p = {}",
                self.target_degree, self.p
            )));
        }
        if !(0.0..=1.0).contains(&self.hete_ratio) {
            return Err(Error::invalid(format!("hete_ratio {} must lie in [0, 1]", self.hete_ratio)));
        }
        let (lo, hi) = self.edge_weight_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("edge weight range [{lo}, {hi}] needs 0 < low ≤ high")));
        }
        if self.kind == GraphKind::Banded && !(self.band_rho.abs() > 0.0 && self.band_rho.is_finite()) {
            return Err(Error::invalid(format!("band base value {} must be nonzero", self.band_rho)));
        }
        Ok(())
    }
}

fn signed_draw(rng: &mut seed::Rng, (lo, hi): (f64, f64)) -> f64 {
    let mag = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn edge_set(spec: &GraphSpec) -> Vec<(usize, usize)> {
    let p = spec.p;
    match spec.kind {
        GraphKind::ErdosRenyi => {
            let prob = spec.target_degree as f64 / (p - 1) as f64;
            let mut rng = seed::rng(seed::derive(spec.seed, stream::GRAPH_STRUCTURE));
            let mut edges = Vec::new();
            for j in 0..p {
                for k in j + 1..p {
                    if rng.random_bool(prob) {
                        edges.push((j, k));
                    }
                }
            }
            edges
        }
        GraphKind::Banded => (0..p)
            .flat_map(|j| (j + 1..p.min(j + spec.target_degree + 1)).map(move |k| (j, k)))
            .collect(),
    }
}

/// Each Ω⁽ᵐ⁾ is SPD with common entries bit-identical across sites. The
/// profile is the realized one.
pub fn generate_ensemble(spec: &GraphSpec) -> Result<(PrecisionEnsemble, SparsityProfile)> {
    spec.validate()?;
    let (p, sites) = (spec.p, spec.sites);
    let edges = edge_set(spec);

    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.shuffle(&mut seed::rng(seed::derive(spec.seed, stream::GRAPH_PARTITION)));
    let n_hete = (spec.hete_ratio * edges.len() as f64).round() as usize;
    let mut heterogeneous = vec![false; edges.len()];
    for &e in &order[..n_hete] {
        heterogeneous[e] = true;
    }

    let mut rng = seed::rng(seed::derive(spec.seed, stream::GRAPH_VALUES));
    let mut base = vec![Matrix::zeros(p, p); sites];
    for (e, &(j, k)) in edges.iter().enumerate() {
        let values: Vec<f64> = if heterogeneous[e] && sites > 1 {
            loop {
                let v: Vec<f64> = (0..sites).map(|_| signed_draw(&mut rng, spec.edge_weight_range)).collect();
                if v.iter().any(|&x| x != v[0]) {
                    break v;
                }
            }
        } else {
            let common = match spec.kind {
                GraphKind::ErdosRenyi => signed_draw(&mut rng, spec.edge_weight_range),
                GraphKind::Banded => spec.band_rho.powi((k - j) as i32),
            };
            vec![common; sites]
        };
        for (b, v) in base.iter_mut().zip(values) {
            b[(j, k)] = v;
            b[(k, j)] = v;
        }
    }

    let worst = base
        .par_iter()
        .map(|b| b.min_eigenvalue())
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0f64, |acc, l| acc.max(l.abs()));
    let shift = worst + DIAGONAL_MARGIN;
    for b in &mut base {
        for j in 0..p {
            b[(j, j)] += shift;
        }
    }

    let ensemble = PrecisionEnsemble::equal_weights(base)?;
    let profile = SparsityProfile::of(&ensemble, 0.0);
    Ok((ensemble, profile))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n0: usize,
    pub sites: usize,
    pub seed: u64,
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n0 < MIN_SITE_SAMPLES {
            return Err(Error::invalid(format!(
                "base sample size {} must be at least {MIN_SITE_SAMPLES}",
                self.n0
            )));
        }
        if self.sites == 0 {
            return Err(Error::invalid("at least one site is required"));
        }
        Ok(())
    }

    /// Smallest admissible draw, `max(10, n₀ − n₀/5)`.
    pub fn floor(&self) -> f64 {
        (MIN_SITE_SAMPLES as f64).max(self.n0 as f64 * 0.8)
    }
}

/// `nₘ = n₀ + ⌈(n₀/25)·Z⌉`, redrawn while below [`SampleSpec::floor`].
pub fn sample_sizes(spec: &SampleSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(spec.seed, stream::SAMPLE_SIZES));
    let scale = spec.n0 as f64 / 25.0;
    let floor = spec.floor();
    Ok((0..spec.sites)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            let n = spec.n0 as f64 + (scale * z).ceil();
            if n >= floor {
                break n as usize;
            }
        })
        .collect())
}

/// `n` rows from `N(0, Ω⁻¹)`, as `Z Lᵀ` with `L Lᵀ = Ω⁻¹`.
pub fn sample_gaussian(omega: &Matrix, n: usize, seed: u64) -> Result<Matrix> {
    let sigma = omega.cholesky()?.inverse();
    let l = sigma.cholesky()?.factor().clone();
    let p = omega.rows();
    let mut rng = seed::rng(seed);
    let z = Matrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    z.matmul(&l.transpose())
}

/// One dataset per ensemble member; site `m` uses its own derived stream.
pub fn generate_sites(ensemble: &PrecisionEnsemble, sizes: &[usize], seed: u64) -> Result<Vec<SiteDataset>> {
    if sizes.len() != ensemble.sites() {
        return Err(Error::dim(format!(
            "{} sample sizes for {} sites",
            sizes.len(),
            ensemble.sites()
        )));
    }
    let base = seed::derive(seed, stream::SITE_DATA);
    (0..ensemble.sites())
        .into_par_iter()
        .map(|m| {
            let x = sample_gaussian(ensemble.omega(m), sizes[m], seed::derive(base, m as u64))
                .map_err(|e| e.at_site(m))?;
            SiteDataset::new(m, x)
        })
        .collect()
}

/// A complete synthetic study: true ensemble with weights `nₘ/N`, and data.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub truth: PrecisionEnsemble,
    pub profile: SparsityProfile,
    pub sizes: Vec<usize>,
    pub datasets: Vec<SiteDataset>,
}

impl Synthetic {
    pub fn generate(graph: &GraphSpec, n0: usize) -> Result<Self> {
        let (ens, profile) = generate_ensemble(graph)?;
        let sizes = sample_sizes(&SampleSpec {
            n0,
            sites: graph.sites,
            seed: graph.seed,
        })?;
        let datasets = generate_sites(&ens, &sizes, graph.seed)?;
        let truth = PrecisionEnsemble::from_counts(ens.omegas().to_vec(), &sizes)?;
        Ok(Synthetic {
            truth,
            profile,
            sizes,
            datasets,
        })
    }
}
