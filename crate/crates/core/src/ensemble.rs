//! Site ensembles of precision matrices and their common-plus-deviation
//! decomposition `Ω⁽ᵐ⁾ = Γ + Λ⁽ᵐ⁾` with `Σₘ nₘ Λ⁽ᵐ⁾ = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::norms::weights_from_counts;

/// Tolerance on `|Σ wₘ − 1|`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Per-entry symmetry tolerance for ensemble members.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// M symmetric p×p matrices with site weights `nₘ/N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionEnsemble {
    omegas: Vec<Matrix>,
    weights: Vec<f64>,
}

impl PrecisionEnsemble {
    /// Members are symmetrized as `(A + Aᵀ)/2` on the way in.
    pub fn new(omegas: Vec<Matrix>, weights: Vec<f64>) -> Result<Self> {
        if omegas.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one site"));
        }
        if omegas.len() != weights.len() {
            return Err(Error::dim(format!(
                "{} matrices with {} weights",
                omegas.len(),
                weights.len()
            )));
        }
        let p = omegas[0].rows();
        for (m, o) in omegas.iter().enumerate() {
            if o.shape() != (p, p) {
                return Err(Error::dim(format!(
                    "site {m} matrix is {:?}, expected {p}x{p}",
                    o.shape()
                )));
            }
            if !o.is_finite() {
                return Err(Error::invalid(format!("site {m} matrix has non-finite entries")));
            }
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::invalid("site weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("site weights sum to {total}, not 1")));
        }
        Ok(PrecisionEnsemble {
            omegas: omegas.iter().map(Matrix::symmetrized).collect(),
            weights,
        })
    }

    pub fn from_counts(omegas: Vec<Matrix>, counts: &[usize]) -> Result<Self> {
        PrecisionEnsemble::new(omegas, weights_from_counts(counts)?)
    }

    pub fn equal_weights(omegas: Vec<Matrix>) -> Result<Self> {
        let m = omegas.len();
        PrecisionEnsemble::new(omegas, vec![1.0 / m.max(1) as f64; m])
    }

    /// Same matrices under new weights.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self> {
        PrecisionEnsemble::new(self.omegas.clone(), weights)
    }

    pub fn sites(&self) -> usize {
        self.omegas.len()
    }

    pub fn dim(&self) -> usize {
        self.omegas[0].rows()
    }

    pub fn omegas(&self) -> &[Matrix] {
        &self.omegas
    }

    pub fn omega(&self, m: usize) -> &Matrix {
        &self.omegas[m]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The M-vector `(Ω⁽¹⁾ⱼₖ, …, Ω⁽ᴹ⁾ⱼₖ)`.
    pub fn entry_vector(&self, j: usize, k: usize) -> Vec<f64> {
        self.omegas.iter().map(|o| o[(j, k)]).collect()
    }
}

/// `Γ` plus the per-site deviations `Λ⁽ᵐ⁾`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub gamma: Matrix,
    pub lambdas: Vec<Matrix>,
    pub weights: Vec<f64>,
}

impl Decomposition {
    pub fn reconstruct(&self, m: usize) -> Matrix {
        self.gamma.add(&self.lambdas[m]).expect("same shape")
    }

    /// Largest `|Σₘ wₘ Λ⁽ᵐ⁾ⱼₖ|` over entries; zero up to rounding.
    pub fn identification_residual(&self) -> f64 {
        weighted_sum_residual(&self.lambdas, &self.weights)
    }
}

pub(crate) fn weighted_sum_residual(mats: &[Matrix], weights: &[f64]) -> f64 {
    let p = mats[0].rows();
    let mut worst: f64 = 0.0;
    for j in 0..p {
        for k in 0..p {
            let s: f64 = mats.iter().zip(weights).map(|(l, w)| w * l[(j, k)]).sum();
            worst = worst.max(s.abs());
        }
    }
    worst
}

/// Weighted average of matrices in site order.
pub(crate) fn weighted_average(mats: &[&Matrix], weights: &[f64]) -> Matrix {
    let (r, c) = mats[0].shape();
    Matrix::from_fn(r, c, |j, k| {
        mats.iter().zip(weights).map(|(o, w)| w * o[(j, k)]).sum()
    })
}

pub fn decompose(ensemble: &PrecisionEnsemble) -> Decomposition {
    let refs: Vec<&Matrix> = ensemble.omegas.iter().collect();
    let gamma = weighted_average(&refs, &ensemble.weights);
    let lambdas = ensemble
        .omegas
        .iter()
        .map(|o| o.sub(&gamma).expect("same shape"))
        .collect();
    Decomposition {
        gamma,
        lambdas,
        weights: ensemble.weights.clone(),
    }
}

/// Largest per-column sizes of the shared and heterogeneous off-diagonal supports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub s1: usize,
    pub s2: usize,
}

impl SparsityProfile {
    /// `s₀ = max(s₁, s₂)`.
    pub fn s0(&self) -> usize {
        self.s1.max(self.s2)
    }

    /// Realized profile of an ensemble. Off-diagonal entries only; values
    /// within `tol` of each other count as equal.
    pub fn of(ensemble: &PrecisionEnsemble, tol: f64) -> Self {
        let p = ensemble.dim();
        let mut s1 = 0;
        let mut s2 = 0;
        for k in 0..p {
            let (mut c1, mut c2) = (0, 0);
            for j in (0..p).filter(|&j| j != k) {
                match classify_entry(&ensemble.entry_vector(j, k), tol) {
                    EntryClass::Common => c1 += 1,
                    EntryClass::Heterogeneous => c2 += 1,
                    EntryClass::Zero => {}
                }
            }
            s1 = s1.max(c1);
            s2 = s2.max(c2);
        }
        SparsityProfile { s1, s2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryClass {
    Zero,
    Common,
    Heterogeneous,
}

pub fn classify_entry(values: &[f64], tol: f64) -> EntryClass {
    let first = values[0];
    if values.iter().any(|v| (v - first).abs() > tol) {
        EntryClass::Heterogeneous
    } else if first.abs() > tol {
        EntryClass::Common
    } else {
        EntryClass::Zero
    }
}
