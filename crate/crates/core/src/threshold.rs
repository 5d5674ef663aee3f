//! Thresholding rules.
//!
//! Every rule `T_λ` satisfies, for all inputs,
//!
//! * `T_λ(x) = 0` whenever `|x| ≤ λ`, and
//! * `|T_λ(x) − x| ≤ λ`.
//!
//! The multivariate versions act on the M-vector of site deviations and are
//! radial in the site-weighted norm `‖·‖₂,w`: the univariate rule is applied
//! to the norm and the vector is rescaled. Rescaling keeps the direction, so
//! a vector with zero weighted mean stays zero-mean after thresholding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norms::weighted_l2_unchecked;

pub const DEFAULT_SCAD_A: f64 = 3.7;
pub const DEFAULT_MCP_GAMMA: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdFamily {
    Soft,
    Hard,
    Scad,
    Mcp,
}

impl ThresholdFamily {
    pub const ALL: [ThresholdFamily; 4] = [
        ThresholdFamily::Soft,
        ThresholdFamily::Hard,
        ThresholdFamily::Scad,
        ThresholdFamily::Mcp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ThresholdFamily::Soft => "soft",
            ThresholdFamily::Hard => "hard",
            ThresholdFamily::Scad => "scad",
            ThresholdFamily::Mcp => "mcp",
        }
    }
}

impl fmt::Display for ThresholdFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ThresholdFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "soft" => Ok(ThresholdFamily::Soft),
            "hard" => Ok(ThresholdFamily::Hard),
            "scad" => Ok(ThresholdFamily::Scad),
            "mcp" => Ok(ThresholdFamily::Mcp),
            other => Err(Error::invalid(format!("unknown threshold family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub family: ThresholdFamily,
    #[serde(default = "default_scad_a")]
    pub scad_a: f64,
    #[serde(default = "default_mcp_gamma")]
    pub mcp_gamma: f64,
}

fn default_scad_a() -> f64 {
    DEFAULT_SCAD_A
}

fn default_mcp_gamma() -> f64 {
    DEFAULT_MCP_GAMMA
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::new(ThresholdFamily::Scad)
    }
}

impl From<ThresholdFamily> for ThresholdRule {
    fn from(family: ThresholdFamily) -> Self {
        ThresholdRule::new(family)
    }
}

impl ThresholdRule {
    pub fn new(family: ThresholdFamily) -> Self {
        ThresholdRule {
            family,
            scad_a: DEFAULT_SCAD_A,
            mcp_gamma: DEFAULT_MCP_GAMMA,
        }
    }

    pub fn soft() -> Self {
        Self::new(ThresholdFamily::Soft)
    }

    pub fn hard() -> Self {
        Self::new(ThresholdFamily::Hard)
    }

    pub fn scad(a: f64) -> Result<Self> {
        ThresholdRule {
            scad_a: a,
            ..Self::new(ThresholdFamily::Scad)
        }
        .validated()
    }

    pub fn mcp(gamma: f64) -> Result<Self> {
        ThresholdRule {
            mcp_gamma: gamma,
            ..Self::new(ThresholdFamily::Mcp)
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.scad_a > 2.0) {
            return Err(Error::invalid(format!("SCAD parameter a = {} must exceed 2", self.scad_a)));
        }
        if !(self.mcp_gamma > 1.0) {
            return Err(Error::invalid(format!(
                "MCP parameter gamma = {} must exceed 1",
                self.mcp_gamma
            )));
        }
        Ok(self)
    }

    /// Univariate rule applied to `x` at level `lambda ≥ 0`.
    pub fn apply_uni(&self, x: f64, lambda: f64) -> f64 {
        debug_assert!(lambda >= 0.0);
        let ax = x.abs();
        if ax <= lambda {
            return 0.0;
        }
        let mut magnitude = shrink_magnitude(self, ax, lambda);
        // Rounding can leave `ax − magnitude` one ulp above `lambda`; step
        // toward `ax` until the contraction bound holds as computed.
        while ax - magnitude > lambda {
            magnitude = magnitude.next_up();
        }
        magnitude.copysign(x)
    }

    /// Radial multivariate rule in the `‖·‖₂,w` norm.
    pub fn apply_multi(&self, x: &[f64], lambda: f64, weights: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), weights.len());
        let r = weighted_l2_unchecked(x, weights);
        if r <= lambda {
            return vec![0.0; x.len()];
        }
        let mut scale = shrink_magnitude(self, r, lambda) / r;
        loop {
            if scale >= 1.0 {
                return x.to_vec();
            }
            let out: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let diff: Vec<f64> = out.iter().zip(x).map(|(o, v)| o - v).collect();
            if weighted_l2_unchecked(&diff, weights) <= lambda {
                return out;
            }
            // Same rounding guard as the univariate rule.
            scale = scale.next_up();
        }
    }
}

/// `g(r)` for `r > λ`.
fn shrink_magnitude(rule: &ThresholdRule, r: f64, lambda: f64) -> f64 {
    match rule.family {
        ThresholdFamily::Soft => r - lambda,
        ThresholdFamily::Hard => r,
        ThresholdFamily::Scad => {
            let a = rule.scad_a;
            if r <= 2.0 * lambda {
                r - lambda
            } else if r < a * lambda {
                ((a - 1.0) * r - a * lambda) / (a - 2.0)
            } else {
                r
            }
        }
        ThresholdFamily::Mcp => {
            let g = rule.mcp_gamma;
            if r <= g * lambda {
                (r - lambda) * g / (g - 1.0)
            } else {
                r
            }
        }
    }
}

/// Free-function form of [`ThresholdRule::apply_uni`].
pub fn apply_uni(rule: &ThresholdRule, x: f64, lambda: f64) -> f64 {
    rule.apply_uni(x, lambda)
}

/// Free-function form of [`ThresholdRule::apply_multi`].
pub fn apply_multi(rule: &ThresholdRule, x: &[f64], lambda: f64, weights: &[f64]) -> Vec<f64> {
    rule.apply_multi(x, lambda, weights)
}
