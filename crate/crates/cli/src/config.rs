//! Layered run configuration: defaults, then a TOML file (or a previous
//! `manifest.json`), then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use heat::datagen::GraphKind;
use heat::eval::LossKind;
use heat::lasso::LassoConfig;
use heat::protocol::{LevelTuning, ProtocolConfig};
use heat::aggregate::ShrinkageConfig;
use heat::site::LambdaRule;
use heat::threshold::ThresholdFamily;
use serde::{Deserialize, Serialize};

use crate::Usage;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub estimation: EstimationConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub p: usize,
    pub sites: usize,
    pub n0: usize,
    pub hete_ratio: f64,
    pub graph: GraphKind,
    /// ER expected degree or bandwidth.
    pub degree: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            p: 100,
            sites: 5,
            n0: 400,
            hete_ratio: 0.0,
            graph: GraphKind::ErdosRenyi,
            degree: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub rounds: usize,
    pub kappa: f64,
    pub seed: u64,
    pub lambda: LambdaRule,
    pub lasso: LassoConfig,
    pub shrinkage: ShrinkageConfig,
    /// Held-out selection of a global level multiplier.
    pub tune: bool,
    pub tuning: LevelTuning,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            rounds: 3,
            kappa: 0.0,
            seed: 0,
            lambda: LambdaRule::default(),
            lasso: LassoConfig::default(),
            shrinkage: ShrinkageConfig::default(),
            tune: false,
            tuning: LevelTuning::default(),
        }
    }
}

impl EstimationConfig {
    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            lambda: self.lambda,
            lasso: self.lasso,
            shrinkage: self.shrinkage,
            kappa: self.kappa,
            seed: self.seed,
            tuning: self.tune.then(|| self.tuning.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub loss: LossKind,
    pub r: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { loss: LossKind::L1, r: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n0: Vec<usize>,
    pub p: Vec<usize>,
    pub sites: Vec<usize>,
    pub hete_ratio: Vec<f64>,
    pub graph: Vec<GraphKind>,
    pub rule: Vec<ThresholdFamily>,
    pub rounds: usize,
    pub reps: usize,
    pub seed: u64,
    pub baseline: bool,
    /// Statistic drawn in `chart.svg`.
    pub chart_statistic: String,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n0: vec![400],
            p: vec![100],
            sites: vec![5],
            hete_ratio: vec![0.0],
            graph: vec![GraphKind::ErdosRenyi],
            rule: vec![ThresholdFamily::Scad],
            rounds: 3,
            reps: 32,
            seed: 0,
            baseline: true,
            chart_statistic: "frobenius_sq_over_p".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub estimate: PathBuf,
    pub truth: Option<PathBuf>,
    pub evaluation: PathBuf,
    pub bench: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "data".into(),
            estimate: "estimate".into(),
            truth: None,
            evaluation: "evaluation".into(),
            bench: "bench".into(),
        }
    }
}

/// Manifest wrapper written next to every output.
#[derive(Debug, Deserialize)]
struct ManifestConfig {
    config: RunConfig,
}

impl RunConfig {
    /// Reads a TOML config, or the `config` member of a JSON manifest.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg = if is_json {
            serde_json::from_str::<ManifestConfig>(&text)
                .map(|m| m.config)
                .map_err(|e| Usage(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }
}
