//! `heat`: synthetic data, multi-site estimation, evaluation and benchmarks.
//!
//! Exit status is 0 on success, 2 for invalid input (bad flags, configs,
//! CSVs or missing files) and 1 for runtime failures.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use heat::datagen::GraphKind;
use heat::eval::LossKind;
use heat::threshold::ThresholdFamily;

/// An input problem detected by the CLI itself; maps to exit status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug, Parser)]
#[command(name = "heat", version, about = "Heterogeneous sparse precision matrices from multi-site summaries")]
pub struct Cli {
    /// TOML config, or a `manifest.json` from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads (0 uses every core). Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic ensemble and per-site data.
    Synth(SynthArgs),
    /// Run HEAT / IteHEAT over a directory of site CSVs.
    Run(RunArgs),
    /// Score an estimate directory against truth CSVs.
    Eval(EvalArgs),
    /// Replicated experiment over a grid of settings.
    Bench(BenchArgs),
    /// Suggested number of rounds.
    Rounds(RoundsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long = "M", alias = "sites")]
    pub sites: Option<usize>,
    #[arg(long)]
    pub n0: Option<usize>,
    #[arg(long)]
    pub hete_ratio: Option<f64>,
    #[arg(long)]
    pub graph: Option<GraphKind>,
    /// ER expected degree or bandwidth.
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimationArgs {
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Split proportion for rounds ≥ 2 (0 reuses the full sample).
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Node-wise penalty constant `c` in `c·√(log p / n)`.
    #[arg(long)]
    pub lambda_c: Option<f64>,
    /// Choose each column's penalty by 5-fold cross-validation.
    #[arg(long)]
    pub lambda_cv: bool,
    /// Threshold family for both parts.
    #[arg(long)]
    pub rule: Option<ThresholdFamily>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub level_scale: Option<f64>,
    /// Select a global level multiplier on held-out rows.
    #[arg(long)]
    pub tune: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Directory of `site_<m>.csv` files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    /// Record wall-clock times in the ledger and `timings.json`.
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directory of `run`.
    #[arg(long)]
    pub estimate: Option<PathBuf>,
    /// Directory holding `omega_<m>.csv`; defaults to the data directory.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long, value_parser = parse_r)]
    pub r: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    pub n0: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub p: Vec<usize>,
    #[arg(long = "M", alias = "sites", value_delimiter = ',')]
    pub sites: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub hete_ratio: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub graph: Vec<GraphKind>,
    #[arg(long, value_delimiter = ',')]
    pub rule: Vec<ThresholdFamily>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long, value_parser = parse_r)]
    pub r: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub tune: bool,
    #[arg(long)]
    pub no_baseline: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RoundsArgs {
    #[arg(long = "M")]
    pub sites: usize,
    #[arg(long)]
    pub p: usize,
    /// Smallest site sample size.
    #[arg(long)]
    pub n: usize,
    /// Total sample size; defaults to `M·n`.
    #[arg(long = "N")]
    pub total: Option<usize>,
    #[arg(long)]
    pub s0: usize,
}

/// The command line only offers r ∈ {1, 2}.
fn parse_r(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(r) if r == 1.0 || r == 2.0 => Ok(r),
        _ => Err(format!("r must be 1 or 2, got `{s}`")),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<Usage>().is_some() || e.downcast_ref::<heat::Error>().is_some_and(heat::Error::is_validation)
    });
    if validation {
        2
    } else {
        1
    }
}

/// The error chain joined by `: `, skipping causes already quoted by
/// their parent's message.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = err.to_string();
    for cause in err.chain().skip(1) {
        let text = cause.to_string();
        if !msg.contains(&text) {
            msg = format!("{msg}: {text}");
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn only_unit_and_square_powers_parse() {
        assert_eq!(parse_r("1"), Ok(1.0));
        assert_eq!(parse_r("2.0"), Ok(2.0));
        assert!(parse_r("1.5").is_err());
    }

    #[test]
    fn validation_errors_map_to_two() {
        let missing = heat::io::read_matrix("/definitely/not/here.csv").unwrap_err();
        assert_eq!(exit_code(&anyhow::Error::new(missing).context("reading truth")), 2);
        assert_eq!(exit_code(&anyhow::Error::new(Usage("bad".into()))), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("boom")), 1);
    }
}
