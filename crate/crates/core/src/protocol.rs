//! In-process multi-site runtime. Sites and the coordinator exchange typed
//! messages whose payloads are serialized to little-endian `f64`s; every
//! message is recorded in a [`RunLedger`].
//!
//! Payload schemas depend on `p` (and on the candidate count while tuning)
//! but never on a site's sample size, so raw rows cannot travel.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{heat_at_levels, iteheat_round, shrinkage_levels_round1, HeatEstimate, ShrinkageConfig};
use crate::error::{Error, Result};
use crate::lasso::LassoConfig;
use crate::matrix::Matrix;
use crate::seed::{self, stream};
use crate::site::{LambdaRule, LocalSummary, SiteDataset, SiteState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    /// `(nₘ, κₘ, Ω̄⁽ᵐ⁾, v̂⁽ᵐ⁾)`.
    SummaryUpload,
    /// `Ω̃⁽ᵐ,ᵗ⁾` back to site `m`.
    EstimateBroadcast,
    /// `Ω̄⁽ᵐ,ᵗ⁾`.
    IterUpload,
    /// Candidate estimates for level tuning.
    CandidateBroadcast,
    /// Held-out scores for the candidates.
    ScoreUpload,
}

impl MessageKind {
    pub const ALL: [MessageKind; 5] = [
        MessageKind::SummaryUpload,
        MessageKind::EstimateBroadcast,
        MessageKind::IterUpload,
        MessageKind::CandidateBroadcast,
        MessageKind::ScoreUpload,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::SummaryUpload => "summary_upload",
            MessageKind::EstimateBroadcast => "estimate_broadcast",
            MessageKind::IterUpload => "iter_upload",
            MessageKind::CandidateBroadcast => "candidate_broadcast",
            MessageKind::ScoreUpload => "score_upload",
        }
    }

    /// Scalars carried for dimension `p` with `candidates` tuning candidates.
    pub fn schema_scalars(self, p: usize, candidates: usize) -> usize {
        match self {
            MessageKind::SummaryUpload => 2 * p * p + 2,
            MessageKind::EstimateBroadcast | MessageKind::IterUpload => p * p,
            MessageKind::CandidateBroadcast => candidates * p * p,
            MessageKind::ScoreUpload => candidates,
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Party {
    Coordinator,
    Site(usize),
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Coordinator => f.write_str("coordinator"),
            Party::Site(id) => write!(f, "site_{id}"),
        }
    }
}

/// Typed message contents. Every field is a count, a proportion, a p×p
/// matrix or a short score vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Summary { n: usize, kappa: f64, omega_bar: Matrix, v_hat: Matrix },
    Estimate(Matrix),
    Iterate(Matrix),
    Candidates(Vec<Matrix>),
    Scores(Vec<f64>),
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Summary { .. } => MessageKind::SummaryUpload,
            Payload::Estimate(_) => MessageKind::EstimateBroadcast,
            Payload::Iterate(_) => MessageKind::IterUpload,
            Payload::Candidates(_) => MessageKind::CandidateBroadcast,
            Payload::Scores(_) => MessageKind::ScoreUpload,
        }
    }

    fn scalars(&self) -> Vec<f64> {
        match self {
            Payload::Summary { n, kappa, omega_bar, v_hat } => {
                let mut out = vec![*n as f64, *kappa];
                out.extend_from_slice(omega_bar.as_slice());
                out.extend_from_slice(v_hat.as_slice());
                out
            }
            Payload::Estimate(m) | Payload::Iterate(m) => m.as_slice().to_vec(),
            Payload::Candidates(ms) => ms.iter().flat_map(|m| m.as_slice().iter().copied()).collect(),
            Payload::Scores(v) => v.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        self.scalars().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Inverse of [`Payload::encode`] for a known dimension.
    pub fn decode(kind: MessageKind, p: usize, bytes: &[u8]) -> Result<Payload> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::Protocol(format!("{kind} payload of {} bytes is not a whole number of scalars", bytes.len())));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let pp = p * p;
        let wrong = |expected: usize| {
            Error::Protocol(format!("{kind} payload has {} scalars, schema expects {expected}", vals.len()))
        };
        let mat = |s: &[f64]| Matrix::from_vec(p, p, s.to_vec());
        match kind {
            MessageKind::SummaryUpload => {
                if vals.len() != 2 * pp + 2 {
                    return Err(wrong(2 * pp + 2));
                }
                let n = vals[0];
                if !(n >= 1.0 && n.fract() == 0.0) {
                    return Err(Error::Protocol(format!("sample size {n} is not a positive count")));
                }
                Ok(Payload::Summary {
                    n: n as usize,
                    kappa: vals[1],
                    omega_bar: mat(&vals[2..2 + pp])?,
                    v_hat: mat(&vals[2 + pp..])?,
                })
            }
            MessageKind::EstimateBroadcast | MessageKind::IterUpload => {
                if vals.len() != pp {
                    return Err(wrong(pp));
                }
                let m = mat(&vals)?;
                Ok(if kind == MessageKind::IterUpload {
                    Payload::Iterate(m)
                } else {
                    Payload::Estimate(m)
                })
            }
            MessageKind::CandidateBroadcast => {
                if pp == 0 || !vals.len().is_multiple_of(pp) {
                    return Err(wrong(pp));
                }
                Ok(Payload::Candidates(vals.chunks_exact(pp).map(mat).collect::<Result<_>>()?))
            }
            MessageKind::ScoreUpload => Ok(Payload::Scores(vals)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: Party,
    pub receiver: Party,
    pub round: usize,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(sender: Party, receiver: Party, round: usize, payload: &Payload) -> Self {
        Message {
            kind: payload.kind(),
            sender,
            receiver,
            round,
            payload: payload.encode(),
        }
    }

    pub fn scalars(&self) -> usize {
        self.payload.len() / 8
    }

    pub fn bytes(&self) -> usize {
        self.payload.len()
    }

    pub fn open(&self, p: usize) -> Result<Payload> {
        Payload::decode(self.kind, p, &self.payload)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub kind: MessageKind,
    pub sender: String,
    pub receiver: String,
    pub scalars: usize,
    pub bytes: usize,
    /// Compute time of the phase that produced the message.
    pub millis: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub round: usize,
    pub phase: String,
    pub millis: u64,
}

/// Every message of a run, in send order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub entries: Vec<LedgerEntry>,
    pub phases: Vec<PhaseTiming>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTotals {
    pub round: usize,
    pub messages: usize,
    pub scalars: usize,
    pub bytes: usize,
}

impl RunLedger {
    pub fn record(&mut self, msg: &Message, millis: u64) {
        self.entries.push(LedgerEntry {
            round: msg.round,
            kind: msg.kind,
            sender: msg.sender.to_string(),
            receiver: msg.receiver.to_string(),
            scalars: msg.scalars(),
            bytes: msg.bytes(),
            millis,
        });
    }

    fn phase(&mut self, round: usize, phase: &str, started: Instant) -> u64 {
        let millis = started.elapsed().as_millis() as u64;
        self.phases.push(PhaseTiming {
            round,
            phase: phase.to_string(),
            millis,
        });
        millis
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.scalars).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn per_round(&self) -> Vec<RoundTotals> {
        let mut out: Vec<RoundTotals> = Vec::new();
        for e in &self.entries {
            if out.last().is_none_or(|r| r.round != e.round) {
                out.push(RoundTotals {
                    round: e.round,
                    ..Default::default()
                });
            }
            let r = out.last_mut().expect("pushed above");
            r.messages += 1;
            r.scalars += e.scalars;
            r.bytes += e.bytes;
        }
        out
    }

    /// `round,kind,sender,receiver,scalars,bytes,millis`. Without
    /// `timings` the millis column is 0 so reruns are byte-identical.
    pub fn write_csv(&self, path: impl AsRef<Path>, timings: bool) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["round", "kind", "sender", "receiver", "scalars", "bytes", "millis"])
            .map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            let millis = if timings { e.millis } else { 0 };
            w.write_record([
                e.round.to_string(),
                e.kind.name().to_string(),
                e.sender.clone(),
                e.receiver.clone(),
                e.scalars.to_string(),
                e.bytes.to_string(),
                millis.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Protocol(format!("{}: {other:?}", path.display())),
    }
}

/// Closed-form scalar total for `M` sites, dimension `p` and `T` rounds
/// without tuning.
pub fn expected_scalars(sites: usize, p: usize, rounds: usize) -> usize {
    let pp = p * p;
    sites * (2 * pp + 2) + sites * pp + rounds.saturating_sub(1) * 2 * sites * pp
}

/// Held-out tuning of [`ShrinkageConfig::level_scale`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTuning {
    /// Fraction of each site's rows held out for scoring.
    pub holdout: f64,
    pub grid: Vec<f64>,
}

impl Default for LevelTuning {
    fn default() -> Self {
        LevelTuning {
            holdout: 0.2,
            // 2^(k/2) for k = −4..=2
            grid: (-4..=2).map(|k| 2f64.powf(k as f64 / 2.0)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub lambda: LambdaRule,
    pub lasso: LassoConfig,
    pub shrinkage: ShrinkageConfig,
    /// Split proportion shared by all sites; 0 disables splitting.
    pub kappa: f64,
    pub seed: u64,
    pub tuning: Option<LevelTuning>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            lambda: LambdaRule::default(),
            lasso: LassoConfig::default(),
            shrinkage: ShrinkageConfig::default(),
            kappa: 0.0,
            seed: 0,
            tuning: None,
        }
    }
}

/// A site actor. Holds its rows and local state; talks only via messages.
struct Site {
    data: SiteDataset,
    state: Option<SiteState>,
    current: Option<Matrix>,
}

impl Site {
    fn id(&self) -> usize {
        self.data.site_id()
    }

    fn local_step(&mut self, config: &ProtocolConfig) -> Result<Message> {
        let id = self.id();
        let cv_seed = seed::derive(seed::derive(config.seed, stream::CROSS_VALIDATION), id as u64);
        let penalties = config.lambda.penalties(&self.data, &config.lasso, cv_seed)?;
        let state = SiteState::estimate(&self.data, &penalties, &config.lasso)?;
        let s = state.summarize();
        self.state = Some(state);
        Ok(Message::new(
            Party::Site(id),
            Party::Coordinator,
            1,
            &Payload::Summary {
                n: s.n,
                kappa: config.kappa,
                omega_bar: s.omega_bar,
                v_hat: s.v_hat,
            },
        ))
    }

    fn prepare_split(&mut self, config: &ProtocolConfig) -> Result<()> {
        let split_seed = seed::derive(seed::derive(config.seed, stream::SITE_SPLIT), self.id() as u64);
        let state = self.state.as_mut().ok_or_else(|| Error::Protocol("split before local estimation".into()))?;
        state.prepare_split(&self.data, config.kappa, &config.lasso, split_seed)
    }

    fn receive(&mut self, msg: &Message, p: usize) -> Result<()> {
        match msg.open(p)? {
            Payload::Estimate(m) => {
                self.current = Some(m);
                Ok(())
            }
            other => Err(Error::Protocol(format!("site {} cannot handle {}", self.id(), other.kind()))),
        }
    }

    fn iterate(&self, round: usize) -> Result<Message> {
        let state = self.state.as_ref().ok_or_else(|| Error::Protocol("iterate before local estimation".into()))?;
        let current = self
            .current
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("site {} has no broadcast estimate", self.id())))?;
        let next = state.iterate(current)?;
        Ok(Message::new(Party::Site(self.id()), Party::Coordinator, round, &Payload::Iterate(next)))
    }
}

/// Everything a simulated run produced. `local_estimates` are the sites'
/// unsymmetrized `Ω̂⁽ᵐ⁾`, exposed for evaluation only; they are never sent.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub estimates: Vec<HeatEstimate>,
    pub ledger: RunLedger,
    pub local_estimates: Vec<Matrix>,
    pub summaries: Vec<LocalSummary>,
    pub penalties: Vec<Vec<f64>>,
    pub level_scale: f64,
    pub tuning_scores: Option<Vec<f64>>,
}

impl Simulation {
    pub fn final_estimate(&self) -> &HeatEstimate {
        self.estimates.last().expect("at least one round")
    }
}

fn ordered_sites(datasets: &[SiteDataset]) -> Result<Vec<SiteDataset>> {
    if datasets.is_empty() {
        return Err(Error::invalid("at least one site dataset is required"));
    }
    let p = datasets[0].p();
    for d in datasets {
        if d.p() != p {
            return Err(Error::dim(format!("site {} has {} columns, expected {p}", d.site_id(), d.p())));
        }
    }
    let mut sorted = datasets.to_vec();
    sorted.sort_by_key(|d| d.site_id());
    if let Some(w) = sorted.windows(2).find(|w| w[0].site_id() == w[1].site_id()) {
        return Err(Error::invalid(format!("duplicate site id {}", w[0].site_id())));
    }
    Ok(sorted)
}

/// Runs on every site concurrently, keeping site-id order in the output.
fn on_sites<T: Send>(sites: &mut [Site], f: impl Fn(&mut Site) -> Result<T> + Sync) -> Result<Vec<T>> {
    sites
        .par_iter_mut()
        .map(|s| {
            let id = s.id();
            f(s).map_err(|e| e.at_site(id))
        })
        .collect()
}

fn decode_summary(msg: &Message, p: usize) -> Result<LocalSummary> {
    let id = match msg.sender {
        Party::Site(id) => id,
        Party::Coordinator => return Err(Error::Protocol("summary sent by the coordinator".into())),
    };
    match msg.open(p)? {
        Payload::Summary { n, kappa, omega_bar, v_hat } => Ok(LocalSummary {
            site_id: id,
            n,
            omega_bar,
            v_hat,
            kappa,
        }),
        other => Err(Error::Protocol(format!("expected a summary upload, got {}", other.kind()))),
    }
}

/// One HEAT round: local estimation, upload, aggregation, broadcast.
pub fn run_heat(datasets: &[SiteDataset], config: &ProtocolConfig) -> Result<(HeatEstimate, RunLedger)> {
    let sim = simulate(datasets, 1, config)?;
    let est = sim.estimates.into_iter().next().expect("one round");
    Ok((est, sim.ledger))
}

/// HEAT followed by `rounds − 1` iterative rounds.
pub fn run_iteheat(datasets: &[SiteDataset], rounds: usize, config: &ProtocolConfig) -> Result<(Vec<HeatEstimate>, RunLedger)> {
    let sim = simulate(datasets, rounds, config)?;
    Ok((sim.estimates, sim.ledger))
}

/// Full simulated run over `rounds ≥ 1` rounds.
pub fn simulate(datasets: &[SiteDataset], rounds: usize, config: &ProtocolConfig) -> Result<Simulation> {
    if rounds == 0 {
        return Err(Error::invalid("at least one round is required"));
    }
    if !(0.0..1.0).contains(&config.kappa) {
        return Err(Error::invalid(format!("split proportion {} must lie in [0, 1)", config.kappa)));
    }
    config.shrinkage.validate()?;
    let ordered = ordered_sites(datasets)?;
    let p = ordered[0].p();
    let mut ledger = RunLedger::default();

    let mut shrinkage = config.shrinkage;
    let mut tuning_scores = None;
    if let Some(tuning) = &config.tuning {
        let (scale, scores) = tune_level_scale(&ordered, config, tuning, &mut ledger)?;
        shrinkage.level_scale *= scale;
        tuning_scores = Some(scores);
    }

    let mut sites: Vec<Site> = ordered
        .into_iter()
        .map(|data| Site {
            data,
            state: None,
            current: None,
        })
        .collect();

    let started = Instant::now();
    let uploads = on_sites(&mut sites, |s| s.local_step(config))?;
    let millis = ledger.phase(1, "local_estimation", started);
    for m in &uploads {
        ledger.record(m, millis);
    }

    let started = Instant::now();
    let summaries: Vec<LocalSummary> = uploads.iter().map(|m| decode_summary(m, p)).collect::<Result<_>>()?;
    let levels = shrinkage_levels_round1(&summaries, &shrinkage)?;
    let first = heat_at_levels(&summaries, levels, &shrinkage)?;
    let millis = ledger.phase(1, "aggregation", started);
    info!("round 1 aggregated over {} sites", summaries.len());
    broadcast(&mut sites, &first, p, millis, &mut ledger)?;

    let mut estimates = vec![first];
    if rounds > 1 {
        let started = Instant::now();
        on_sites(&mut sites, |s| s.prepare_split(config))?;
        ledger.phase(1, "split", started);
        let variances: Vec<&Matrix> = summaries.iter().map(|s| &s.v_hat).collect();
        let kappas: Vec<f64> = summaries
            .iter()
            .map(|s| if s.kappa == 0.0 { 1.0 } else { s.kappa })
            .collect();
        for t in 2..=rounds {
            let started = Instant::now();
            let msgs = on_sites(&mut sites, |s| s.iterate(t))?;
            let millis = ledger.phase(t, "iterate_debias", started);
            for m in &msgs {
                ledger.record(m, millis);
            }
            let started = Instant::now();
            let uploads: Vec<(usize, Matrix)> = msgs
                .iter()
                .map(|m| match (m.sender, m.open(p)?) {
                    (Party::Site(id), Payload::Iterate(o)) => Ok((id, o)),
                    _ => Err(Error::Protocol("malformed iterate upload".into())),
                })
                .collect::<Result<_>>()?;
            let prev = estimates.last().expect("nonempty");
            let next = iteheat_round(prev, &uploads, &variances, &kappas, &shrinkage)?;
            let millis = ledger.phase(t, "aggregation", started);
            debug!("round {t} aggregated");
            broadcast(&mut sites, &next, p, millis, &mut ledger)?;
            estimates.push(next);
        }
    }

    let local_estimates = sites
        .iter()
        .map(|s| s.state.as_ref().expect("estimated").fit.omega_hat.clone())
        .collect();
    let penalties = sites
        .iter()
        .map(|s| s.state.as_ref().expect("estimated").fit.penalties.clone())
        .collect();
    Ok(Simulation {
        estimates,
        ledger,
        local_estimates,
        summaries,
        penalties,
        level_scale: shrinkage.level_scale,
        tuning_scores,
    })
}

fn broadcast(sites: &mut [Site], est: &HeatEstimate, p: usize, millis: u64, ledger: &mut RunLedger) -> Result<()> {
    for (site, omega) in sites.iter_mut().zip(&est.omega_tildes) {
        let msg = Message::new(Party::Coordinator, Party::Site(site.id()), est.round, &Payload::Estimate(omega.clone()));
        ledger.record(&msg, millis);
        site.receive(&msg, p).map_err(|e| e.at_site(site.id()))?;
    }
    Ok(())
}

/// `tr(SΩ) − log det Ω`, infinite when `Ω` is not positive definite.
pub fn gaussian_nll(omega: &Matrix, sample_cov: &Matrix) -> f64 {
    match omega.cholesky() {
        Ok(ch) => {
            let p = omega.rows();
            let mut tr = 0.0;
            for j in 0..p {
                for k in 0..p {
                    tr += sample_cov[(j, k)] * omega[(k, j)];
                }
            }
            tr - ch.log_det()
        }
        Err(_) => f64::INFINITY,
    }
}

/// Round 0: each site holds out rows, the coordinator broadcasts one HEAT
/// candidate per multiplier, sites score them on held-out rows.
fn tune_level_scale(
    ordered: &[SiteDataset],
    config: &ProtocolConfig,
    tuning: &LevelTuning,
    ledger: &mut RunLedger,
) -> Result<(f64, Vec<f64>)> {
    if !(tuning.holdout > 0.0 && tuning.holdout < 1.0) {
        return Err(Error::invalid(format!("holdout fraction {} must lie in (0, 1)", tuning.holdout)));
    }
    if tuning.grid.is_empty() || tuning.grid.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
        return Err(Error::invalid("tuning grid must be nonempty with finite nonnegative multipliers"));
    }
    let p = ordered[0].p();
    struct Held {
        train: Site,
        holdout_cov: Matrix,
        n_hold: usize,
    }
    let base = seed::derive(config.seed, stream::HOLDOUT);
    let mut held: Vec<Held> = ordered
        .iter()
        .map(|d| {
            let n = d.n();
            let n_hold = (tuning.holdout * n as f64).round() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut seed::rng(seed::derive(base, d.site_id() as u64)));
            let (hold, train) = idx.split_at(n_hold);
            let mut hold = hold.to_vec();
            let mut train = train.to_vec();
            hold.sort_unstable();
            train.sort_unstable();
            let train_rows = d.raw().select_rows(&train);
            let means = train_rows.column_means();
            let h = d.raw().select_rows(&hold);
            let centered = Matrix::from_fn(h.rows(), p, |i, j| h[(i, j)] - means[j]);
            let holdout_cov = if n_hold > 0 { centered.scaled_gram() } else { Matrix::zeros(p, p) };
            Ok(Held {
                train: Site {
                    data: SiteDataset::new(d.site_id(), train_rows).map_err(|e| e.at_site(d.site_id()))?,
                    state: None,
                    current: None,
                },
                holdout_cov,
                n_hold,
            })
        })
        .collect::<Result<_>>()?;
    if held.iter().any(|h| h.n_hold == 0) {
        return Err(Error::invalid("holdout fraction leaves some site with no held-out rows"));
    }

    let started = Instant::now();
    let uploads: Vec<Message> = held
        .par_iter_mut()
        .map(|h| {
            let id = h.train.id();
            let mut m = h.train.local_step(config).map_err(|e| e.at_site(id))?;
            m.round = 0;
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let millis = ledger.phase(0, "tuning_local", started);
    for m in &uploads {
        ledger.record(m, millis);
    }
    let summaries: Vec<LocalSummary> = uploads.iter().map(|m| decode_summary(m, p)).collect::<Result<_>>()?;
    let base_levels = shrinkage_levels_round1(&summaries, &config.shrinkage)?;
    let candidates: Vec<HeatEstimate> = tuning
        .grid
        .iter()
        .map(|&g| heat_at_levels(&summaries, base_levels.scaled(g), &config.shrinkage))
        .collect::<Result<_>>()?;

    let mut totals = vec![0.0; tuning.grid.len()];
    for (m, h) in held.iter().enumerate() {
        let id = h.train.id();
        let mats: Vec<Matrix> = candidates.iter().map(|c| c.omega_tildes[m].clone()).collect();
        let msg = Message::new(Party::Coordinator, Party::Site(id), 0, &Payload::Candidates(mats));
        ledger.record(&msg, 0);
        let scores = match msg.open(p)? {
            Payload::Candidates(ms) => ms.iter().map(|o| gaussian_nll(o, &h.holdout_cov)).collect(),
            _ => unreachable!("candidate payload"),
        };
        let reply = Message::new(Party::Site(id), Party::Coordinator, 0, &Payload::Scores(scores));
        ledger.record(&reply, 0);
        match reply.open(p)? {
            Payload::Scores(s) => {
                for (t, v) in totals.iter_mut().zip(s) {
                    *t += h.n_hold as f64 * v;
                }
            }
            _ => unreachable!("score payload"),
        }
    }
    let best = totals
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| tuning.grid[i]);
    let chosen = best.unwrap_or(1.0);
    info!("level multiplier {chosen} selected by held-out likelihood");
    Ok((chosen, totals))
}

/// Suggested round count
/// `max(2, ⌈1 + log(a/b) / log(√(n/log p)/s₀)⌉)` with
/// `a = √(M + log p) + s₀√(M/n)·log p` and `b = √(log p) + (M/√N)·log p`.
pub fn suggest_rounds(sites: usize, p: usize, n: usize, total: usize, s0: usize) -> Result<usize> {
    if sites == 0 || p < 2 || n == 0 || total == 0 || s0 == 0 {
        return Err(Error::invalid("M, n, N and s0 must be positive and p at least 2"));
    }
    let (m, n, big_n, s0) = (sites as f64, n as f64, total as f64, s0 as f64);
    let lp = (p as f64).ln();
    let contraction = s0 * (lp / n).sqrt();
    if contraction >= 1.0 {
        return Err(Error::invalid(format!(
            "s0·√(log p / n) = {contraction:.4} ≥ 1: the iteration does not contract; more samples per site are needed"
        )));
    }
    let a = (m + lp).sqrt() + s0 * (m / n).sqrt() * lp;
    let b = lp.sqrt() + m / big_n.sqrt() * lp;
    let t = 1.0 + (a / b).ln() / (1.0 / contraction).ln();
    Ok((t.ceil().max(2.0)) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{GraphSpec, Synthetic};

    fn small(seed: u64, sites: usize, p: usize) -> Synthetic {
        Synthetic::generate(&GraphSpec::erdos_renyi(p, 2, 0.5, sites, seed), 120).unwrap()
    }

    #[test]
    fn payload_roundtrip_every_kind() {
        let p = 3;
        let a = Matrix::from_fn(p, p, |j, k| (j * 3 + k) as f64 * 0.1);
        let payloads = [
            Payload::Summary { n: 77, kappa: 0.5, omega_bar: a.clone(), v_hat: a.scale(2.0) },
            Payload::Estimate(a.clone()),
            Payload::Iterate(a.clone()),
            Payload::Candidates(vec![a.clone(), a.scale(3.0)]),
            Payload::Scores(vec![1.0, 2.5]),
        ];
        for pl in payloads {
            let msg = Message::new(Party::Site(1), Party::Coordinator, 1, &pl);
            assert_eq!(msg.bytes(), 8 * msg.scalars());
            assert_eq!(msg.scalars(), pl.kind().schema_scalars(p, 2));
            assert_eq!(msg.open(p).unwrap(), pl);
        }
    }

    #[test]
    fn decode_rejects_wrong_sizes() {
        assert!(Payload::decode(MessageKind::IterUpload, 3, &[0u8; 8 * 8]).is_err());
        assert!(Payload::decode(MessageKind::SummaryUpload, 2, &[0u8; 7]).is_err());
    }

    #[test]
    fn ledger_matches_closed_form() {
        let syn = small(1, 3, 6);
        for rounds in 1..=3 {
            let (ests, ledger) = run_iteheat(&syn.datasets, rounds, &ProtocolConfig::default()).unwrap();
            assert_eq!(ests.len(), rounds);
            assert_eq!(ledger.total_scalars(), expected_scalars(3, 6, rounds));
            assert_eq!(ledger.total_bytes(), 8 * ledger.total_scalars());
            assert_eq!(ledger.count(MessageKind::SummaryUpload), 3);
            assert_eq!(ledger.count(MessageKind::EstimateBroadcast), 3 * rounds);
            let per: usize = ledger.per_round().iter().map(|r| r.scalars).sum();
            assert_eq!(per, ledger.total_scalars());
        }
    }

    #[test]
    fn single_round_equals_run_heat() {
        let syn = small(2, 2, 5);
        let cfg = ProtocolConfig::default();
        let (a, _) = run_heat(&syn.datasets, &cfg).unwrap();
        let (b, _) = run_iteheat(&syn.datasets, 1, &cfg).unwrap();
        assert_eq!(a, b[0]);
    }

    #[test]
    fn site_order_does_not_matter() {
        let syn = small(3, 3, 5);
        let cfg = ProtocolConfig::default();
        let (a, _) = run_iteheat(&syn.datasets, 2, &cfg).unwrap();
        let mut rev = syn.datasets.clone();
        rev.reverse();
        let (b, _) = run_iteheat(&rev, 2, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn width_mismatch_is_a_validation_error() {
        let bad = SiteDataset::new(7, Matrix::zeros(20, 3)).unwrap();
        let mut ds = small(4, 2, 4).datasets;
        ds.push(bad);
        assert!(run_heat(&ds, &ProtocolConfig::default()).unwrap_err().is_validation());
    }

    #[test]
    fn site_errors_carry_the_site_id() {
        let ds = small(5, 2, 4).datasets;
        let cfg = ProtocolConfig {
            lambda: LambdaRule::Scaled { c: -1.0 },
            ..Default::default()
        };
        match run_heat(&ds, &cfg).unwrap_err() {
            Error::Site { site_id, .. } => assert_eq!(site_id, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tuning_adds_round_zero_traffic() {
        let syn = small(6, 2, 4);
        let cfg = ProtocolConfig {
            tuning: Some(LevelTuning::default()),
            ..Default::default()
        };
        let sim = simulate(&syn.datasets, 1, &cfg).unwrap();
        let grid = LevelTuning::default().grid.len();
        assert!(LevelTuning::default().grid.contains(&sim.level_scale));
        assert_eq!(sim.ledger.count(MessageKind::CandidateBroadcast), 2);
        let tuning_scalars: usize = sim.ledger.entries.iter().filter(|e| e.round == 0).map(|e| e.scalars).sum();
        assert_eq!(tuning_scalars, 2 * (2 * 16 + 2) + 2 * grid * 16 + 2 * grid);
        assert_eq!(sim.ledger.total_scalars() - tuning_scalars, expected_scalars(2, 4, 1));
    }

    #[test]
    fn suggest_rounds_examples() {
        assert_eq!(suggest_rounds(5, 100, 400, 2000, 5).unwrap(), 3);
        assert!(suggest_rounds(5, 100, 20, 100, 5).is_err());
        let mut last = usize::MAX;
        for n in [300, 400, 800, 1600, 3200, 6400] {
            let t = suggest_rounds(5, 100, n, 5 * n, 5).unwrap();
            assert!(t <= last && t >= 2);
            last = t;
        }
    }

    #[test]
    fn nll_is_infinite_off_the_cone() {
        let bad = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(gaussian_nll(&bad, &Matrix::identity(2)).is_infinite());
        assert!((gaussian_nll(&Matrix::identity(2), &Matrix::identity(2)) - 2.0).abs() < 1e-15);
    }
}
