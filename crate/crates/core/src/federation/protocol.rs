//! Coordinator and center state machines.
//!
//! Rounds are synchronous: the coordinator advances a phase only once every
//! registered center has reported, and reduces center payloads in center-id
//! order so that delivery order never affects the numbers.
//!
//! ```text
//! center                         coordinator
//!   StatsShare           ─────▶    merge, finalize
//!                        ◀─────  GlobalStatsBroadcast
//!   standardize, W_c(1)
//!   AdmmLocalShare(1)    ─────▶    W̃(1)
//!                        ◀─────  ConsensusBroadcast(1)
//!   α_c, W_c(2) ...                ...
//!                        ◀─────  ConsensusBroadcast(K, final)
//!   E_c, eigenpack
//!   EigenpackShare       ─────▶    aggregate
//!                        ◀─────  GlobalBasisBroadcast
//!   ScoresShare (opt.)   ─────▶
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;

use crate::admm::{
    consensus_update, correct, dual_update, max_primal_residual, AdmmConfig, AdmmTrace, ConsensusWeights,
    IterationDiagnostics, LocalAdmmState, LocalSolver,
};
use crate::config::FlatConfig;
use crate::error::{shape_err, CenterId, Error, Result};
use crate::federation::covariates::CovariateSpec;
use crate::federation::message::Message;
use crate::federation::transport::Address;
use crate::fpca::{aggregate, local_eigendecomposition, project, ComponentSelection, GlobalBasis, LocalEigenpack, Scores};
use crate::linalg::{frobenius, is_finite, mse};
use crate::stats::{CenterData, FeatureMoments, GlobalStats};
use crate::synth::standardized_truth;

pub const DEFAULT_SCORE_CAP: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub admm: AdmmConfig,
    /// Local eigenpack truncation, and the global component rule unless
    /// `m_components` is set.
    pub variance_threshold: f64,
    pub m_components: Option<usize>,
    pub covariates: CovariateSpec,
    pub share_scores: bool,
    /// Maximum score columns a center may share.
    pub score_cap: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            admm: AdmmConfig::default(),
            variance_threshold: 0.8,
            m_components: None,
            covariates: CovariateSpec::default(),
            share_scores: false,
            score_cap: DEFAULT_SCORE_CAP,
        }
    }
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 10] = [
        "rho",
        "admm_iterations",
        "tolerance",
        "penalty_scale",
        "variance_threshold",
        "m_components",
        "covariate_spec",
        "share_scores",
        "score_cap",
        "transport",
    ];

    pub fn validate(&self) -> Result<()> {
        self.admm.validate()?;
        if !(self.variance_threshold > 0.0 && self.variance_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "variance threshold must lie in (0, 1], got {}",
                self.variance_threshold
            )));
        }
        if self.m_components == Some(0) {
            return Err(Error::InvalidConfig("m_components must be at least 1".into()));
        }
        if self.share_scores && self.m_components.is_some_and(|m| m > self.score_cap) {
            return Err(Error::InvalidConfig(format!(
                "sharing {} score columns exceeds the cap of {}",
                self.m_components.unwrap_or_default(),
                self.score_cap
            )));
        }
        Ok(())
    }

    pub fn selection(&self) -> ComponentSelection {
        match self.m_components {
            Some(m) => ComponentSelection::Count(m),
            None => ComponentSelection::Threshold(self.variance_threshold),
        }
    }

    /// Applies recognized keys from a flat config; other keys are ignored.
    pub fn apply(&mut self, cfg: &FlatConfig) -> Result<()> {
        if let Some(v) = cfg.parsed("rho")? {
            self.admm.rho = v;
        }
        if let Some(v) = cfg.parsed("admm_iterations")? {
            self.admm.iterations = v;
        }
        if let Some(v) = cfg.get("tolerance") {
            self.admm.tolerance = match v {
                "" | "none" => None,
                _ => Some(cfg.parsed("tolerance")?.expect("present")),
            };
        }
        if let Some(v) = cfg.get("penalty_scale") {
            self.admm.penalty_scale = crate::admm::PenaltyScale::parse(v)?;
        }
        if let Some(v) = cfg.parsed("variance_threshold")? {
            self.variance_threshold = v;
        }
        if let Some(v) = cfg.get("m_components") {
            self.m_components = match v {
                "" | "none" => None,
                _ => Some(cfg.parsed("m_components")?.expect("present")),
            };
        }
        if let Some(v) = cfg.get("covariate_spec") {
            self.covariates = CovariateSpec::parse(v)?;
        }
        if let Some(v) = cfg.parsed("share_scores")? {
            self.share_scores = v;
        }
        if let Some(v) = cfg.parsed("score_cap")? {
            self.score_cap = v;
        }
        self.validate()
    }

    /// Canonical flat rendering; its hash identifies a configuration.
    pub fn to_flat(&self) -> FlatConfig {
        let mut f = FlatConfig::default();
        f.set("rho", self.admm.rho.to_string());
        f.set("admm_iterations", self.admm.iterations.to_string());
        f.set("tolerance", self.admm.tolerance.map(|t| t.to_string()).unwrap_or_else(|| "none".into()));
        f.set("penalty_scale", self.admm.penalty_scale.as_str());
        f.set("variance_threshold", self.variance_threshold.to_string());
        f.set(
            "m_components",
            self.m_components.map(|m| m.to_string()).unwrap_or_else(|| "none".into()),
        );
        f.set("covariate_spec", self.covariates.render());
        f.set("share_scores", self.share_scores.to_string());
        f.set("score_cap", self.score_cap.to_string());
        f
    }
}

/// Raw ground-truth weights, mapped into standardized units once the global
/// statistics are known. Evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub w: DMatrix<f64>,
    /// Covariate column holding the intercept, if any.
    pub intercept_column: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Standardize,
    Admm(u32),
    Pca,
    Scores,
    Done,
}

impl Phase {
    pub fn kind(self) -> PhaseKind {
        match self {
            Phase::Standardize => PhaseKind::Standardize,
            Phase::Admm(_) => PhaseKind::Admm,
            Phase::Pca => PhaseKind::Pca,
            Phase::Scores => PhaseKind::Scores,
            Phase::Done => PhaseKind::Done,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Standardize => write!(f, "standardize"),
            Phase::Admm(k) => write!(f, "admm({k})"),
            Phase::Pca => write!(f, "pca"),
            Phase::Scores => write!(f, "scores"),
            Phase::Done => write!(f, "done"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PhaseKind {
    Standardize,
    Admm,
    Pca,
    Scores,
    Done,
}

pub type Outbound = (Address, Message);

fn unexpected(phase: Phase, msg: &Message) -> Error {
    Error::UnexpectedPhase {
        phase: phase.to_string(),
        got: format!("{}(round {})", msg.kind().name(), msg.round()),
    }
}

/// Per-center scores collected by the coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterScores {
    pub center: CenterId,
    pub scores: Scores,
    pub labels: Option<Vec<String>>,
}

#[derive(Debug)]
pub struct CoordinatorState {
    config: PipelineConfig,
    roster: BTreeSet<CenterId>,
    phase: Phase,
    truth: Option<GroundTruth>,
    scaled_truth: Option<DMatrix<f64>>,
    stats_in: BTreeMap<CenterId, FeatureMoments>,
    global: Option<GlobalStats>,
    rho: f64,
    admm_in: BTreeMap<CenterId, LocalAdmmState>,
    w_tilde: Option<ConsensusWeights>,
    trace: AdmmTrace,
    packs_in: BTreeMap<CenterId, LocalEigenpack>,
    basis: Option<GlobalBasis>,
    scores_in: BTreeMap<CenterId, CenterScores>,
}

/// Everything the coordinator learns from a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorOutput {
    pub global_stats: GlobalStats,
    pub w_tilde: ConsensusWeights,
    pub trace: AdmmTrace,
    pub basis: GlobalBasis,
    pub scores: Vec<CenterScores>,
}

impl CoordinatorState {
    pub fn new(roster: impl IntoIterator<Item = CenterId>, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let roster: BTreeSet<_> = roster.into_iter().collect();
        if roster.is_empty() {
            return Err(Error::NoCenters);
        }
        Ok(Self {
            config,
            roster,
            phase: Phase::Standardize,
            truth: None,
            scaled_truth: None,
            stats_in: BTreeMap::new(),
            global: None,
            rho: 0.0,
            admm_in: BTreeMap::new(),
            w_tilde: None,
            trace: AdmmTrace::default(),
            packs_in: BTreeMap::new(),
            basis: None,
            scores_in: BTreeMap::new(),
        })
    }

    pub fn with_truth(mut self, truth: GroundTruth) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn trace(&self) -> &AdmmTrace {
        &self.trace
    }

    /// Centers the current phase is still waiting for.
    pub fn missing(&self) -> Vec<CenterId> {
        let have: BTreeSet<CenterId> = match self.phase {
            Phase::Standardize => self.stats_in.keys().copied().collect(),
            Phase::Admm(_) => self.admm_in.keys().copied().collect(),
            Phase::Pca => self.packs_in.keys().copied().collect(),
            Phase::Scores => self.scores_in.keys().copied().collect(),
            Phase::Done => return Vec::new(),
        };
        self.roster.difference(&have).copied().collect()
    }

    fn check_sender(&self, from: Address, msg: &Message) -> Result<CenterId> {
        let id = msg.sender().ok_or_else(|| unexpected(self.phase, msg))?;
        if from != Address::Center(id) {
            return Err(Error::InvalidConfig(format!("{from} sent a message signed by center {id}")));
        }
        if !self.roster.contains(&id) {
            return Err(Error::InvalidConfig(format!("center {id} is not registered")));
        }
        Ok(id)
    }

    /// Applies one inbound message. On error the state is left unchanged.
    pub fn handle(&mut self, from: Address, msg: Message) -> Result<Vec<Outbound>> {
        let id = self.check_sender(from, &msg)?;
        match (self.phase, msg) {
            (Phase::Standardize, Message::StatsShare { moments, .. }) => {
                if self.stats_in.contains_key(&id) {
                    return Err(Error::DuplicateSender(id));
                }
                if let Some(prev) = self.stats_in.values().next() {
                    if prev.n_features() != moments.n_features() {
                        return Err(shape_err(format!(
                            "center {id} reports {} features, others {}",
                            moments.n_features(),
                            prev.n_features()
                        )));
                    }
                }
                self.stats_in.insert(id, moments);
                if self.stats_in.len() < self.roster.len() {
                    return Ok(Vec::new());
                }
                let merged = FeatureMoments::merge_all(self.stats_in.values())?.ok_or(Error::NoCenters)?;
                let global = merged.finalize()?;
                self.rho = self.config.admm.effective_rho(global.n_total, self.roster.len());
                if let Some(t) = &self.truth {
                    self.scaled_truth = Some(standardized_truth(&t.w, &global, t.intercept_column)?);
                }
                self.global = Some(global.clone());
                self.phase = Phase::Admm(1);
                Ok(vec![(Address::AllCenters, Message::GlobalStatsBroadcast(global))])
            }
            (Phase::Admm(k), Message::AdmmLocalShare { round, w, alpha, .. }) if round == k => {
                if self.admm_in.contains_key(&id) {
                    return Err(Error::DuplicateSender(id));
                }
                if w.shape() != alpha.shape() {
                    return Err(shape_err(format!("center {id}: W {:?} vs α {:?}", w.shape(), alpha.shape())));
                }
                if let Some(prev) = self.admm_in.values().next() {
                    if prev.w.shape() != w.shape() {
                        return Err(shape_err(format!("center {id}: W {:?}, others {:?}", w.shape(), prev.w.shape())));
                    }
                }
                self.admm_in.insert(id, LocalAdmmState { w, alpha });
                if self.admm_in.len() < self.roster.len() {
                    return Ok(Vec::new());
                }
                self.finish_admm_round(k)
            }
            (Phase::Pca, Message::EigenpackShare { pack, .. }) => {
                if self.packs_in.contains_key(&id) {
                    return Err(Error::DuplicateSender(id));
                }
                self.packs_in.insert(id, pack);
                if self.packs_in.len() < self.roster.len() {
                    return Ok(Vec::new());
                }
                let packs: Vec<LocalEigenpack> = self.packs_in.values().cloned().collect();
                let basis = aggregate(&packs, self.config.selection())?;
                self.basis = Some(basis.clone());
                self.phase = if self.config.share_scores {
                    Phase::Scores
                } else {
                    Phase::Done
                };
                Ok(vec![(Address::AllCenters, Message::GlobalBasisBroadcast(basis))])
            }
            (Phase::Scores, Message::ScoresShare { scores, labels, .. }) => {
                if self.scores_in.contains_key(&id) {
                    return Err(Error::DuplicateSender(id));
                }
                let m = self.basis.as_ref().map_or(0, GlobalBasis::n_components);
                if scores.0.ncols() != m || scores.0.ncols() > self.config.score_cap {
                    return Err(shape_err(format!(
                        "center {id} shared {} score columns; basis has {m}, cap {}",
                        scores.0.ncols(),
                        self.config.score_cap
                    )));
                }
                if labels.as_ref().is_some_and(|l| l.len() != scores.0.nrows()) {
                    return Err(shape_err(format!("center {id}: labels do not match score rows")));
                }
                self.scores_in.insert(id, CenterScores { center: id, scores, labels });
                if self.scores_in.len() == self.roster.len() {
                    self.phase = Phase::Done;
                }
                Ok(Vec::new())
            }
            (phase, msg) => Err(unexpected(phase, &msg)),
        }
    }

    fn finish_admm_round(&mut self, k: u32) -> Result<Vec<Outbound>> {
        let locals: Vec<LocalAdmmState> = std::mem::take(&mut self.admm_in).into_values().collect();
        let next = consensus_update(&locals, self.rho)?;
        if !is_finite(&next.0) {
            // Keep the round's shares so the failure is inspectable.
            return Err(Error::DivergenceDetected { iteration: k as usize });
        }
        let prev = self.w_tilde.take();
        let consensus_change = match &prev {
            Some(p) => frobenius(&(&next.0 - &p.0)),
            None => frobenius(&next.0),
        };
        let row = IterationDiagnostics {
            iteration: k as usize,
            max_primal_residual: max_primal_residual(locals.iter().map(|s| &s.w), &next),
            consensus_change,
            mse_vs_truth: self.scaled_truth.as_ref().map(|t| mse(t, &next.0)),
        };
        let final_round = k as usize >= self.config.admm.iterations || row.converged(self.config.admm.tolerance);
        self.trace.push(row);
        self.w_tilde = Some(next.clone());
        self.phase = if final_round { Phase::Pca } else { Phase::Admm(k + 1) };
        Ok(vec![(
            Address::AllCenters,
            Message::ConsensusBroadcast {
                round: k,
                final_round,
                w_tilde: next,
            },
        )])
    }

    pub fn output(&self) -> Option<CoordinatorOutput> {
        if !self.is_done() {
            return None;
        }
        Some(CoordinatorOutput {
            global_stats: self.global.clone()?,
            w_tilde: self.w_tilde.clone()?,
            trace: self.trace.clone(),
            basis: self.basis.clone()?,
            scores: self.scores_in.values().cloned().collect(),
        })
    }
}

/// A center's private data plus optional per-subject group labels, which only
/// ever leave the center attached to shared scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterSite {
    pub id: CenterId,
    pub data: CenterData,
    pub labels: Option<Vec<String>>,
}

impl CenterSite {
    pub fn new(id: CenterId, data: CenterData) -> Self {
        Self { id, data, labels: None }
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.data.n_subjects() {
            return Err(shape_err(format!(
                "{} labels for {} subjects",
                labels.len(),
                self.data.n_subjects()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

#[derive(Debug)]
pub struct CenterState {
    site: CenterSite,
    config: PipelineConfig,
    n_centers: usize,
    phase: Phase,
    started: bool,
    xhat: Option<DMatrix<f64>>,
    solver: Option<LocalSolver>,
    local: Option<LocalAdmmState>,
    corrected: Option<DMatrix<f64>>,
}

impl CenterState {
    pub fn new(site: CenterSite, config: PipelineConfig, n_centers: usize) -> Result<Self> {
        config.validate()?;
        if n_centers == 0 {
            return Err(Error::NoCenters);
        }
        Ok(Self {
            site,
            config,
            n_centers,
            phase: Phase::Standardize,
            started: false,
            xhat: None,
            solver: None,
            local: None,
            corrected: None,
        })
    }

    pub fn id(&self) -> CenterId {
        self.site.id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    fn me(&self) -> Address {
        Address::Center(self.site.id)
    }

    /// The opening move: share local moments.
    pub fn start(&mut self) -> Result<Vec<Outbound>> {
        if self.started {
            return Err(Error::UnexpectedPhase {
                phase: self.phase.to_string(),
                got: "start".into(),
            });
        }
        let moments = FeatureMoments::accumulate(self.site.data.x())?;
        self.started = true;
        Ok(vec![(
            Address::Coordinator,
            Message::StatsShare {
                center: self.site.id,
                moments,
            },
        )])
    }

    pub fn handle(&mut self, from: Address, msg: Message) -> Result<Vec<Outbound>> {
        if from != Address::Coordinator {
            return Err(Error::InvalidConfig(format!("center {} only listens to the coordinator", self.site.id)));
        }
        match (self.phase, msg) {
            (Phase::Standardize, Message::GlobalStatsBroadcast(global)) if self.started => {
                let xhat = global.standardize(self.site.data.x())?;
                let rho = self.config.admm.effective_rho(global.n_total, self.n_centers);
                let solver = LocalSolver::new(&xhat, self.site.data.y(), rho)?;
                let (q, f) = solver.shape();
                let alpha = DMatrix::zeros(q, f);
                let w = solver.solve(&DMatrix::zeros(q, f), &alpha)?;
                self.xhat = Some(xhat);
                self.solver = Some(solver);
                self.local = Some(LocalAdmmState {
                    w: w.clone(),
                    alpha: alpha.clone(),
                });
                self.phase = Phase::Admm(1);
                Ok(vec![(
                    Address::Coordinator,
                    Message::AdmmLocalShare {
                        center: self.site.id,
                        round: 1,
                        w,
                        alpha,
                    },
                )])
            }
            (
                Phase::Admm(k),
                Message::ConsensusBroadcast {
                    round,
                    final_round,
                    w_tilde,
                },
            ) if round == k => {
                let solver = self.solver.as_ref().expect("solver exists during ADMM");
                let local = self.local.as_ref().expect("local state exists during ADMM");
                let alpha = dual_update(&local.alpha, &local.w, &w_tilde, solver.rho())?;
                if final_round {
                    let xhat = self.xhat.as_ref().expect("standardized");
                    let e = correct(xhat, self.site.data.y(), &w_tilde)?.0;
                    let pack = local_eigendecomposition(&e, self.config.variance_threshold)?;
                    self.local = Some(LocalAdmmState {
                        w: local.w.clone(),
                        alpha,
                    });
                    self.corrected = Some(e);
                    self.phase = Phase::Pca;
                    return Ok(vec![(
                        Address::Coordinator,
                        Message::EigenpackShare {
                            center: self.site.id,
                            pack,
                        },
                    )]);
                }
                let w = solver.solve(&w_tilde.0, &alpha)?;
                self.local = Some(LocalAdmmState {
                    w: w.clone(),
                    alpha: alpha.clone(),
                });
                self.phase = Phase::Admm(k + 1);
                Ok(vec![(
                    Address::Coordinator,
                    Message::AdmmLocalShare {
                        center: self.site.id,
                        round: k + 1,
                        w,
                        alpha,
                    },
                )])
            }
            (Phase::Pca, Message::GlobalBasisBroadcast(basis)) => {
                self.phase = Phase::Done;
                if !self.config.share_scores {
                    return Ok(Vec::new());
                }
                if basis.n_components() > self.config.score_cap {
                    return Err(shape_err(format!(
                        "basis has {} components, score cap is {}",
                        basis.n_components(),
                        self.config.score_cap
                    )));
                }
                let e = self.corrected.as_ref().expect("corrected data exists");
                let scores = project(e, &basis)?;
                Ok(vec![(
                    Address::Coordinator,
                    Message::ScoresShare {
                        center: self.site.id,
                        scores,
                        labels: self.site.labels.clone(),
                    },
                )])
            }
            (phase, msg) => Err(unexpected(phase, &msg)),
        }
    }

    /// Corrected data `E_c`, available once ADMM has finished. Never shared.
    pub fn corrected(&self) -> Option<&DMatrix<f64>> {
        self.corrected.as_ref()
    }

    pub(crate) fn address(&self) -> Address {
        self.me()
    }
}
