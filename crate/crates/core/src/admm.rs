//! Consensus ADMM estimation of the covariate weight matrix and removal of
//! covariate effects.
//!
//! Each center `c` holds standardized features `X̂_c` (`N_c x F`) and
//! covariates `Y_c` (`N_c x q`) and fits `X̂_c ≈ Y_c W_c` subject to
//! `W_c = W̃` for all centers. One iteration is
//!
//! ```text
//! W_c  <- (Y_c'Y_c + ρ/2 I)^-1 (Y_c'X̂_c - α_c/2 + ρ/2 W̃)     (local)
//! W̃   <- 1/C Σ_c (α_c/ρ + W_c)                                (consensus, old α)
//! α_c  <- α_c + ρ (W_c - W̃)                                  (dual, new W̃)
//! ```
//!
//! The primitives take the penalty as given. [`AdmmConfig`] maps a
//! user-facing `rho` to the penalty actually fed to them, see
//! [`PenaltyScale`].

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{frobenius, is_finite, mse};

/// How the configured `rho` relates to the penalty used in the updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PenaltyScale {
    /// `rho` is used verbatim against the sum-of-squares objective.
    Absolute,
    /// `rho` is relative to the per-subject objective `‖X̂_c - Y_c W_c‖² / (2 N̄)`
    /// with `N̄ = N / C`; the penalty fed to the updates is `2 ρ N̄`. Keeps a
    /// given `rho` meaningful regardless of how many subjects a center holds.
    #[default]
    PerSubject,
}

impl PenaltyScale {
    pub fn as_str(self) -> &'static str {
        match self {
            PenaltyScale::Absolute => "absolute",
            PenaltyScale::PerSubject => "per-subject",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(PenaltyScale::Absolute),
            "per-subject" => Ok(PenaltyScale::PerSubject),
            other => Err(Error::InvalidConfig(format!("unknown penalty scale '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub iterations: usize,
    /// Stop early once both `max_c ‖W_c - W̃‖_F` and the change of `W̃`
    /// between iterations drop to this value.
    pub tolerance: Option<f64>,
    pub penalty_scale: PenaltyScale,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            iterations: 10,
            tolerance: None,
            penalty_scale: PenaltyScale::default(),
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho must be positive, got {}", self.rho)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if let Some(t) = self.tolerance {
            if !(t >= 0.0) {
                return Err(Error::InvalidConfig(format!("tolerance must be nonnegative, got {t}")));
            }
        }
        Ok(())
    }

    /// Penalty passed to the update primitives for a federation of
    /// `n_centers` centers holding `n_total` subjects.
    pub fn effective_rho(&self, n_total: u64, n_centers: usize) -> f64 {
        match self.penalty_scale {
            PenaltyScale::Absolute => self.rho,
            PenaltyScale::PerSubject => 2.0 * self.rho * n_total as f64 / n_centers.max(1) as f64,
        }
    }
}

/// A center's local weights `W_c` and dual variable `α_c`, both `q x F`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAdmmState {
    pub w: DMatrix<f64>,
    pub alpha: DMatrix<f64>,
}

impl LocalAdmmState {
    pub fn zeros(q: usize, f: usize) -> Self {
        Self {
            w: DMatrix::zeros(q, f),
            alpha: DMatrix::zeros(q, f),
        }
    }
}

/// The shared weight matrix `W̃` (`q x F`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusWeights(pub DMatrix<f64>);

impl ConsensusWeights {
    pub fn zeros(q: usize, f: usize) -> Self {
        Self(DMatrix::zeros(q, f))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Covariate-corrected data `E_c = X̂_c - Y_c W̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedData(pub DMatrix<f64>);

/// Iteration-invariant part of the local update: the factorized system
/// `Y'Y + ρ/2 I` and `Y'X̂`.
#[derive(Clone)]
pub struct LocalSolver {
    factor: Cholesky<f64, Dyn>,
    ytx: DMatrix<f64>,
    rho: f64,
}

impl std::fmt::Debug for LocalSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalSolver")
            .field("q", &self.ytx.nrows())
            .field("f", &self.ytx.ncols())
            .field("rho", &self.rho)
            .finish()
    }
}

impl LocalSolver {
    pub fn new(xhat: &DMatrix<f64>, y: &DMatrix<f64>, rho: f64) -> Result<Self> {
        if xhat.nrows() != y.nrows() {
            return Err(shape_err(format!(
                "features have {} rows, covariates {}",
                xhat.nrows(),
                y.nrows()
            )));
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("penalty must be finite and nonnegative, got {rho}")));
        }
        let q = y.ncols();
        let mut gram = y.tr_mul(y);
        for i in 0..q {
            gram[(i, i)] += rho / 2.0;
        }
        let factor = Cholesky::new(gram).ok_or(Error::SingularSystem)?;
        Ok(Self {
            factor,
            ytx: y.tr_mul(xhat),
            rho,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn shape(&self) -> (usize, usize) {
        self.ytx.shape()
    }

    /// Minimizer of the local augmented Lagrangian for fixed `W̃` and `α_c`.
    pub fn solve(&self, w_tilde: &DMatrix<f64>, alpha: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let shape = self.shape();
        if w_tilde.shape() != shape || alpha.shape() != shape {
            return Err(shape_err(format!(
                "expected {shape:?} weights, got W̃ {:?} and α {:?}",
                w_tilde.shape(),
                alpha.shape()
            )));
        }
        let rhs = &self.ytx - alpha * 0.5 + w_tilde * (self.rho / 2.0);
        Ok(self.factor.solve(&rhs))
    }
}

/// `(Y'Y + ρ/2 I)^-1 (Y'X̂ - α/2 + ρ/2 W̃)`.
pub fn local_update(
    xhat: &DMatrix<f64>,
    y: &DMatrix<f64>,
    w_tilde: &ConsensusWeights,
    alpha: &DMatrix<f64>,
    rho: f64,
) -> Result<DMatrix<f64>> {
    LocalSolver::new(xhat, y, rho)?.solve(&w_tilde.0, alpha)
}

/// `α + ρ (W_new - W̃_new)`.
pub fn dual_update(
    alpha: &DMatrix<f64>,
    w_new: &DMatrix<f64>,
    w_tilde_new: &ConsensusWeights,
    rho: f64,
) -> Result<DMatrix<f64>> {
    if alpha.shape() != w_new.shape() || w_new.shape() != w_tilde_new.0.shape() {
        return Err(shape_err(format!(
            "dual update over {:?}, {:?}, {:?}",
            alpha.shape(),
            w_new.shape(),
            w_tilde_new.0.shape()
        )));
    }
    Ok(alpha + (w_new - &w_tilde_new.0) * rho)
}

/// `1/C Σ_c (α_c/ρ + W_c)`, summed in slice order.
pub fn consensus_update(locals: &[LocalAdmmState], rho: f64) -> Result<ConsensusWeights> {
    let first = locals.first().ok_or(Error::NoCenters)?;
    let shape = first.w.shape();
    let mut acc = DMatrix::zeros(shape.0, shape.1);
    for s in locals {
        if s.w.shape() != shape || s.alpha.shape() != shape {
            return Err(shape_err(format!(
                "center state {:?}/{:?} differs from {shape:?}",
                s.w.shape(),
                s.alpha.shape()
            )));
        }
        acc += &s.alpha / rho + &s.w;
    }
    Ok(ConsensusWeights(acc / locals.len() as f64))
}

/// `E = X̂ - Y W̃`.
pub fn correct(xhat: &DMatrix<f64>, y: &DMatrix<f64>, w_tilde: &ConsensusWeights) -> Result<CorrectedData> {
    let w = &w_tilde.0;
    if xhat.nrows() != y.nrows() || y.ncols() != w.nrows() || xhat.ncols() != w.ncols() {
        return Err(shape_err(format!(
            "cannot correct {:?} features with {:?} covariates and {:?} weights",
            xhat.shape(),
            y.shape(),
            w.shape()
        )));
    }
    Ok(CorrectedData(xhat - y * w))
}

/// `max_c ‖W_c - W̃‖_F`.
pub fn max_primal_residual<'a>(ws: impl IntoIterator<Item = &'a DMatrix<f64>>, w_tilde: &ConsensusWeights) -> f64 {
    ws.into_iter()
        .map(|w| frobenius(&(w - &w_tilde.0)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub max_primal_residual: f64,
    /// `‖W̃^k - W̃^(k-1)‖_F`.
    pub consensus_change: f64,
    pub mse_vs_truth: Option<f64>,
}

impl IterationDiagnostics {
    pub fn converged(&self, tolerance: Option<f64>) -> bool {
        tolerance.is_some_and(|tol| self.max_primal_residual <= tol && self.consensus_change <= tol)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdmmTrace {
    pub rows: Vec<IterationDiagnostics>,
}

impl AdmmTrace {
    pub fn push(&mut self, row: IterationDiagnostics) {
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&IterationDiagnostics> {
        self.rows.last()
    }

    pub fn mse_series(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.mse_vs_truth).collect()
    }

    /// `iteration,max_primal_residual,mse_vs_truth`; the last column is empty
    /// without ground truth.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,max_primal_residual,mse_vs_truth\n");
        for r in &self.rows {
            let mse = r.mse_vs_truth.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.iteration, r.max_primal_residual, mse));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AdmmRun {
    pub weights: ConsensusWeights,
    pub locals: Vec<LocalAdmmState>,
    pub trace: AdmmTrace,
    /// Penalty actually used by the updates.
    pub rho: f64,
}

/// Runs consensus ADMM over `(X̂_c, Y_c)` pairs from a cold start
/// (`W_c = α_c = W̃ = 0`).
pub fn run_admm(
    centers: &[(DMatrix<f64>, DMatrix<f64>)],
    config: &AdmmConfig,
    truth: Option<&DMatrix<f64>>,
) -> Result<AdmmRun> {
    config.validate()?;
    let (x0, y0) = centers.first().ok_or(Error::NoCenters)?;
    let (q, f) = (y0.ncols(), x0.ncols());
    for (x, y) in centers {
        if x.ncols() != f || y.ncols() != q {
            return Err(shape_err(format!(
                "center with {} features / {} covariates, expected {f} / {q}",
                x.ncols(),
                y.ncols()
            )));
        }
    }
    if let Some(t) = truth {
        if t.shape() != (q, f) {
            return Err(shape_err(format!("ground truth {:?}, expected ({q}, {f})", t.shape())));
        }
    }
    let n_total: u64 = centers.iter().map(|(x, _)| x.nrows() as u64).sum();
    let rho = config.effective_rho(n_total, centers.len());
    let solvers = centers
        .iter()
        .map(|(x, y)| LocalSolver::new(x, y, rho))
        .collect::<Result<Vec<_>>>()?;

    let mut locals = vec![LocalAdmmState::zeros(q, f); centers.len()];
    let mut w_tilde = ConsensusWeights::zeros(q, f);
    let mut trace = AdmmTrace::default();
    for iteration in 1..=config.iterations {
        for (state, solver) in locals.iter_mut().zip(&solvers) {
            state.w = solver.solve(&w_tilde.0, &state.alpha)?;
        }
        let next = consensus_update(&locals, rho)?;
        let consensus_change = frobenius(&(&next.0 - &w_tilde.0));
        w_tilde = next;
        for state in locals.iter_mut() {
            state.alpha = dual_update(&state.alpha, &state.w, &w_tilde, rho)?;
        }
        if !is_finite(&w_tilde.0) || locals.iter().any(|s| !is_finite(&s.alpha)) {
            return Err(Error::DivergenceDetected { iteration });
        }
        let residual = max_primal_residual(locals.iter().map(|s| &s.w), &w_tilde);
        let row = IterationDiagnostics {
            iteration,
            max_primal_residual: residual,
            consensus_change,
            mse_vs_truth: truth.map(|t| mse(t, &w_tilde.0)),
        };
        let done = row.converged(config.tolerance);
        trace.push(row);
        if done {
            break;
        }
    }
    Ok(AdmmRun {
        weights: w_tilde,
        locals,
        trace,
        rho,
    })
}
