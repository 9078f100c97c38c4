//! Full-batch gradient descent on `(W, U, a)` with per-step monitors of
//! the convergence guarantees.
//!
//! Each step solves the equilibrium, solves the adjoint system, records the
//! monitors and then applies `θ ← θ − η∇Φ(θ)`. Both solves start from the
//! linear extrapolation `2S_τ − S_{τ−1}` of the two previous solutions,
//! which changes iteration counts but not results beyond the solver
//! tolerance.

use std::fmt::Write as _;

use crate::condition::{self, ConditionReport};
use crate::data::Dataset;
use crate::error::{DeqError, Result};
use crate::grad::{self, GradientTriple};
use crate::linalg::{self, Matrix, Vector, SPECTRAL_TOL};
use crate::model::{self, DeqParams, SolverConfig};

/// Fraction of the learning-rate ceiling used by [`Eta::Auto`].
pub const AUTO_ETA_FACTOR: f64 = 0.5;
/// Relative loss increase tolerated under a sanctioned step size.
pub const LOSS_INCREASE_TOL: f64 = 1e-8;
pub const METRICS_HEADER: &str = "step,loss,w_spec_norm,lambda_tau,grad_norm_sq,pl_ratio,rate_envelope,solver_iters,residual";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Eta {
    /// `AUTO_ETA_FACTOR · eta_max` from the condition report at step 0.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssertMode {
    /// Violations are collected in the trace and training continues.
    Record,
    /// Ill-posedness or a loss increase under a sanctioned step aborts.
    FailFast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: Eta,
    /// Number of gradient steps.
    pub steps: usize,
    /// `None`: every step for `n ≤ 500`, every 10 steps otherwise.
    pub monitor_every: Option<usize>,
    pub solver: SolverConfig,
    pub assert_mode: AssertMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: Eta::Auto,
            steps: 100,
            monitor_every: None,
            solver: SolverConfig::default(),
            assert_mode: AssertMode::Record,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.steps == 0 {
            return Err(DeqError::Input("train: steps must be at least 1".into()));
        }
        if let Eta::Fixed(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(DeqError::Input(format!("train: eta must be positive, got {eta}")));
            }
        }
        if self.monitor_every == Some(0) {
            return Err(DeqError::Input("train: monitor_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn monitor_cadence(&self, n: usize) -> usize {
        self.monitor_every.unwrap_or(if n <= 500 { 1 } else { 10 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub w_spec_norm: f64,
    pub lambda_tau: f64,
    pub grad_norm_sq: f64,
    /// `‖∇Φ‖²/(2Φ)`; zero when `Φ = 0`.
    pub pl_ratio: f64,
    /// `(1 − ηλ₀/2)^τ Φ(0)`.
    pub rate_envelope: f64,
    /// Forward plus adjoint iterations spent at this step.
    pub solver_iters: usize,
    /// Forward equilibrium residual.
    pub residual: f64,
    /// `λ_τ > λ₀/2`.
    pub lambda_above_half: bool,
    /// `pl_ratio ≥ λ₀` (vacuously true at zero loss).
    pub pl_above_lambda0: bool,
    /// `‖∇Φ‖² ≥ 2λ_τΦ − 1e-8(1 + Φ)`.
    pub pl_floor_ok: bool,
}

impl TrainRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{},{:?}",
            self.step, self.loss, self.w_spec_norm, self.lambda_tau, self.grad_norm_sq, self.pl_ratio, self.rate_envelope, self.solver_iters, self.residual
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    IllPosed,
    LossIncrease,
    RateEnvelope,
    PlFloor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub step: usize,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// Monitored steps, strictly increasing.
    pub records: Vec<TrainRecord>,
    /// `(step, Φ)` for every step visited, monitored or not.
    pub losses: Vec<(usize, f64)>,
    pub violations: Vec<Violation>,
    pub lambda_0: f64,
    pub phi_0: f64,
    pub eta: f64,
    /// Whether `η ≤ eta_max` at step 0.
    pub eta_sanctioned: bool,
    /// Present when training started from step 0.
    pub condition: Option<ConditionReport>,
    pub start_step: usize,
    pub end_step: usize,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}", r.csv_row());
        }
        out
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().map_or(f64::NAN, |&(_, l)| l)
    }
}

/// Quantities fixed at step 0 and carried across a resume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResumeState {
    pub step: usize,
    pub lambda_0: f64,
    pub phi_0: f64,
    pub eta: f64,
}

impl ResumeState {
    pub fn from_checkpoint(ck: &model::Checkpoint) -> Result<Self> {
        if [ck.lambda_0, ck.phi_0, ck.eta].iter().any(|v| !v.is_finite()) {
            return Err(DeqError::Input("checkpoint lacks the training metadata needed to resume".into()));
        }
        Ok(Self {
            step: ck.step as usize,
            lambda_0: ck.lambda_0,
            phi_0: ck.phi_0,
            eta: ck.eta,
        })
    }
}

/// What the per-step hook sees, before the update of that step.
pub struct StepView<'a> {
    pub step: usize,
    pub params: &'a DeqParams,
    pub loss: f64,
    pub lambda_0: f64,
    pub phi_0: f64,
    pub eta: f64,
}

impl StepView<'_> {
    pub fn checkpoint(&self) -> model::Checkpoint {
        model::Checkpoint {
            params: self.params.clone(),
            step: self.step as u64,
            lambda_0: self.lambda_0,
            phi_0: self.phi_0,
            eta: self.eta,
        }
    }
}

struct StepState<'a> {
    w_norm: f64,
    grads: &'a GradientTriple,
    solver_iters: usize,
    residual: f64,
}

/// `2·last − before`, or `last` alone, as a warm start.
fn extrapolate(hist: &(Option<Matrix>, Option<Matrix>)) -> Option<Matrix> {
    match hist {
        (Some(last), Some(before)) => Some(last * 2.0 - before),
        (Some(last), None) => Some(last.clone()),
        _ => None,
    }
}

fn min_gram_eig(z: &Matrix) -> Result<f64> {
    linalg::min_eig_sym(&linalg::gram(z), 1e-12)
}

#[allow(clippy::too_many_arguments)]
fn assemble(tau: usize, loss: f64, lambda_tau: f64, lambda_0: f64, eta: f64, phi_0: f64, s: &StepState<'_>) -> TrainRecord {
    let gn = grad::grad_norm_sq(s.grads);
    let pl_ratio = if loss > 0.0 { gn / (2.0 * loss) } else { 0.0 };
    TrainRecord {
        step: tau,
        loss,
        w_spec_norm: s.w_norm,
        lambda_tau,
        grad_norm_sq: gn,
        pl_ratio,
        rate_envelope: (1.0 - eta * lambda_0 / 2.0).powi(tau as i32) * phi_0,
        solver_iters: s.solver_iters,
        residual: s.residual,
        lambda_above_half: lambda_tau > lambda_0 / 2.0,
        pl_above_lambda0: loss == 0.0 || pl_ratio >= lambda_0,
        pl_floor_ok: gn >= 2.0 * lambda_tau * loss - 1e-8 * (1.0 + loss),
    }
}

/// Computes every monitored quantity from scratch at `(p, z)`.
#[allow(clippy::too_many_arguments)]
pub fn monitors(p: &DeqParams, z: &Matrix, data: &Dataset, lambda_0: f64, eta: f64, tau: usize, phi_0: f64, solver: &SolverConfig) -> Result<TrainRecord> {
    let (w_norm, _) = model::well_posedness(p, 0.0)?;
    let x = data.x();
    let residual = linalg::frobenius_norm(&(z - model::forward_layer(p, z, x)?)) / linalg::frobenius_norm(z).max(1.0);
    let loss = model::loss(&model::predict(p, z)?, data.y())?;
    let (grads, adj) = grad::gradients_with(p, z, x, data.y(), solver, w_norm, None, None)?;
    let state = StepState {
        w_norm,
        grads: &grads,
        solver_iters: adj.iterations,
        residual,
    };
    Ok(assemble(tau, loss, min_gram_eig(z)?, lambda_0, eta, phi_0, &state))
}

/// Trains from step 0.
pub fn train(p0: &DeqParams, data: &Dataset, cfg: &TrainConfig) -> Result<(DeqParams, TrainTrace)> {
    train_with(p0, data, cfg, None, |_| Ok(()))
}

/// Trains for `cfg.steps` steps starting at `resume.step` (or 0), calling
/// `hook` at every visited step before its update. Resumed runs do not
/// repeat the record of their starting step.
pub fn train_with<F>(p0: &DeqParams, data: &Dataset, cfg: &TrainConfig, resume: Option<&ResumeState>, mut hook: F) -> Result<(DeqParams, TrainTrace)>
where
    F: FnMut(&StepView<'_>) -> Result<()>,
{
    cfg.validate()?;
    p0.check_finite()?;
    if p0.d() != data.d() {
        return Err(DeqError::shape("train", format!("data with d = {}", p0.d()), format!("d = {}", data.d())));
    }
    let (x, y) = (data.x(), data.y());
    let cadence = cfg.monitor_cadence(data.n());
    let start = resume.map_or(0, |r| r.step);
    let end = start + cfg.steps;

    let mut p = p0.clone();
    let mut trace = TrainTrace {
        records: Vec::new(),
        losses: Vec::with_capacity(cfg.steps + 1),
        violations: Vec::new(),
        lambda_0: f64::NAN,
        phi_0: f64::NAN,
        eta: f64::NAN,
        eta_sanctioned: matches!(cfg.eta, Eta::Auto),
        condition: None,
        start_step: start,
        end_step: end,
    };
    if let Some(r) = resume {
        trace.lambda_0 = r.lambda_0;
        trace.phi_0 = r.phi_0;
        trace.eta = match cfg.eta {
            Eta::Auto => r.eta,
            Eta::Fixed(e) => e,
        };
        trace.eta_sanctioned = matches!(cfg.eta, Eta::Auto) || trace.eta <= r.eta / AUTO_ETA_FACTOR;
    }

    let mut z_hist: (Option<Matrix>, Option<Matrix>) = (None, None);
    let mut adj_hist: (Option<Matrix>, Option<Matrix>) = (None, None);
    let mut top_vec: Option<Vector> = None;
    let mut prev_loss: Option<f64> = None;

    for tau in start..=end {
        let at = |e: DeqError| DeqError::AtStep {
            step: tau,
            source: Box::new(e),
        };
        let (w_norm, v) = linalg::spectral_norm_from(&p.w, top_vec.as_ref(), SPECTRAL_TOL).map_err(at)?;
        top_vec = Some(v);
        if !(w_norm < 1.0) {
            trace.violations.push(Violation {
                step: tau,
                kind: ViolationKind::IllPosed,
                detail: format!("||W||_2 = {w_norm}"),
            });
            return Err(at(DeqError::WellPosedness { spec_norm: w_norm, bound: 1.0 }));
        }

        let sol = model::solve_equilibrium_with(&p, x, &cfg.solver, extrapolate(&z_hist).as_ref(), w_norm).map_err(at)?;
        let z = sol.z;
        let loss = model::loss(&model::predict(&p, &z).map_err(at)?, y).map_err(at)?;
        let wt = p.w.transpose();
        let (grads, adj) = grad::gradients_with(&p, &z, x, y, &cfg.solver, w_norm, extrapolate(&adj_hist).as_ref(), Some(&wt)).map_err(at)?;

        if tau == start && resume.is_none() {
            let lambda_0 = min_gram_eig(&z).map_err(at)?;
            let bounds = condition::InitBounds::from_norms(
                w_norm,
                linalg::spectral_norm(&p.u, SPECTRAL_TOL).map_err(at)?,
                p.a.norm(),
                None,
            )
            .map_err(at)?;
            // roundoff can push the least eigenvalue of a singular Gram matrix below zero
            let report = condition::check_condition(&bounds, lambda_0.max(0.0), x, (2.0 * loss).sqrt()).map_err(at)?;
            trace.lambda_0 = lambda_0;
            trace.phi_0 = loss;
            trace.eta = match cfg.eta {
                Eta::Auto => AUTO_ETA_FACTOR * report.eta_max,
                Eta::Fixed(e) => e,
            };
            trace.eta_sanctioned = trace.eta <= report.eta_max;
            trace.condition = Some(report);
        }
        let (lambda_0, phi_0, eta) = (trace.lambda_0, trace.phi_0, trace.eta);

        if let Some(prev) = prev_loss {
            if loss > prev * (1.0 + LOSS_INCREASE_TOL) {
                let detail = format!("loss rose from {prev:e} to {loss:e}");
                if trace.eta_sanctioned && cfg.assert_mode == AssertMode::FailFast {
                    return Err(at(DeqError::Assertion(detail)));
                }
                trace.violations.push(Violation {
                    step: tau,
                    kind: ViolationKind::LossIncrease,
                    detail,
                });
            }
        }
        prev_loss = Some(loss);
        trace.losses.push((tau, loss));

        let skip_record = resume.is_some() && tau == start;
        if !skip_record && ((tau - start).is_multiple_of(cadence) || tau == end) {
            let lambda_tau = if tau == 0 { lambda_0 } else { min_gram_eig(&z).map_err(at)? };
            let state = StepState {
                w_norm,
                grads: &grads,
                solver_iters: sol.iterations + adj.iterations,
                residual: sol.residual,
            };
            let rec = assemble(tau, loss, lambda_tau, lambda_0, eta, phi_0, &state);
            if !rec.pl_floor_ok {
                trace.violations.push(Violation {
                    step: tau,
                    kind: ViolationKind::PlFloor,
                    detail: format!("grad_norm_sq {:e} < 2 lambda_tau loss {:e}", rec.grad_norm_sq, 2.0 * lambda_tau * loss),
                });
            }
            let condition_holds = trace.condition.as_ref().is_some_and(ConditionReport::all_satisfied);
            if condition_holds && loss > rec.rate_envelope * (1.0 + LOSS_INCREASE_TOL) {
                let detail = format!("loss {loss:e} above envelope {:e}", rec.rate_envelope);
                if cfg.assert_mode == AssertMode::FailFast {
                    return Err(at(DeqError::Assertion(detail)));
                }
                trace.violations.push(Violation {
                    step: tau,
                    kind: ViolationKind::RateEnvelope,
                    detail,
                });
            }
            trace.records.push(rec);
        }

        hook(&StepView {
            step: tau,
            params: &p,
            loss,
            lambda_0,
            phi_0,
            eta,
        })
        .map_err(at)?;

        if tau == end {
            break;
        }
        p.w -= &grads.gw * eta;
        p.u -= &grads.gu * eta;
        p.a -= &grads.ga * eta;
        z_hist = (Some(z), z_hist.0);
        adj_hist = (Some(adj.m), adj_hist.0);
    }
    Ok((p, trace))
}
