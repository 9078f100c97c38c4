//! Initialization constants, the three initialization inequalities, the
//! learning-rate bound and the norm bounds along a training trajectory.

use crate::error::{DeqError, Result};
use crate::linalg::{self, Matrix, SPECTRAL_TOL};
use crate::model::{self, DeqParams};

/// Slack used when checking the trajectory norm bounds.
pub const BOUND_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitBounds {
    pub delta: f64,
    pub rho_w: f64,
    pub rho_u: f64,
    pub rho_a: f64,
    pub c_w: f64,
    pub c_u: f64,
    pub c_a: f64,
}

impl InitBounds {
    /// Builds the constants from the three norms at initialization.
    pub fn from_norms(w_norm: f64, u_norm: f64, a_norm: f64, delta: Option<f64>) -> Result<Self> {
        if !(w_norm < 1.0) {
            return Err(DeqError::WellPosedness { spec_norm: w_norm, bound: 1.0 });
        }
        let delta = match delta {
            None => (1.0 - w_norm) / 2.0,
            Some(d) if d > 0.0 && w_norm + d < 1.0 => d,
            Some(d) => {
                return Err(DeqError::Input(format!("delta = {d} must be positive with ||W||_2 + delta < 1 (||W||_2 = {w_norm})")));
            }
        };
        let rho_w = w_norm + delta;
        let rho_u = u_norm + delta;
        let rho_a = a_norm + delta;
        let gap = 1.0 - rho_w;
        Ok(Self {
            delta,
            rho_w,
            rho_u,
            rho_a,
            c_w: rho_u * rho_a / (gap * gap),
            c_u: rho_a / gap,
            c_a: rho_u / gap,
        })
    }

    fn c_wu2(&self) -> f64 {
        self.c_w * self.c_w + self.c_u * self.c_u
    }

    fn c_max(&self) -> f64 {
        self.c_w.max(self.c_u).max(self.c_a)
    }
}

/// `None` selects `δ = (1 − ‖W‖₂)/2`.
pub fn init_bounds(p: &DeqParams, delta: Option<f64>) -> Result<InitBounds> {
    let w = linalg::spectral_norm(&p.w, SPECTRAL_TOL)?;
    let u = linalg::spectral_norm(&p.u, SPECTRAL_TOL)?;
    InitBounds::from_norms(w, u, p.a.norm(), delta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub lambda_0: f64,
    /// LHS − RHS of the three inequalities, in order.
    pub margins: [f64; 3],
    pub satisfied: [bool; 3],
    pub eta_max: f64,
    pub phi_0: f64,
}

impl ConditionReport {
    pub fn all_satisfied(&self) -> bool {
        self.satisfied.iter().all(|&s| s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,value\n");
        out.push_str(&format!("lambda_0,{:?}\n", self.lambda_0));
        out.push_str(&format!("phi_0,{:?}\n", self.phi_0));
        for (k, (m, s)) in self.margins.iter().zip(self.satisfied).enumerate() {
            out.push_str(&format!("margin_{},{:?}\n", k + 1, m));
            out.push_str(&format!("satisfied_{},{}\n", k + 1, s));
        }
        out.push_str(&format!("eta_max,{:?}\n", self.eta_max));
        out
    }
}

/// Evaluates the three initialization inequalities literally:
///
/// ```text
/// λ₀         ≥ (4/δ)·max(c_w, c_u, c_a)·‖X‖_F·‖e₀‖
/// λ₀^{3/2}   ≥ 4(2 + √2)·ρ̄_a⁻¹·(c_w² + c_u²)·‖X‖_F²·‖e₀‖
/// λ₀         ≥ 4(c_w² + c_u²)·‖X‖_F²
/// ```
///
/// with `e₀ = ŷ(0) − y`, plus the learning-rate ceiling
/// `min(2/λ₀, 2(c_w²+c_u²)/((c_w²+c_u²+c_a²)²‖X‖_F²))`.
pub fn check_condition(b: &InitBounds, lambda_0: f64, x: &Matrix, residual_norm_0: f64) -> Result<ConditionReport> {
    if !(lambda_0 >= 0.0) {
        return Err(DeqError::Input(format!("lambda_0 must be non-negative, got {lambda_0}")));
    }
    let xf = linalg::frobenius_norm(x);
    let xf2 = xf * xf;
    let r = residual_norm_0;
    let cwu2 = b.c_wu2();

    let rhs = [
        4.0 / b.delta * b.c_max() * xf * r,
        4.0 * (2.0 + 2f64.sqrt()) / b.rho_a * cwu2 * xf2 * r,
        4.0 * cwu2 * xf2,
    ];
    let lhs = [lambda_0, lambda_0.powf(1.5), lambda_0];
    let margins = [lhs[0] - rhs[0], lhs[1] - rhs[1], lhs[2] - rhs[2]];
    let satisfied = margins.map(|m| m >= 0.0);

    let c_all = cwu2 + b.c_a * b.c_a;
    let eta_curv = 2.0 * cwu2 / (c_all * c_all * xf2);
    let eta_max = if lambda_0 > 0.0 { (2.0 / lambda_0).min(eta_curv) } else { eta_curv };

    Ok(ConditionReport {
        lambda_0,
        margins,
        satisfied,
        eta_max,
        phi_0: 0.5 * r * r,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundStatus {
    Holds,
    Violated,
    /// One of the parameter states exceeds the `ρ̄` radii.
    PreconditionFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub status: BoundStatus,
}

impl BoundRow {
    pub fn ok(&self) -> bool {
        self.status == BoundStatus::Holds
    }
}

fn within_radii(p: &DeqParams, b: &InitBounds) -> Result<bool> {
    let w = linalg::spectral_norm(&p.w, SPECTRAL_TOL)?;
    let u = linalg::spectral_norm(&p.u, SPECTRAL_TOL)?;
    let eps = 1e-12;
    Ok(w <= b.rho_w + eps && u <= b.rho_u + eps && p.a.norm() <= b.rho_a + eps)
}

/// Checks the equilibrium norm bound and the two Lipschitz-type bounds
/// between parameter states `k` and `s`:
///
/// ```text
/// ‖Z(s)‖_F          ≤ c_a‖X‖_F
/// ‖Z(k) − Z(s)‖_F   ≤ ρ̄_a⁻¹(c_w‖ΔW‖₂ + c_u‖ΔU‖₂)‖X‖_F
/// ‖ŷ(k) − ŷ(s)‖₂    ≤ (c_w‖ΔW‖₂ + c_u‖ΔU‖₂ + c_a‖Δa‖₂)‖X‖_F
/// ```
pub fn appendix_bounds_check(p_k: &DeqParams, p_s: &DeqParams, z_k: &Matrix, z_s: &Matrix, x: &Matrix, b: &InitBounds) -> Result<Vec<BoundRow>> {
    let precondition = within_radii(p_k, b)? && within_radii(p_s, b)?;
    let xf = linalg::frobenius_norm(x);
    let dw = linalg::spectral_norm(&(&p_k.w - &p_s.w), SPECTRAL_TOL)?;
    let du = linalg::spectral_norm(&(&p_k.u - &p_s.u), SPECTRAL_TOL)?;
    let da = (&p_k.a - &p_s.a).norm();
    let yk = model::predict(p_k, z_k)?;
    let ys = model::predict(p_s, z_s)?;

    let rows = [
        ("equilibrium_norm", linalg::frobenius_norm(z_s), b.c_a * xf),
        ("equilibrium_shift", linalg::frobenius_norm(&(z_k - z_s)), (b.c_w * dw + b.c_u * du) * xf / b.rho_a),
        ("prediction_shift", (yk - ys).norm(), (b.c_w * dw + b.c_u * du + b.c_a * da) * xf),
    ];
    Ok(rows
        .into_iter()
        .map(|(name, lhs, rhs)| {
            let status = if !precondition {
                BoundStatus::PreconditionFailed
            } else if lhs <= rhs + BOUND_SLACK * (1.0 + rhs) {
                BoundStatus::Holds
            } else {
                BoundStatus::Violated
            };
            BoundRow { name, lhs, rhs, status }
        })
        .collect())
}
