//! Gradients of the quadratic loss through the equilibrium.
//!
//! Differentiating `Z = relu(WZ + UX)` implicitly gives, with `e = ŷ − y`
//! and `D` the ReLU derivative mask at the equilibrium, an adjoint state
//! `M` solving the linear fixed point
//!
//! ```text
//! M = D ⊙ (a eᵀ + Wᵀ M)
//! ```
//!
//! from which `∇_W Φ = M Zᵀ`, `∇_U Φ = M Xᵀ` and `∇_a Φ = Z e`. The map is a
//! contraction with rate at most `‖W‖₂` because mask entries are 0 or 1,
//! so it is solved by the same Picard scheme as the forward pass. This
//! never forms the `mn × mn` Jacobian.

use crate::error::{DeqError, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::model::{self, DeqParams, SolverConfig};

/// 0/1 ReLU derivative at the equilibrium pre-activations (1 at exactly 0).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMask(Matrix);

impl ActivationMask {
    /// Wraps a matrix that must contain only 0s and 1s.
    pub fn from_matrix(d: Matrix) -> Result<Self> {
        if d.iter().all(|&v| v == 0.0 || v == 1.0) {
            Ok(Self(d))
        } else {
            Err(DeqError::Input("activation mask entries must be 0 or 1".into()))
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientTriple {
    pub gw: Matrix,
    pub gu: Matrix,
    pub ga: Vector,
}

impl GradientTriple {
    pub fn zeros_like(p: &DeqParams) -> Self {
        Self {
            gw: Matrix::zeros(p.m(), p.m()),
            gu: Matrix::zeros(p.m(), p.d()),
            ga: Vector::zeros(p.m()),
        }
    }
}

/// `WZ + UX`.
pub fn pre_activation(p: &DeqParams, z: &Matrix, x: &Matrix) -> Result<Matrix> {
    if x.nrows() != p.d() || z.nrows() != p.m() || z.ncols() != x.ncols() {
        return Err(DeqError::shape(
            "pre_activation",
            format!("Z {}x{}, X {}x{}", p.m(), x.ncols(), p.d(), x.ncols()),
            format!("Z {}x{}, X {}x{}", z.nrows(), z.ncols(), x.nrows(), x.ncols()),
        ));
    }
    let mut pre = &p.u * x;
    pre.gemm(1.0, &p.w, z, 1.0);
    Ok(pre)
}

pub fn activation_mask(p: &DeqParams, z: &Matrix, x: &Matrix) -> Result<ActivationMask> {
    let pre = pre_activation(p, z, x)?;
    Ok(ActivationMask(pre.map(|v| if v >= 0.0 { 1.0 } else { 0.0 })))
}

#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub m: Matrix,
    pub residual: f64,
    pub iterations: usize,
}

/// Solves `M = D ⊙ (a eᵀ + Wᵀ M)` from `M = 0`.
pub fn solve_adjoint(p: &DeqParams, mask: &ActivationMask, e: &Vector, cfg: &SolverConfig) -> Result<Matrix> {
    let (w_norm, _) = model::well_posedness(p, 0.0)?;
    solve_adjoint_with(p, mask, e, cfg, None, w_norm, None).map(|s| s.m)
}

/// Adjoint solve with warm start, known `‖W‖₂` and optionally a
/// precomputed `Wᵀ`.
pub fn solve_adjoint_with(
    p: &DeqParams,
    mask: &ActivationMask,
    e: &Vector,
    cfg: &SolverConfig,
    start: Option<&Matrix>,
    w_norm: f64,
    wt: Option<&Matrix>,
) -> Result<AdjointSolution> {
    cfg.validate()?;
    let d = mask.matrix();
    let (m, n) = (p.m(), e.len());
    if d.shape() != (m, n) {
        return Err(DeqError::shape("solve_adjoint", format!("mask {m}x{n}"), format!("{}x{}", d.nrows(), d.ncols())));
    }
    if !(w_norm < 1.0) {
        return Err(DeqError::WellPosedness {
            spec_norm: w_norm,
            bound: 1.0,
        });
    }
    let owned_wt;
    let wt = match wt {
        Some(t) => t,
        None => {
            owned_wt = p.w.transpose();
            &owned_wt
        }
    };
    let source = &p.a * e.transpose();
    let mut cur = match start {
        Some(s) if s.shape() == (m, n) => s.clone(),
        Some(s) => {
            return Err(DeqError::shape("solve_adjoint", format!("start {m}x{n}"), format!("{}x{}", s.nrows(), s.ncols())));
        }
        None => Matrix::zeros(m, n),
    };
    let mut next = Matrix::zeros(m, n);
    let mut last = f64::NAN;
    for k in 1..=cfg.max_iter {
        next.copy_from(&source);
        next.gemm(1.0, wt, &cur, 1.0);
        next.component_mul_assign(d);
        let diff = cur.iter().zip(next.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let residual = diff / linalg::frobenius_norm(&cur).max(1.0);
        if !residual.is_finite() {
            break;
        }
        last = residual;
        if residual <= cfg.tol {
            return Ok(AdjointSolution {
                m: cur,
                residual,
                iterations: k,
            });
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Err(DeqError::Convergence {
        what: "adjoint solve",
        iterations: cfg.max_iter,
        residual: last,
    })
}

/// Loss gradients at an equilibrium `z` of `(p, x)`.
pub fn gradients(p: &DeqParams, z: &Matrix, x: &Matrix, y: &Vector, cfg: &SolverConfig) -> Result<GradientTriple> {
    let (w_norm, _) = model::well_posedness(p, 0.0)?;
    gradients_with(p, z, x, y, cfg, w_norm, None, None).map(|(g, _)| g)
}

/// [`gradients`] with a known `‖W‖₂`, an optional warm start for the
/// adjoint state and an optional precomputed `Wᵀ`; also returns the
/// adjoint solution.
#[allow(clippy::too_many_arguments)]
pub fn gradients_with(
    p: &DeqParams,
    z: &Matrix,
    x: &Matrix,
    y: &Vector,
    cfg: &SolverConfig,
    w_norm: f64,
    adjoint_start: Option<&Matrix>,
    wt: Option<&Matrix>,
) -> Result<(GradientTriple, AdjointSolution)> {
    let yhat = model::predict(p, z)?;
    if yhat.len() != y.len() {
        return Err(DeqError::shape("gradients", format!("{} labels", yhat.len()), format!("{}", y.len())));
    }
    let e = &yhat - y;
    let mask = activation_mask(p, z, x)?;
    let adj = solve_adjoint_with(p, &mask, &e, cfg, adjoint_start, w_norm, wt)?;
    let gw = &adj.m * z.transpose();
    let gu = &adj.m * x.transpose();
    let ga = z * &e;
    Ok((GradientTriple { gw, gu, ga }, adj))
}

/// `‖∇_W‖_F² + ‖∇_U‖_F² + ‖∇_a‖²`.
pub fn grad_norm_sq(g: &GradientTriple) -> f64 {
    g.gw.iter().chain(g.gu.iter()).chain(g.ga.iter()).map(|v| v * v).sum()
}
