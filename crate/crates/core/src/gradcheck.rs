//! Independent checks of the implicit gradients: central finite
//! differences of the loss (re-solving the equilibrium per probe) and a
//! literal dense construction of the Kronecker-form gradient using the
//! `mn × mn` Jacobian `J = I − D (I_n ⊗ W)`.
//!
//! Vectorization is column-major throughout (`vec(Z)[i + j·m] = Z_ij`).
//! Under that convention the prediction map is `ŷ = (I_n ⊗ aᵀ) vec(Z)`, so
//! `R = (I_n ⊗ aᵀ) J⁻¹ D` is the `n × mn` operator that makes
//! `vec(∇_W Φ) = (Z ⊗ I_m) Rᵀ e`, `vec(∇_U Φ) = (X ⊗ I_m) Rᵀ e` and
//! `∇_a Φ = Z e` hold together. The alternative reading `(a ⊗ I_n)ᵀ` is
//! kept selectable so the mismatch can be demonstrated.

use crate::error::{DeqError, Result};
use crate::grad::{self, GradientTriple};
use crate::linalg::{Matrix, Vector};
use crate::model::{self, DeqParams, SolverConfig};

/// Which Kronecker factor maps `vec(Z)` to predictions in `R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// `I_n ⊗ aᵀ`, consistent with `ŷ_i = aᵀ z_i` for column-major `vec`.
    IdentityKronAT,
    /// `(a ⊗ I_n)ᵀ = aᵀ ⊗ I_n`, consistent only with row-major `vec`.
    AKronIdentityT,
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Matrix::from_fn(ar * br, ac * bc, |r, c| a[(r / br, c / bc)] * b[(r % br, c % bc)])
}

fn vec_of(m: &Matrix) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

fn unvec(v: &Vector, rows: usize, cols: usize) -> Matrix {
    Matrix::from_column_slice(rows, cols, v.as_slice())
}

/// The `n × mn` prediction operator for an orientation.
pub fn prediction_operator(a: &Vector, n: usize, orientation: Orientation) -> Matrix {
    let at = Matrix::from_row_slice(1, a.len(), a.as_slice());
    let id = Matrix::identity(n, n);
    match orientation {
        Orientation::IdentityKronAT => kron(&id, &at),
        Orientation::AKronIdentityT => kron(&at, &id),
    }
}

/// Gradients from the literal dense construction of `J`, `D` and `R`.
///
/// Intended for small instances only: memory is `O(m²n²)`.
pub fn kronecker_gradients(p: &DeqParams, z: &Matrix, x: &Matrix, y: &Vector, orientation: Orientation) -> Result<GradientTriple> {
    let (m, n) = (p.m(), x.ncols());
    if m * n > 2500 {
        return Err(DeqError::Input(format!("kronecker_gradients: mn = {} is too large for the dense route", m * n)));
    }
    let mask = grad::activation_mask(p, z, x)?;
    let dmat = Matrix::from_diagonal(&vec_of(mask.matrix()));
    let jac = Matrix::identity(m * n, m * n) - &dmat * kron(&Matrix::identity(n, n), &p.w);
    let jinv = jac
        .try_inverse()
        .ok_or_else(|| DeqError::Degenerate("Jacobian is singular".into()))?;
    let r = prediction_operator(&p.a, n, orientation) * jinv * dmat;
    let e = model::predict(p, z)? - y;
    let rte = r.transpose() * &e;
    let id_m = Matrix::identity(m, m);
    let gw = unvec(&(kron(z, &id_m) * &rte), m, m);
    let gu = unvec(&(kron(x, &id_m) * &rte), m, p.d());
    let ga = z * &e;
    Ok(GradientTriple { gw, gu, ga })
}

/// Largest entrywise relative difference between two gradient triples,
/// relative to the largest entry magnitude of `reference`.
pub fn max_relative_difference(got: &GradientTriple, reference: &GradientTriple) -> f64 {
    let pairs = |a: &Matrix, b: &Matrix| {
        let scale = b.amax().max(f64::MIN_POSITIVE);
        (a - b).amax() / scale
    };
    let ga = Matrix::from_column_slice(got.ga.len(), 1, got.ga.as_slice());
    let ra = Matrix::from_column_slice(reference.ga.len(), 1, reference.ga.as_slice());
    pairs(&got.gw, &reference.gw)
        .max(pairs(&got.gu, &reference.gu))
        .max(pairs(&ga, &ra))
}

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub step: f64,
    /// Equilibrium tolerance used for every probe.
    pub solver_tol: f64,
    /// Probes that bring a pre-activation this close to zero are skipped.
    pub kink_tol: f64,
    pub rel_tol: f64,
    /// Entries smaller than this are compared absolutely (scaled by `rel_tol`).
    pub abs_floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            solver_tol: 1e-12,
            kink_tol: 1e-7,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    W,
    U,
    A,
}

#[derive(Debug, Clone)]
pub struct FdMismatch {
    pub group: ParamGroup,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub failures: Vec<FdMismatch>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

fn kink_distance(p: &DeqParams, z: &Matrix, x: &Matrix) -> Result<(f64, Matrix)> {
    let pre = grad::pre_activation(p, z, x)?;
    let dist = pre.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    let mask = pre.map(|v| if v >= 0.0 { 1.0 } else { 0.0 });
    Ok((dist, mask))
}

/// Compares `analytic` against central differences of the loss for every
/// parameter entry.
pub fn finite_difference_check(p: &DeqParams, x: &Matrix, y: &Vector, analytic: &GradientTriple, cfg: &FdConfig) -> Result<FdReport> {
    let solver = SolverConfig {
        tol: cfg.solver_tol,
        max_iter: 100_000,
    };
    let base = model::solve_equilibrium(p, x, &solver)?;
    let (_, base_mask) = kink_distance(p, &base.z, x)?;

    let probe = |q: &DeqParams| -> Result<(f64, f64, Matrix)> {
        let sol = model::solve_equilibrium(q, x, &solver)?;
        let (dist, mask) = kink_distance(q, &sol.z, x)?;
        let phi = model::loss(&model::predict(q, &sol.z)?, y)?;
        Ok((phi, dist, mask))
    };

    let mut report = FdReport::default();
    let mut visit = |group: ParamGroup, row: usize, col: usize, analytic: f64, set: &dyn Fn(&mut DeqParams, f64)| -> Result<()> {
        let mut plus = p.clone();
        set(&mut plus, cfg.step);
        let mut minus = p.clone();
        set(&mut minus, -cfg.step);
        let (fp, dp, mp) = probe(&plus)?;
        let (fm, dm, mm) = probe(&minus)?;
        if dp < cfg.kink_tol || dm < cfg.kink_tol || mp != base_mask || mm != base_mask {
            report.skipped += 1;
            return Ok(());
        }
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let denom = analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
        let rel_err = (analytic - numeric).abs() / denom;
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err);
        if rel_err > cfg.rel_tol {
            report.failures.push(FdMismatch {
                group,
                row,
                col,
                analytic,
                numeric,
                rel_err,
            });
        }
        Ok(())
    };

    let (m, d) = (p.m(), p.d());
    for c in 0..m {
        for r in 0..m {
            visit(ParamGroup::W, r, c, analytic.gw[(r, c)], &|q, h| q.w[(r, c)] += h)?;
        }
    }
    for c in 0..d {
        for r in 0..m {
            visit(ParamGroup::U, r, c, analytic.gu[(r, c)], &|q, h| q.u[(r, c)] += h)?;
        }
    }
    for r in 0..m {
        visit(ParamGroup::A, r, 0, analytic.ga[r], &|q, h| q.a[r] += h)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_small() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = Matrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let k = kron(&a, &b);
        let expected = Matrix::from_row_slice(2, 4, &[0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0]);
        assert_eq!(k, expected);
    }

    #[test]
    fn identity_kron_at_reproduces_predictions() {
        let a = Vector::from_vec(vec![0.5, -1.0, 2.0]);
        let z = Matrix::from_fn(3, 2, |r, c| (r + 3 * c) as f64 + 0.25);
        let za = z.tr_mul(&a);
        let good = prediction_operator(&a, 2, Orientation::IdentityKronAT) * vec_of(&z);
        assert!((good - &za).amax() < 1e-14);
        let bad = prediction_operator(&a, 2, Orientation::AKronIdentityT);
        assert_eq!(bad.shape(), (2, 6));
        assert!((bad * vec_of(&z) - za).amax() > 1e-3);
    }
}
