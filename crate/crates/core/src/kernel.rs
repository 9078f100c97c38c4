//! Population Gram kernels of the weight-untied ReLU network.
//!
//! For unit-variance ReLU features, `2·E[relu(u) relu(v)] = ρ·Q(cos θ)`
//! where `ρ` is the common variance and `Q` is the arc-cosine function
//! below. The finite-depth kernels follow
//!
//! ```text
//! ρ⁽ˡ⁾ = (1 − σ_w^{2l}) / (1 − σ_w²)
//! cos θ⁽¹⁾ᵢⱼ = xᵢᵀxⱼ / d
//! cos θ⁽ˡ⁾ᵢⱼ = (1 − 1/ρ⁽ˡ⁾)·Q(cos θ⁽ˡ⁻¹⁾ᵢⱼ) + (1/ρ⁽ˡ⁾)·xᵢᵀxⱼ/d      (l ≥ 2)
//! K⁽ˡ⁾ᵢⱼ = ρ⁽ˡ⁾·Q(cos θ⁽ˡ⁾ᵢⱼ)
//! ```
//!
//! and the infinite-depth kernel solves the scalar fixed point
//! `c = σ_w² Q(c) + (1 − σ_w²) xᵢᵀxⱼ/d`, `Kᵢⱼ = Q(c)/(1 − σ_w²)`.

use std::f64::consts::PI;

use crate::error::{DeqError, Result};
use crate::linalg::{self, Matrix};
use crate::model::SIGMA_W2_MAX;

/// Arguments of `Q` this far outside `[−1, 1]` are clamped instead of rejected.
pub const Q_CLAMP_TOL: f64 = 1e-12;
/// Default tolerance of the scalar fixed-point solve.
pub const FIXED_POINT_TOL: f64 = 1e-14;
const FIXED_POINT_MAX_ITER: usize = 10_000;

/// `Q(x) = (√(1 − x²) + (π − arccos x)·x) / π`.
pub fn q_func(x: f64) -> Result<f64> {
    if !(x.abs() <= 1.0 + Q_CLAMP_TOL) {
        return Err(DeqError::Input(format!("Q is defined on [-1, 1], got {x}")));
    }
    let x = x.clamp(-1.0, 1.0);
    Ok(((1.0 - x * x).sqrt() + (PI - x.acos()) * x) / PI)
}

/// `ρ⁽ˡ⁾ = Σ_{k<l} σ_w^{2k}`, the diagonal of the depth-`l` kernel.
pub fn rho(sigma_w2: f64, l: usize) -> f64 {
    (1.0 - sigma_w2.powi(l as i32)) / (1.0 - sigma_w2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Finite(usize),
    Infinite,
}

#[derive(Debug, Clone)]
pub struct PopulationKernel {
    pub k: Matrix,
    pub cos_theta: Matrix,
    pub lambda_star: f64,
    pub sigma_w2: f64,
    pub depth: Depth,
}

impl PopulationKernel {
    pub fn is_positive_definite(&self) -> bool {
        self.lambda_star > 0.0
    }

    /// `max_{i≠j} |cos θᵢⱼ|`.
    pub fn max_offdiag_cos(&self) -> f64 {
        let n = self.cos_theta.nrows();
        let mut worst = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    worst = worst.max(self.cos_theta[(i, j)].abs());
                }
            }
        }
        worst
    }
}

fn check_sigma(sigma_w2: f64) -> Result<()> {
    if (0.0..SIGMA_W2_MAX).contains(&sigma_w2) {
        Ok(())
    } else {
        Err(DeqError::Assumption(format!("sigma_w^2 must lie in [0, 1/8), got {sigma_w2}")))
    }
}

/// `xᵢᵀxⱼ / d` after checking that every column has norm `√d`.
fn input_cosines(x: &Matrix) -> Result<Matrix> {
    let d = x.nrows();
    if d == 0 || x.ncols() == 0 {
        return Err(DeqError::Input("kernel: empty input matrix".into()));
    }
    let target = (d as f64).sqrt();
    for (i, col) in x.column_iter().enumerate() {
        let norm = col.norm();
        if (norm - target).abs() > crate::data::NORM_TOL * target {
            return Err(DeqError::Assumption(format!("kernel: column {i} has norm {norm}, expected sqrt(d) = {target}")));
        }
    }
    let mut c = linalg::gram(x) / d as f64;
    c.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    c.fill_diagonal(1.0);
    Ok(c)
}

fn apply_q(cos: &Matrix, scale: f64) -> Matrix {
    // entries are already in [-1, 1]
    cos.map(|c| scale * q_func(c).expect("cosine within [-1, 1]"))
}

/// `(K⁽ˡ⁾, cos θ⁽ˡ⁾)` for `l = 1..=depth`.
pub fn kernel_layers(x: &Matrix, sigma_w2: f64, depth: usize) -> Result<Vec<(Matrix, Matrix)>> {
    check_sigma(sigma_w2)?;
    if depth == 0 {
        return Err(DeqError::Input("kernel depth must be at least 1".into()));
    }
    let c0 = input_cosines(x)?;
    let mut out: Vec<(Matrix, Matrix)> = Vec::with_capacity(depth);
    let mut cos = c0.clone();
    for l in 1..=depth {
        let r = rho(sigma_w2, l);
        if l > 1 {
            let prev_q = apply_q(&cos, 1.0);
            cos = prev_q * (1.0 - 1.0 / r) + &c0 * (1.0 / r);
            cos.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            cos.fill_diagonal(1.0);
        }
        let mut k = apply_q(&cos, r);
        k.fill_diagonal(r);
        out.push((linalg::symmetrize(k), cos.clone()));
    }
    Ok(out)
}

/// Depth-`depth` population kernel with its least eigenvalue.
pub fn kernel_recursion(x: &Matrix, sigma_w2: f64, depth: usize) -> Result<PopulationKernel> {
    let (k, cos_theta) = kernel_layers(x, sigma_w2, depth)?.pop().expect("depth >= 1");
    let lambda_star = linalg::min_eig_sym(&k, 1e-12)?;
    Ok(PopulationKernel {
        k,
        cos_theta,
        lambda_star,
        sigma_w2,
        depth: Depth::Finite(depth),
    })
}

/// Solves `c = σ_w² Q(c) + (1 − σ_w²) c₀` by Picard iteration from `c₀`.
pub fn cos_fixed_point(c0: f64, sigma_w2: f64, tol: f64) -> Result<f64> {
    let mut c = c0;
    for _ in 0..FIXED_POINT_MAX_ITER {
        let next = sigma_w2 * q_func(c)? + (1.0 - sigma_w2) * c0;
        let next = next.clamp(-1.0, 1.0);
        if (next - c).abs() <= tol {
            return Ok(next);
        }
        c = next;
    }
    Err(DeqError::Convergence {
        what: "population kernel fixed point",
        iterations: FIXED_POINT_MAX_ITER,
        residual: f64::NAN,
    })
}

/// Infinite-depth population kernel.
pub fn kernel_fixed_point(x: &Matrix, sigma_w2: f64, tol: f64) -> Result<PopulationKernel> {
    check_sigma(sigma_w2)?;
    if !(tol > 0.0) {
        return Err(DeqError::Input(format!("kernel tol must be positive, got {tol}")));
    }
    let c0 = input_cosines(x)?;
    let n = c0.nrows();
    let mut cos = Matrix::identity(n, n);
    let mut k = Matrix::from_diagonal_element(n, n, 1.0 / (1.0 - sigma_w2));
    for j in 0..n {
        for i in 0..j {
            let c = cos_fixed_point(c0[(i, j)], sigma_w2, tol)?;
            let kij = q_func(c)? / (1.0 - sigma_w2);
            cos[(i, j)] = c;
            cos[(j, i)] = c;
            k[(i, j)] = kij;
            k[(j, i)] = kij;
        }
    }
    let lambda_star = linalg::min_eig_sym(&k, 1e-12)?;
    Ok(PopulationKernel {
        k,
        cos_theta: cos,
        lambda_star,
        sigma_w2,
        depth: Depth::Infinite,
    })
}

/// Advisory width `⌈C·(n²/λ*²)·ln(n/(λ* t))⌉`.
pub fn suggested_width(n: usize, lambda_star: f64, t: f64, c: f64) -> Result<u64> {
    if !(lambda_star > 0.0) {
        return Err(DeqError::Assumption(format!("lambda_star must be positive, got {lambda_star}")));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(DeqError::Input(format!("failure probability must lie in (0, 1), got {t}")));
    }
    if !(c > 0.0) {
        return Err(DeqError::Input(format!("constant C must be positive, got {c}")));
    }
    let nf = n as f64;
    let w = c * (nf * nf / (lambda_star * lambda_star)) * (nf / (lambda_star * t)).ln();
    Ok(w.max(1.0).ceil() as u64)
}

/// Advisory depth `⌈C·ln(n/λ*)/ln(√2/(4σ_w))⌉`.
pub fn suggested_depth(n: usize, lambda_star: f64, sigma_w2: f64, c: f64) -> Result<u64> {
    if !(lambda_star > 0.0) {
        return Err(DeqError::Assumption(format!("lambda_star must be positive, got {lambda_star}")));
    }
    if !(sigma_w2 > 0.0 && sigma_w2 < SIGMA_W2_MAX) {
        return Err(DeqError::Assumption(format!("sigma_w^2 must lie in (0, 1/8), got {sigma_w2}")));
    }
    if !(c > 0.0) {
        return Err(DeqError::Input(format!("constant C must be positive, got {c}")));
    }
    let denom = (2f64.sqrt() / (4.0 * sigma_w2.sqrt())).ln();
    let l = c * (n as f64 / lambda_star).ln() / denom;
    Ok(l.max(1.0).ceil() as u64)
}
