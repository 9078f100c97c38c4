//! Model parameters, random initialization and the equilibrium solver.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{DeqError, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::rng;

/// Upper bound (exclusive) on the weight variance scale `σ_w²`.
pub const SIGMA_W2_MAX: f64 = 0.125;

/// Trainable state `(W, U, a)` of a DEQ together with its variance scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DeqParams {
    pub w: Matrix,
    pub u: Matrix,
    pub a: Vector,
    pub sigma_w2: f64,
}

impl DeqParams {
    pub fn new(w: Matrix, u: Matrix, a: Vector, sigma_w2: f64) -> Result<Self> {
        check_sigma(sigma_w2)?;
        let m = w.nrows();
        if m == 0 || w.ncols() != m {
            return Err(DeqError::shape("DeqParams::new", "non-empty square W", format!("{}x{}", w.nrows(), w.ncols())));
        }
        if u.nrows() != m || u.ncols() == 0 {
            return Err(DeqError::shape("DeqParams::new", format!("U with {m} rows"), format!("{}x{}", u.nrows(), u.ncols())));
        }
        if a.len() != m {
            return Err(DeqError::shape("DeqParams::new", format!("a of length {m}"), format!("{}", a.len())));
        }
        let p = Self { w, u, a, sigma_w2 };
        p.check_finite()?;
        Ok(p)
    }

    pub fn m(&self) -> usize {
        self.w.nrows()
    }

    pub fn d(&self) -> usize {
        self.u.ncols()
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        let finite = self.w.iter().chain(self.u.iter()).chain(self.a.iter()).all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(DeqError::Input("parameters contain non-finite entries".into()))
        }
    }
}

fn check_sigma(sigma_w2: f64) -> Result<()> {
    if sigma_w2 > 0.0 && sigma_w2 < SIGMA_W2_MAX {
        Ok(())
    } else {
        Err(DeqError::Assumption(format!("sigma_w^2 must lie in (0, 1/8), got {sigma_w2}")))
    }
}

/// Stopping rule for the fixed-point solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Relative Frobenius residual at which iteration stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(DeqError::Input(format!("solver config needs tol > 0 and max_iter >= 1, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    /// The fixed point, one hidden state per column.
    pub z: Matrix,
    /// `‖Z − relu(WZ + UX)‖_F / max(1, ‖Z‖_F)` of the returned `z`.
    pub residual: f64,
    /// Number of layer applications performed.
    pub iterations: usize,
    /// Residual after each layer application.
    pub history: Vec<f64>,
}

/// Gaussian initialization: `W_ij ~ N(0, 2σ_w²/m)`, `U_ij ~ N(0, 2/d)`,
/// `a_i ~ N(0, 1/m)`, drawn in that order from one seeded stream.
pub fn init_params(m: usize, d: usize, sigma_w2: f64, seed: u64) -> Result<DeqParams> {
    check_sigma(sigma_w2)?;
    if m == 0 || d == 0 {
        return Err(DeqError::Input(format!("init_params needs m, d >= 1, got m={m}, d={d}")));
    }
    let mut rng = rng::rng(seed);
    let nw = Normal::new(0.0, (2.0 * sigma_w2 / m as f64).sqrt()).expect("positive std");
    let nu = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("positive std");
    let na = Normal::new(0.0, (1.0 / m as f64).sqrt()).expect("positive std");
    let w = Matrix::from_fn(m, m, |_, _| nw.sample(&mut rng));
    let u = Matrix::from_fn(m, d, |_, _| nu.sample(&mut rng));
    let a = Vector::from_fn(m, |_, _| na.sample(&mut rng));
    DeqParams::new(w, u, a, sigma_w2)
}

fn check_inputs(p: &DeqParams, x: &Matrix, op: &'static str) -> Result<()> {
    if x.nrows() != p.d() {
        return Err(DeqError::shape(op, format!("X with {} rows", p.d()), format!("{} rows", x.nrows())));
    }
    Ok(())
}

#[inline]
fn relu_in_place(m: &mut Matrix) {
    m.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// One layer: `relu(W Z + U X)`.
pub fn forward_layer(p: &DeqParams, z: &Matrix, x: &Matrix) -> Result<Matrix> {
    check_inputs(p, x, "forward_layer")?;
    if z.nrows() != p.m() || z.ncols() != x.ncols() {
        return Err(DeqError::shape(
            "forward_layer",
            format!("Z of shape {}x{}", p.m(), x.ncols()),
            format!("{}x{}", z.nrows(), z.ncols()),
        ));
    }
    let mut out = &p.u * x;
    out.gemm(1.0, &p.w, z, 1.0);
    relu_in_place(&mut out);
    Ok(out)
}

/// `(‖W‖₂, ‖W‖₂ < 1 − margin)`.
pub fn well_posedness(p: &DeqParams, margin: f64) -> Result<(f64, bool)> {
    let s = linalg::spectral_norm(&p.w, linalg::SPECTRAL_TOL)?;
    Ok((s, s < 1.0 - margin))
}

/// Solves `Z = relu(WZ + UX)` by Picard iteration from `Z = 0`.
pub fn solve_equilibrium(p: &DeqParams, x: &Matrix, cfg: &SolverConfig) -> Result<EquilibriumSolution> {
    let (w_norm, _) = well_posedness(p, 0.0)?;
    solve_equilibrium_with(p, x, cfg, None, w_norm)
}

/// Picard iteration from an optional warm start, with the caller supplying
/// a previously computed `‖W‖₂` for the well-posedness check.
pub fn solve_equilibrium_with(
    p: &DeqParams,
    x: &Matrix,
    cfg: &SolverConfig,
    start: Option<&Matrix>,
    w_norm: f64,
) -> Result<EquilibriumSolution> {
    cfg.validate()?;
    check_inputs(p, x, "solve_equilibrium")?;
    if !(w_norm < 1.0) {
        return Err(DeqError::WellPosedness {
            spec_norm: w_norm,
            bound: 1.0,
        });
    }
    let (m, n) = (p.m(), x.ncols());
    let injection = &p.u * x;
    let mut z = match start {
        Some(s) if s.shape() == (m, n) => s.clone(),
        Some(s) => {
            return Err(DeqError::shape("solve_equilibrium", format!("start of shape {m}x{n}"), format!("{}x{}", s.nrows(), s.ncols())));
        }
        None => Matrix::zeros(m, n),
    };
    let mut next = Matrix::zeros(m, n);
    let mut history = Vec::new();
    for k in 1..=cfg.max_iter {
        next.copy_from(&injection);
        next.gemm(1.0, &p.w, &z, 1.0);
        relu_in_place(&mut next);
        let diff = z.iter().zip(next.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let residual = diff / linalg::frobenius_norm(&z).max(1.0);
        if !residual.is_finite() {
            return Err(DeqError::Convergence {
                what: "equilibrium solve",
                iterations: k,
                residual,
            });
        }
        history.push(residual);
        if residual <= cfg.tol {
            return Ok(EquilibriumSolution {
                z,
                residual,
                iterations: k,
                history,
            });
        }
        std::mem::swap(&mut z, &mut next);
    }
    Err(DeqError::Convergence {
        what: "equilibrium solve",
        iterations: cfg.max_iter,
        residual: *history.last().unwrap_or(&f64::NAN),
    })
}

/// `ŷ_i = aᵀ z_i`.
pub fn predict(p: &DeqParams, z: &Matrix) -> Result<Vector> {
    if z.nrows() != p.m() {
        return Err(DeqError::shape("predict", format!("Z with {} rows", p.m()), format!("{} rows", z.nrows())));
    }
    Ok(z.tr_mul(&p.a))
}

/// `½‖ŷ − y‖²`.
pub fn loss(yhat: &Vector, y: &Vector) -> Result<f64> {
    if yhat.len() != y.len() {
        return Err(DeqError::shape("loss", format!("{} labels", yhat.len()), format!("{}", y.len())));
    }
    Ok(0.5 * yhat.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian binary layout, version 1:
//
//   bytes 0..8    magic b"DEQCKPT\0"
//   u32           format version (1)
//   u64 m, u64 d
//   f64 sigma_w2
//   u64 step
//   f64 lambda_0, f64 phi_0, f64 eta   (NaN when not part of a training run)
//   f64 × m·m     W, column-major
//   f64 × m·d     U, column-major
//   f64 × m       a
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DEQCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus the training-run anchors needed to resume a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DeqParams,
    pub step: u64,
    pub lambda_0: f64,
    pub phi_0: f64,
    pub eta: f64,
}

impl Checkpoint {
    pub fn bare(params: DeqParams) -> Self {
        Self {
            params,
            step: 0,
            lambda_0: f64::NAN,
            phi_0: f64::NAN,
            eta: f64::NAN,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let (m, d) = (p.m(), p.d());
        let mut out = Vec::with_capacity(64 + 8 * (m * m + m * d + m));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(m as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&p.sigma_w2.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for v in [self.lambda_0, self.phi_0, self.eta] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in p.w.iter().chain(p.u.iter()).chain(p.a.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(DeqError::Parse("checkpoint: bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(DeqError::Parse(format!("checkpoint: unsupported version {version}")));
        }
        let m = r.u64()? as usize;
        let d = r.u64()? as usize;
        let sigma_w2 = r.f64()?;
        let step = r.u64()?;
        let (lambda_0, phi_0, eta) = (r.f64()?, r.f64()?, r.f64()?);
        let expected = m
            .checked_mul(m)
            .and_then(|mm| mm.checked_add(m.checked_mul(d)?))
            .and_then(|k| k.checked_add(m))
            .and_then(|k| k.checked_mul(8))
            .ok_or_else(|| DeqError::Parse("checkpoint: dimensions overflow".into()))?;
        if bytes.len() - r.at != expected {
            return Err(DeqError::Parse(format!(
                "checkpoint: expected {expected} payload bytes, found {}",
                bytes.len() - r.at
            )));
        }
        let mut floats = |k: usize| -> Result<Vec<f64>> { (0..k).map(|_| r.f64()).collect() };
        let w = Matrix::from_vec(m, m, floats(m * m)?);
        let u = Matrix::from_vec(m, d, floats(m * d)?);
        let a = Vector::from_vec(floats(m)?);
        Ok(Self {
            params: DeqParams::new(w, u, a, sigma_w2)?,
            step,
            lambda_0,
            phi_0,
            eta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + k)
            .ok_or_else(|| DeqError::Parse("checkpoint: truncated".into()))?;
        self.at += k;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_sphere_data;

    fn small(m: usize, d: usize, seed: u64) -> DeqParams {
        init_params(m, d, 0.08, seed).unwrap()
    }

    #[test]
    fn init_variances() {
        let p = init_params(2000, 100, 0.08, 1).unwrap();
        let var = |it: &mut dyn Iterator<Item = &f64>, k: usize| it.map(|v| v * v).sum::<f64>() / k as f64;
        let vw = var(&mut p.w.iter(), 2000 * 2000);
        let target = 2.0 * 0.08 / 2000.0;
        assert!((vw - target).abs() < 0.05 * target, "{vw} vs {target}");
        let vu = var(&mut p.u.iter(), 2000 * 100);
        assert!((vu - 0.02).abs() < 0.05 * 0.02);
        let va = var(&mut p.a.iter(), 2000);
        assert!((va - 1.0 / 2000.0).abs() < 0.1 / 2000.0);
    }

    #[test]
    fn init_rejects_sigma_out_of_range() {
        assert!(matches!(init_params(10, 5, 0.2, 0), Err(DeqError::Assumption(_))));
        assert!(init_params(10, 5, 0.0, 0).is_err());
        assert!(init_params(10, 5, 0.125, 0).is_err());
        assert!(init_params(0, 5, 0.08, 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(small(20, 4, 9), small(20, 4, 9));
        assert_ne!(small(20, 4, 9), small(20, 4, 10));
    }

    #[test]
    fn init_spectral_norm_concentrates() {
        // 2√(2σ²) = 0.8 is the spectral edge itself, so the per-trial check
        // uses the finite-m tail bound (2√m + t)√(2σ²/m) with t = 3.3
        let (m, s2) = (1000usize, 0.08);
        let bound = (2.0 * (m as f64).sqrt() + 3.3) * (2.0 * s2 / m as f64).sqrt();
        let norms: Vec<f64> = (0..100)
            .map(|k| linalg::spectral_norm(&init_params(m, 1, s2, 1000 + k).unwrap().w, 1e-8).unwrap())
            .collect();
        let within = norms.iter().filter(|&&v| v <= bound).count();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        assert!(within >= 99, "{within}/100 below {bound}");
        assert!(mean <= 0.8, "mean {mean}");
    }

    #[test]
    fn forward_layer_cases() {
        let p = small(6, 3, 0);
        let zero = forward_layer(&p, &Matrix::zeros(6, 2), &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(zero, Matrix::zeros(6, 2));

        let mut q = p.clone();
        q.w.fill(0.0);
        let x = Matrix::from_fn(3, 2, |r, c| (r as f64) - (c as f64) * 0.7 + 0.2);
        let z = Matrix::from_fn(6, 2, |r, c| (r * c) as f64);
        let ux = (&q.u * &x).map(|v| v.max(0.0));
        assert_eq!(forward_layer(&q, &z, &x).unwrap(), ux);

        // elementwise oracle
        let out = forward_layer(&p, &z, &x).unwrap();
        for i in 0..6 {
            for j in 0..2 {
                let pre: f64 = (0..6).map(|k| p.w[(i, k)] * z[(k, j)]).sum::<f64>()
                    + (0..3).map(|k| p.u[(i, k)] * x[(k, j)]).sum::<f64>();
                assert!((out[(i, j)] - pre.max(0.0)).abs() < 1e-13);
            }
        }
        assert!(forward_layer(&p, &Matrix::zeros(5, 2), &x).is_err());
        assert!(forward_layer(&p, &z, &Matrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn equilibrium_zero_input() {
        let p = small(30, 5, 2);
        let sol = solve_equilibrium(&p, &Matrix::zeros(5, 3), &SolverConfig::default()).unwrap();
        assert_eq!(sol.z, Matrix::zeros(30, 3));
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn equilibrium_decoupled() {
        let mut p = small(30, 5, 3);
        p.w.fill(0.0);
        let x = gen_sphere_data(4, 5, 1).unwrap().x().clone();
        let sol = solve_equilibrium(&p, &x, &SolverConfig::default()).unwrap();
        assert_eq!(sol.z, (&p.u * &x).map(|v| v.max(0.0)));
        assert_eq!(sol.iterations, 2);
        assert_eq!(sol.residual, 0.0);
    }

    #[test]
    fn equilibrium_random_instance() {
        let p = small(200, 20, 4);
        let x = gen_sphere_data(10, 20, 5).unwrap().x().clone();
        let cfg = SolverConfig::default();
        let sol = solve_equilibrium(&p, &x, &cfg).unwrap();
        let f = forward_layer(&p, &sol.z, &x).unwrap();
        let recomputed = linalg::frobenius_norm(&(&sol.z - &f)) / linalg::frobenius_norm(&sol.z).max(1.0);
        assert!(recomputed <= cfg.tol);
        assert!((recomputed - sol.residual).abs() <= 1e-14);
        assert!(sol.z.iter().all(|&v| v >= 0.0));

        let (wn, ok) = well_posedness(&p, 0.0).unwrap();
        assert!(ok);
        let bound = ((cfg.tol * (1.0 - wn)).ln() / wn.ln()).ceil() as usize + 10;
        assert!(sol.iterations <= bound, "{} > {bound}", sol.iterations);

        for w in sol.history[1..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "residuals increased: {w:?}");
        }
        // ‖Z‖_F ≤ ‖U‖₂‖X‖_F/(1 − ‖W‖₂)
        let un = linalg::spectral_norm(&p.u, 1e-12).unwrap();
        assert!(linalg::frobenius_norm(&sol.z) <= un * linalg::frobenius_norm(&x) / (1.0 - wn) + 1e-8);

        let again = solve_equilibrium(&p, &x, &cfg).unwrap();
        assert_eq!(again.z, sol.z);
    }

    #[test]
    fn equilibrium_warm_start_matches() {
        let p = small(100, 10, 6);
        let x = gen_sphere_data(5, 10, 6).unwrap().x().clone();
        let cfg = SolverConfig { tol: 1e-12, max_iter: 1000 };
        let cold = solve_equilibrium(&p, &x, &cfg).unwrap();
        let (wn, _) = well_posedness(&p, 0.0).unwrap();
        let warm = solve_equilibrium_with(&p, &x, &cfg, Some(&cold.z), wn).unwrap();
        assert_eq!(warm.iterations, 1);
        assert!(linalg::frobenius_norm(&(&warm.z - &cold.z)) < 1e-10);
    }

    #[test]
    fn equilibrium_errors() {
        let mut p = small(10, 3, 7);
        let x = gen_sphere_data(2, 3, 1).unwrap().x().clone();
        p.w = Matrix::identity(10, 10) * 1.5;
        assert!(matches!(solve_equilibrium(&p, &x, &SolverConfig::default()), Err(DeqError::WellPosedness { .. })));

        let p = small(50, 3, 7);
        let cfg = SolverConfig { tol: 1e-14, max_iter: 2 };
        match solve_equilibrium(&p, &x, &cfg) {
            Err(DeqError::Convergence { iterations, residual, .. }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn well_posedness_cases() {
        let mut p = small(10, 3, 0);
        p.w.fill(0.0);
        assert_eq!(well_posedness(&p, 0.0).unwrap(), (0.0, true));
        p.w = Matrix::identity(10, 10) * 1.5;
        let (s, ok) = well_posedness(&p, 0.0).unwrap();
        assert!((s - 1.5).abs() < 1e-12 && !ok);
    }

    #[test]
    fn predict_and_loss() {
        let mut p = small(8, 3, 1);
        let z = Matrix::from_fn(8, 3, |r, c| (r + 2 * c) as f64 * 0.1);
        let yhat = predict(&p, &z).unwrap();
        for j in 0..3 {
            let dot: f64 = (0..8).map(|k| p.a[k] * z[(k, j)]).sum();
            assert!((yhat[j] - dot).abs() < 1e-12);
        }
        assert_eq!(predict(&p, &Matrix::zeros(8, 3)).unwrap(), Vector::zeros(3));
        p.a.fill(0.0);
        assert_eq!(predict(&p, &z).unwrap(), Vector::zeros(3));
        assert!(predict(&p, &Matrix::zeros(7, 3)).is_err());

        let y = Vector::from_vec(vec![0.3, -1.0]);
        assert_eq!(loss(&y, &y).unwrap(), 0.0);
        assert_eq!(loss(&Vector::from_vec(vec![1.0, 1.0]), &Vector::zeros(2)).unwrap(), 1.0);
        let a = Vector::from_vec(vec![0.5, 2.0, -1.0]);
        let b = Vector::from_vec(vec![1.5, 0.0, 1.0]);
        assert!((loss(&a, &b).unwrap() - 0.5 * (1.0 + 4.0 + 4.0)).abs() < 1e-15);
        assert!(loss(&a, &y).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = small(7, 3, 11);
        let ck = Checkpoint {
            params: p,
            step: 42,
            lambda_0: 0.25,
            phi_0: 3.5,
            eta: f64::NAN,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert_eq!(back.params, ck.params);
        assert_eq!(back.step, 42);

        let mut bytes = ck.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut bytes = ck.to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
