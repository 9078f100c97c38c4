//! Monte Carlo and deterministic experiments on how the finite-width,
//! weight-tied Gram matrices approach their population kernels.
//!
//! Every Monte Carlo cell draws its parameters from
//! [`rng::cell_seed`]`(base_seed, m, trial)`, so a cell can be rerun alone
//! and results never depend on evaluation order.

use std::fmt::Write as _;

use crate::error::{DeqError, Result};
use crate::kernel::{self, FIXED_POINT_TOL};
use crate::linalg::{self, Matrix, Vector};
use crate::model::{self, DeqParams, SolverConfig};
use crate::rng;

pub const CSV_HEADER: &str = "experiment,m,l,trial,seed,error";
pub const SUMMARY_HEADER: &str = "experiment,m,l,trials,q1,median,q3";

/// `Z⁽¹⁾, …, Z⁽ˡ⁾` of the layer iteration `Z⁽ᵏ⁺¹⁾ = relu(WZ⁽ᵏ⁾ + UX)` from `Z⁽⁰⁾ = 0`.
pub fn layer_iterates(p: &DeqParams, x: &Matrix, l: usize) -> Result<Vec<Matrix>> {
    if x.nrows() != p.d() {
        return Err(DeqError::Input(format!("layer_iterates: X has {} rows, model expects d = {}", x.nrows(), p.d())));
    }
    let mut out = Vec::with_capacity(l);
    let mut z = Matrix::zeros(p.m(), x.ncols());
    for _ in 0..l {
        z = model::forward_layer(p, &z, x)?;
        out.push(z.clone());
    }
    Ok(out)
}

/// `‖K − K⁽ˡ⁾‖_F` for `l = 1..=l_max`, with `K` the infinite-depth kernel.
pub fn kernel_depth_decay(x: &Matrix, sigma_w2: f64, l_max: usize) -> Result<Vec<f64>> {
    let inf = kernel::kernel_fixed_point(x, sigma_w2, FIXED_POINT_TOL)?;
    Ok(kernel::kernel_layers(x, sigma_w2, l_max)?
        .iter()
        .map(|(k, _)| linalg::frobenius_norm(&(&inf.k - k)))
        .collect())
}

/// `(1/m)‖G − G⁽ˡ⁾‖_F` for `l = 1..=l_max`, with `G` the Gram matrix of
/// the converged equilibrium.
pub fn equilibrium_depth_decay(p: &DeqParams, x: &Matrix, l_max: usize, solver: &SolverConfig) -> Result<Vec<f64>> {
    let g = linalg::gram(&model::solve_equilibrium(p, x, solver)?.z);
    let m = p.m() as f64;
    Ok(layer_iterates(p, x, l_max)?
        .iter()
        .map(|z| linalg::frobenius_norm(&(&g - linalg::gram(z))) / m)
        .collect())
}

/// Least-squares slope of `ln(series)` against the index over `range`.
pub fn log_slope(series: &[f64], range: std::ops::Range<usize>) -> f64 {
    let pts: Vec<(f64, f64)> = range
        .filter(|&i| series[i] > 0.0)
        .map(|i| (i as f64, series[i].ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub m: usize,
    pub l: usize,
    pub trials: Vec<TrialResult>,
}

impl Cell {
    fn values(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.error).collect()
    }

    pub fn quartiles(&self) -> [f64; 3] {
        let v = self.values();
        [quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75)]
    }

    pub fn median(&self) -> f64 {
        quantile(&self.values(), 0.5)
    }

    /// Fraction of trials whose value is at least `threshold`.
    pub fn fraction_at_least(&self, threshold: f64) -> f64 {
        self.trials.iter().filter(|t| t.error >= threshold).count() as f64 / self.trials.len() as f64
    }
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub experiment: String,
    pub cells: Vec<Cell>,
    pub trials: usize,
    pub base_seed: u64,
}

impl ConcentrationReport {
    /// One row per trial.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for c in &self.cells {
            for t in &c.trials {
                let _ = writeln!(out, "{},{},{},{},{},{:?}", self.experiment, c.m, c.l, t.trial, t.seed, t.error);
            }
        }
        out
    }

    /// Quartiles per cell.
    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for c in &self.cells {
            let [q1, q2, q3] = c.quartiles();
            let _ = writeln!(out, "{},{},{},{},{:?},{:?},{:?}", self.experiment, c.m, c.l, c.trials.len(), q1, q2, q3);
        }
        out
    }

    pub fn medians(&self) -> Vec<f64> {
        self.cells.iter().map(Cell::median).collect()
    }
}

/// A deterministic series in the per-trial CSV layout (`trial = seed = 0`;
/// `m = 0` stands for the population kernel).
pub fn series_csv(experiment: &str, m: usize, series: &[f64]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for (i, v) in series.iter().enumerate() {
        let _ = writeln!(out, "{experiment},{m},{},0,0,{v:?}", i + 1);
    }
    out
}

fn check_grid(m_list: &[usize], trials: usize, min_trials: usize) -> Result<()> {
    if m_list.is_empty() {
        return Err(DeqError::Input("m_list must not be empty".into()));
    }
    if m_list.contains(&0) || m_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DeqError::Input(format!("m_list must be positive and strictly ascending, got {m_list:?}")));
    }
    if trials < min_trials {
        return Err(DeqError::Input(format!("at least {min_trials} trials are required, got {trials}")));
    }
    Ok(())
}

fn run_grid<F>(experiment: &str, m_list: &[usize], l: usize, trials: usize, base_seed: u64, mut cell: F) -> Result<ConcentrationReport>
where
    F: FnMut(usize, u64) -> Result<f64>,
{
    let mut cells = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let mut results = Vec::with_capacity(trials);
        for trial in 0..trials {
            let seed = rng::cell_seed(base_seed, m as u64, trial as u64);
            results.push(TrialResult {
                trial,
                seed,
                error: cell(m, seed)?,
            });
        }
        cells.push(Cell { m, l, trials: results });
    }
    Ok(ConcentrationReport {
        experiment: experiment.to_string(),
        cells,
        trials,
        base_seed,
    })
}

/// Minimum trial count accepted by [`tied_vs_population`].
pub const MIN_TRIALS: usize = 10;

/// `‖(1/m)G⁽ˡ⁾ − K⁽ˡ⁾‖_F` over fresh initializations, per width.
pub fn tied_vs_population(x: &Matrix, sigma_w2: f64, m_list: &[usize], l: usize, trials: usize, base_seed: u64) -> Result<ConcentrationReport> {
    check_grid(m_list, trials, MIN_TRIALS)?;
    let target = kernel::kernel_recursion(x, sigma_w2, l)?.k;
    run_grid("tied_vs_population", m_list, l, trials, base_seed, |m, seed| {
        let p = model::init_params(m, x.nrows(), sigma_w2, seed)?;
        let z = layer_iterates(&p, x, l)?.pop().expect("l >= 1");
        Ok(linalg::frobenius_norm(&(linalg::gram(&z) / m as f64 - &target)))
    })
}

/// `λ₀/(mλ*)` over fresh initializations, per width, with `λ₀` the least
/// eigenvalue of the equilibrium Gram matrix and `λ*` that of the
/// infinite-depth kernel.
pub fn lambda0_vs_width(x: &Matrix, sigma_w2: f64, m_list: &[usize], trials: usize, base_seed: u64, solver: &SolverConfig) -> Result<ConcentrationReport> {
    check_grid(m_list, trials, 1)?;
    let lambda_star = kernel::kernel_fixed_point(x, sigma_w2, FIXED_POINT_TOL)?.lambda_star;
    if !(lambda_star > 0.0) {
        return Err(DeqError::Assumption(format!("population kernel is not positive definite (lambda* = {lambda_star:e})")));
    }
    run_grid("lambda0_vs_width", m_list, 0, trials, base_seed, |m, seed| {
        let p = model::init_params(m, x.nrows(), sigma_w2, seed)?;
        let z = model::solve_equilibrium(&p, x, solver)?.z;
        let lambda_0 = linalg::min_eig_sym(&linalg::gram(&z), 1e-12)?;
        Ok(lambda_0 / (m as f64 * lambda_star))
    })
}

/// Result of rebuilding one layer of the weight-tied network from a fresh
/// Gaussian matrix acting on lifted inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `|φ(Mh)ᵀφ(Mh′) − G⁽ˡ⁺¹⁾ᵢⱼ|`.
    pub identity_error: f64,
    /// `|hᵀh′ − (σ_w²/m·G⁽ˡ⁾ᵢⱼ + xᵢᵀxⱼ/d)|`.
    pub inner_product_error: f64,
    /// `‖Mh − (Wzᵢ⁽ˡ⁾ + Uxᵢ)‖`, a by-product check.
    pub preactivation_error: f64,
}

/// Norms below this make the projected directions undefined.
pub const SPLIT_TOL: f64 = 1e-12;

/// Rebuilds `G⁽ˡ⁺¹⁾ᵢⱼ` from `M = [σ⁻¹√m·WV, σ⁻¹√m·Wp/‖p‖, σ⁻¹√m·Wq⊥/‖q⊥‖, √d·U]`
/// and the lifted vectors
///
/// ```text
/// h  = [σ/√m·Vᵀzᵢ, σ/√m·‖p‖,            0,            xᵢ/√d]
/// h′ = [σ/√m·Vᵀzⱼ, σ·pᵀq/(√m‖p‖),       σ/√m·‖q⊥‖,    xⱼ/√d]
/// ```
///
/// where `V` is an orthonormal basis of the earlier hidden states
/// `zᵢ⁽¹⁾…zᵢ⁽ˡ⁻¹⁾, zⱼ⁽¹⁾…zⱼ⁽ˡ⁻¹⁾` (only the `zᵢ` when `i = j`), `p`, `q` are
/// the residuals of `zᵢ⁽ˡ⁾`, `zⱼ⁽ˡ⁾` after projecting out `V`, and `q⊥` is
/// the part of `q` orthogonal to `p`. A zero column stands in for
/// `Wq⊥/‖q⊥‖` when `q⊥` vanishes.
pub fn fresh_randomness_reconstruct(p: &DeqParams, x: &Matrix, i: usize, j: usize, l: usize) -> Result<Reconstruction> {
    let n = x.ncols();
    if l == 0 {
        return Err(DeqError::Input("reconstruction needs l >= 1".into()));
    }
    if i >= n || j >= n {
        return Err(DeqError::Input(format!("indices ({i}, {j}) out of range for n = {n}")));
    }
    let (m, d) = (p.m(), p.d());
    let (mf, df) = (m as f64, d as f64);
    let sigma = p.sigma_w2.sqrt();
    let iters = layer_iterates(p, x, l + 1)?;
    let zi = |k: usize| iters[k - 1].column(i).into_owned();
    let zj = |k: usize| iters[k - 1].column(j).into_owned();

    let mut earlier: Vec<Vector> = (1..l).map(zi).collect();
    if i != j {
        earlier.extend((1..l).map(zj));
    }
    let v = if earlier.is_empty() {
        Matrix::zeros(m, 0)
    } else {
        linalg::gram_schmidt(&earlier, SPLIT_TOL)?
    };

    let (zil, zjl) = (zi(l), zj(l));
    let vzi = v.tr_mul(&zil);
    let vzj = v.tr_mul(&zjl);
    let pv = &zil - &v * &vzi;
    let qv = &zjl - &v * &vzj;
    let p_norm = pv.norm();
    if p_norm < SPLIT_TOL {
        return Err(DeqError::Degenerate(format!("projected state p has norm {p_norm:e}")));
    }
    let ptq = pv.dot(&qv);
    let q_perp = &qv - &pv * (ptq / (p_norm * p_norm));
    let q_perp_norm = q_perp.norm();

    let scale = mf.sqrt() / sigma;
    let k = v.ncols();
    let mut big = Matrix::zeros(m, k + 2 + d);
    big.columns_mut(0, k).copy_from(&(&p.w * &v * scale));
    big.set_column(k, &(&p.w * &pv * (scale / p_norm)));
    if q_perp_norm >= SPLIT_TOL {
        big.set_column(k + 1, &(&p.w * &q_perp * (scale / q_perp_norm)));
    }
    big.columns_mut(k + 2, d).copy_from(&(&p.u * df.sqrt()));

    let lift = sigma / mf.sqrt();
    let mut h = Vector::zeros(k + 2 + d);
    let mut hp = Vector::zeros(k + 2 + d);
    h.rows_mut(0, k).copy_from(&(&vzi * lift));
    hp.rows_mut(0, k).copy_from(&(&vzj * lift));
    h[k] = lift * p_norm;
    hp[k] = lift * ptq / p_norm;
    hp[k + 1] = if q_perp_norm >= SPLIT_TOL { lift * q_perp_norm } else { 0.0 };
    h.rows_mut(k + 2, d).copy_from(&(x.column(i) / df.sqrt()));
    hp.rows_mut(k + 2, d).copy_from(&(x.column(j) / df.sqrt()));

    let pre_i = &big * &h;
    let pre_j = &big * &hp;
    let direct = &p.w * &zil + &p.u * x.column(i);
    let relu = |v: &Vector| v.map(|e| e.max(0.0));
    let rebuilt = relu(&pre_i).dot(&relu(&pre_j));
    let g_next = iters[l].column(i).dot(&iters[l].column(j));
    let g_l = zil.dot(&zjl);
    let target = p.sigma_w2 / mf * g_l + x.column(i).dot(&x.column(j)) / df;

    Ok(Reconstruction {
        identity_error: (rebuilt - g_next).abs(),
        inner_product_error: (h.dot(&hp) - target).abs(),
        preactivation_error: (pre_i - direct).norm(),
    })
}
