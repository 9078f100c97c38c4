//! Dense matrix helpers and spectral utilities.
//!
//! Matrices are column-major `nalgebra` matrices; data points, hidden
//! features and adjoint states are all stored one sample per column.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{DeqError, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative tolerance for [`spectral_norm`].
pub const SPECTRAL_TOL: f64 = 1e-10;
/// Iteration cap for power iteration.
pub const SPECTRAL_MAX_ITER: usize = 10_000;

/// Eigen-decomposition of a symmetric matrix with eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the unit eigenvector for `eigenvalues[k]`.
    pub eigenvectors: Option<Matrix>,
}

impl SymEig {
    pub fn min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty spectrum")
    }
}

pub(crate) fn ensure_finite(a: &Matrix, op: &'static str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DeqError::Input(format!("{op}: matrix has non-finite entries")))
    }
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value of `a`, by Lanczos iteration on `aᵀa`.
///
/// Starts from the normalized all-ones vector, so the result is a pure
/// function of `a`. Iteration stops once the Ritz residual of the top
/// eigenvalue of `aᵀa` is below `tol` relative to the eigenvalue.
pub fn spectral_norm(a: &Matrix, tol: f64) -> Result<f64> {
    spectral_norm_from(a, None, tol).map(|(s, _)| s)
}

/// Lanczos from an explicit start vector; also returns the final right
/// singular vector estimate so callers can warm-start the next call on a
/// nearby matrix. Every Krylov vector is reorthogonalized against all
/// previous ones, and a breakdown restarts from the next coordinate
/// direction not yet spanned.
pub fn spectral_norm_from(a: &Matrix, start: Option<&Vector>, tol: f64) -> Result<(f64, Vector)> {
    if a.is_empty() {
        return Err(DeqError::Input("spectral_norm: empty matrix".into()));
    }
    if !(tol > 0.0) {
        return Err(DeqError::Input(format!("spectral_norm: tol must be positive, got {tol}")));
    }
    ensure_finite(a, "spectral_norm")?;

    let cols = a.ncols();
    let first = match start {
        Some(s) if s.len() == cols && s.norm() > 0.0 => s.normalize(),
        Some(s) if s.len() != cols => {
            return Err(DeqError::shape("spectral_norm", format!("start of length {cols}"), format!("{}", s.len())));
        }
        _ => Vector::from_element(cols, 1.0 / (cols as f64).sqrt()),
    };
    if frobenius_norm(a) == 0.0 {
        return Ok((0.0, first));
    }

    let max_iter = cols.min(SPECTRAL_MAX_ITER);
    let mut basis: Vec<Vector> = vec![first];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut next_coord = 0;
    let mut last = (0.0, f64::INFINITY);
    for k in 0..max_iter {
        let q = &basis[k];
        let mut w = a.tr_mul(&(a * q));
        let alpha = q.dot(&w);
        alphas.push(alpha);
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let mut beta = w.norm();

        let t = Matrix::from_fn(k + 1, k + 1, |r, c| {
            if r == c {
                alphas[r]
            } else if r + 1 == c {
                betas[r]
            } else if c + 1 == r {
                betas[c]
            } else {
                0.0
            }
        });
        let eig = nalgebra::SymmetricEigen::new(t);
        let top = eig.eigenvalues.imax();
        let theta = eig.eigenvalues[top];
        let s_last = eig.eigenvectors[(k, top)];
        let ritz = || {
            let mut v = Vector::zeros(cols);
            for (i, b) in basis.iter().enumerate() {
                v.axpy(eig.eigenvectors[(i, top)], b, 1.0);
            }
            v.normalize()
        };

        let breakdown = beta <= 1e-14 * theta.abs().max(f64::MIN_POSITIVE);
        let resid = if breakdown { 0.0 } else { beta * s_last.abs() };
        last = (theta, resid);
        if k + 1 == cols || (resid <= tol * theta && !breakdown) {
            return Ok((theta.max(0.0).sqrt(), ritz()));
        }
        if breakdown {
            // The Krylov space is invariant: continue in a fresh direction.
            let mut fresh = None;
            while next_coord < cols {
                let mut e = Vector::zeros(cols);
                e[next_coord] = 1.0;
                next_coord += 1;
                for _ in 0..2 {
                    for b in &basis {
                        let c = b.dot(&e);
                        e.axpy(-c, b, 1.0);
                    }
                }
                if e.norm() > 1e-8 {
                    fresh = Some(e.normalize());
                    break;
                }
            }
            match fresh {
                Some(e) => w = e,
                None => return Ok((theta.max(0.0).sqrt(), ritz())),
            }
            beta = 0.0;
        } else {
            w /= beta;
        }
        betas.push(beta);
        basis.push(w);
    }
    Err(DeqError::Convergence {
        what: "spectral norm Lanczos iteration",
        iterations: max_iter,
        residual: last.1 / last.0.abs().max(f64::MIN_POSITIVE),
    })
}

/// `zᵀz`, symmetrized so that the result is exactly symmetric.
pub fn gram(z: &Matrix) -> Matrix {
    let g = z.tr_mul(z);
    symmetrize(g)
}

pub(crate) fn symmetrize(mut g: Matrix) -> Matrix {
    let n = g.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = avg;
            g[(j, i)] = avg;
        }
    }
    g
}

fn check_symmetric(s: &Matrix, tol: f64, op: &'static str) -> Result<()> {
    if s.nrows() != s.ncols() || s.is_empty() {
        return Err(DeqError::shape(op, "non-empty square matrix", format!("{}x{}", s.nrows(), s.ncols())));
    }
    ensure_finite(s, op)?;
    let scale = frobenius_norm(s);
    let n = s.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    if worst > tol * scale {
        return Err(DeqError::Input(format!(
            "{op}: matrix is not symmetric (max asymmetry {worst:e}, allowed {:e})",
            tol * scale
        )));
    }
    Ok(())
}

/// Full symmetric eigendecomposition, eigenvalues ascending.
///
/// Symmetry is checked to `tol` relative to the Frobenius norm, which
/// bounds the spectral norm from above.
pub fn sym_eig(s: &Matrix, tol: f64, with_vectors: bool) -> Result<SymEig> {
    check_symmetric(s, tol, "sym_eig")?;
    let eig = SymmetricEigen::try_new(s.clone(), f64::EPSILON, 0)
        .ok_or(DeqError::Convergence {
            what: "symmetric eigensolver",
            iterations: 0,
            residual: f64::NAN,
        })?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let eigenvectors = with_vectors.then(|| {
        let n = s.nrows();
        Matrix::from_fn(n, n, |i, k| eig.eigenvectors[(i, order[k])])
    });
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Least eigenvalue of a symmetric matrix.
pub fn min_eig_sym(s: &Matrix, tol: f64) -> Result<f64> {
    sym_eig(s, tol, false).map(|e| e.min())
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
///
/// Returns an `m × k` matrix with orthonormal columns spanning the input
/// vectors. A vector whose residual after projection is shorter than
/// `drop_tol` is reported as degenerate rather than silently dropped.
pub fn gram_schmidt(vectors: &[Vector], drop_tol: f64) -> Result<Matrix> {
    let Some(first) = vectors.first() else {
        return Err(DeqError::Input("gram_schmidt: no vectors".into()));
    };
    let m = first.len();
    let mut basis: Vec<Vector> = Vec::with_capacity(vectors.len());
    for (idx, v) in vectors.iter().enumerate() {
        if v.len() != m {
            return Err(DeqError::shape("gram_schmidt", format!("vectors of length {m}"), format!("{} at index {idx}", v.len())));
        }
        let mut r = v.clone();
        for _pass in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let norm = r.norm();
        if !(norm >= drop_tol) {
            return Err(DeqError::Degenerate(format!(
                "gram_schmidt: vector {idx} is (numerically) in the span of the previous ones (residual {norm:e})"
            )));
        }
        basis.push(r / norm);
    }
    Ok(Matrix::from_columns(&basis))
}

/// `‖VᵀV − I‖_F`, the orthonormality defect of a column set.
pub fn orthonormality_defect(v: &Matrix) -> f64 {
    let g = v.tr_mul(v);
    let k = g.nrows();
    frobenius_norm(&(g - Matrix::identity(k, k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn spectral_norm_simple_cases() {
        assert!((spectral_norm(&Matrix::identity(5, 5), 1e-12).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(spectral_norm(&Matrix::zeros(4, 3), 1e-10).unwrap(), 0.0);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 1.0, 0.5]));
        assert!((spectral_norm(&d, 1e-12).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn spectral_norm_rejects_bad_input() {
        let mut a = Matrix::identity(3, 3);
        a[(1, 2)] = f64::NAN;
        assert!(matches!(spectral_norm(&a, 1e-10), Err(DeqError::Input(_))));
        assert!(spectral_norm(&Matrix::identity(2, 2), 0.0).is_err());
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let a = random(40, 25, 3);
        let svd = a.clone().svd(false, false);
        let top = svd.singular_values.max();
        let est = spectral_norm(&a, 1e-13).unwrap();
        assert!((est - top).abs() <= 1e-8 * top, "{est} vs {top}");
    }

    #[test]
    fn min_eig_simple_cases() {
        assert!((min_eig_sym(&Matrix::identity(6, 6), 1e-12).unwrap() - 1.0).abs() < 1e-14);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 0.3, 7.0]));
        assert!((min_eig_sym(&d, 1e-12).unwrap() - 0.3).abs() < 1e-14);
    }

    #[test]
    fn min_eig_of_gram_is_smallest_singular_value_squared() {
        let z = random(10, 4, 11);
        let g = gram(&z);
        let svd = z.clone().svd(false, false);
        let smin = svd.singular_values.min();
        let lam = min_eig_sym(&g, 1e-12).unwrap();
        assert!((lam - smin * smin).abs() < 1e-10, "{lam} vs {}", smin * smin);
    }

    #[test]
    fn min_eig_rejects_asymmetric() {
        let mut s = Matrix::identity(3, 3);
        s[(0, 1)] = 0.5;
        assert!(matches!(min_eig_sym(&s, 1e-10), Err(DeqError::Input(_))));
    }

    #[test]
    fn sym_eig_is_ascending_with_vectors() {
        let z = random(7, 7, 5);
        let s = gram(&z);
        let e = sym_eig(&s, 1e-12, true).unwrap();
        assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        let v = e.eigenvectors.clone().unwrap();
        for k in 0..7 {
            let col = v.column(k).into_owned();
            let r = &s * &col - e.eigenvalues[k] * &col;
            assert!(r.norm() < 1e-9 * e.max());
        }
    }

    #[test]
    fn gram_cases() {
        assert_eq!(gram(&Matrix::identity(4, 4)), Matrix::identity(4, 4));
        // orthonormal columns
        let q = random(6, 3, 2).qr().q();
        let g = gram(&q);
        assert!(frobenius_norm(&(g - Matrix::identity(3, 3))) < 1e-12);

        let z = random(6, 3, 9);
        let g = gram(&z);
        for i in 0..3 {
            for j in 0..3 {
                let direct: f64 = (0..6).map(|k| z[(k, i)] * z[(k, j)]).sum();
                assert!((g[(i, j)] - direct).abs() < 1e-12);
            }
        }
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn gram_schmidt_cases() {
        let e1 = Vector::from_vec(vec![1.0, 0.0, 0.0]);
        let e2 = Vector::from_vec(vec![0.0, 1.0, 0.0]);
        let v = gram_schmidt(&[e1.clone(), e2.clone()], 1e-12).unwrap();
        assert_eq!(v.column(0).into_owned(), e1);
        assert_eq!(v.column(1).into_owned(), e2);

        let v = gram_schmidt(
            &[Vector::from_vec(vec![1.0, 1.0, 0.0]), Vector::from_vec(vec![1.0, 0.0, 0.0])],
            1e-12,
        )
        .unwrap();
        assert!(orthonormality_defect(&v) < 1e-10);

        let err = gram_schmidt(
            &[Vector::from_vec(vec![1.0, 0.0]), Vector::from_vec(vec![2.0, 0.0])],
            1e-12,
        );
        assert!(matches!(err, Err(DeqError::Degenerate(_))));
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(frobenius_norm(&Matrix::identity(4, 4)), 2.0);
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
        assert_eq!(frobenius_norm(&Matrix::from_row_slice(1, 2, &[3.0, 4.0])), 5.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn spectral_below_frobenius(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
                let a = random(rows, cols, seed);
                let s = spectral_norm(&a, 1e-12).unwrap();
                prop_assert!(s <= frobenius_norm(&a) * (1.0 + 1e-12));
            }

            #[test]
            fn gram_is_psd(rows in 1usize..12, cols in 1usize..10, seed in any::<u64>()) {
                let z = random(rows, cols, seed);
                let g = gram(&z);
                let top = spectral_norm(&g, 1e-12).unwrap();
                prop_assert!(min_eig_sym(&g, 1e-12).unwrap() >= -1e-10 * top.max(1e-300));
            }

            #[test]
            fn gram_schmidt_orthonormal(rows in 4usize..20, k in 1usize..4, seed in any::<u64>()) {
                let a = random(rows, k, seed);
                let cols: Vec<Vector> = a.column_iter().map(|c| c.into_owned()).collect();
                let v = gram_schmidt(&cols, 1e-12).unwrap();
                prop_assert!(orthonormality_defect(&v) <= 1e-9 * (k as f64).sqrt());
            }
        }
    }
}
