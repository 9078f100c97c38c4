//! Python bindings. Matrices cross the boundary as lists of rows.

use deq_core::condition;
use deq_core::data;
use deq_core::grad;
use deq_core::kernel;
use deq_core::linalg;
use deq_core::model::{self, Checkpoint, SolverConfig};
use deq_core::train::{self, Eta, TrainConfig};
use deq_core::{DeqError, Matrix, Vector};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(deq_py, DeqException, PyException, "Raised for any library failure.");

fn err(e: DeqError) -> PyErr {
    DeqException::new_err(e.to_string())
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix, DeqError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(DeqError::Input("ragged matrix rows".into()));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn solver(tol: f64, max_iter: usize) -> SolverConfig {
    SolverConfig { tol, max_iter }
}

#[pyclass(name = "Dataset", module = "deq_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset(data::Dataset);

#[pymethods]
impl PyDataset {
    /// Points drawn uniformly on the sphere of radius sqrt(d), labels in [-1, 1].
    #[staticmethod]
    fn synthetic(n: usize, d: usize, seed: u64) -> PyResult<Self> {
        data::gen_sphere_data(n, d, seed).map(Self).map_err(err)
    }

    /// `x` is d rows by n columns, one column per point.
    #[new]
    fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Self> {
        let x = from_rows(&x).map_err(err)?;
        data::Dataset::new(x, Vector::from_vec(y), data::Provenance::File).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_csv(x_path: &str, y_path: &str) -> PyResult<Self> {
        data::load_dataset_csv(x_path, y_path).map(Self).map_err(err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        to_rows(self.0.x())
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.0.y().iter().copied().collect()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, d={}, provenance={})", self.0.n(), self.0.d(), self.0.provenance().as_str())
    }
}

#[pyclass(name = "DeqParams", module = "deq_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyParams(model::DeqParams);

#[pymethods]
impl PyParams {
    #[staticmethod]
    fn init(m: usize, d: usize, sigma_w2: f64, seed: u64) -> PyResult<Self> {
        model::init_params(m, d, sigma_w2, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Checkpoint::load(path).map(|c| Self(c.params)).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::bare(self.0.clone()).save(path).map_err(err)
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    #[getter]
    fn sigma_w2(&self) -> f64 {
        self.0.sigma_w2
    }

    #[getter]
    fn w(&self) -> Vec<Vec<f64>> {
        to_rows(&self.0.w)
    }

    #[getter]
    fn u(&self) -> Vec<Vec<f64>> {
        to_rows(&self.0.u)
    }

    #[getter]
    fn a(&self) -> Vec<f64> {
        self.0.a.iter().copied().collect()
    }

    fn spectral_norm(&self) -> PyResult<f64> {
        linalg::spectral_norm(&self.0.w, linalg::SPECTRAL_TOL).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("DeqParams(m={}, d={}, sigma_w2={})", self.0.m(), self.0.d(), self.0.sigma_w2)
    }
}

/// Equilibrium `Z` with its residual and iteration count.
#[pyfunction]
#[pyo3(signature = (params, dataset, tol = 1e-10, max_iter = 10000))]
fn solve_equilibrium<'py>(py: Python<'py>, params: &PyParams, dataset: &PyDataset, tol: f64, max_iter: usize) -> PyResult<Bound<'py, PyDict>> {
    let sol = model::solve_equilibrium(&params.0, dataset.0.x(), &solver(tol, max_iter)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("z", to_rows(&sol.z))?;
    out.set_item("residual", sol.residual)?;
    out.set_item("iterations", sol.iterations)?;
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (params, dataset, tol = 1e-10))]
fn loss(params: &PyParams, dataset: &PyDataset, tol: f64) -> PyResult<f64> {
    let z = model::solve_equilibrium(&params.0, dataset.0.x(), &solver(tol, 10_000)).map_err(err)?.z;
    model::loss(&model::predict(&params.0, &z).map_err(err)?, dataset.0.y()).map_err(err)
}

/// Gradients of the loss with respect to `W`, `U` and `a`.
#[pyfunction]
#[pyo3(signature = (params, dataset, tol = 1e-10))]
fn gradients<'py>(py: Python<'py>, params: &PyParams, dataset: &PyDataset, tol: f64) -> PyResult<Bound<'py, PyDict>> {
    let cfg = solver(tol, 10_000);
    let z = model::solve_equilibrium(&params.0, dataset.0.x(), &cfg).map_err(err)?.z;
    let g = grad::gradients(&params.0, &z, dataset.0.x(), dataset.0.y(), &cfg).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("w", to_rows(&g.gw))?;
    out.set_item("u", to_rows(&g.gu))?;
    out.set_item("a", g.ga.iter().copied().collect::<Vec<_>>())?;
    Ok(out)
}

/// Population kernel at a finite depth, or at infinite depth when `depth` is None.
#[pyfunction]
#[pyo3(signature = (dataset, sigma_w2, depth = None))]
fn population_kernel<'py>(py: Python<'py>, dataset: &PyDataset, sigma_w2: f64, depth: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let k = match depth {
        Some(l) => kernel::kernel_recursion(dataset.0.x(), sigma_w2, l),
        None => kernel::kernel_fixed_point(dataset.0.x(), sigma_w2, kernel::FIXED_POINT_TOL),
    }
    .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("k", to_rows(&k.k))?;
    out.set_item("lambda_star", k.lambda_star)?;
    Ok(out)
}

/// Evaluates the initialization condition at `params`.
#[pyfunction]
#[pyo3(signature = (params, dataset, delta = None, tol = 1e-10))]
fn check_condition<'py>(py: Python<'py>, params: &PyParams, dataset: &PyDataset, delta: Option<f64>, tol: f64) -> PyResult<Bound<'py, PyDict>> {
    let p = &params.0;
    let b = condition::init_bounds(p, delta).map_err(err)?;
    let z = model::solve_equilibrium(p, dataset.0.x(), &solver(tol, 10_000)).map_err(err)?.z;
    let lambda_0 = linalg::min_eig_sym(&linalg::gram(&z), 1e-12).map_err(err)?;
    let residual = (model::predict(p, &z).map_err(err)? - dataset.0.y()).norm();
    let rep = condition::check_condition(&b, lambda_0.max(0.0), dataset.0.x(), residual).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("lambda_0", rep.lambda_0)?;
    out.set_item("margins", rep.margins.to_vec())?;
    out.set_item("satisfied", rep.satisfied.to_vec())?;
    out.set_item("eta_max", rep.eta_max)?;
    out.set_item("delta", b.delta)?;
    Ok(out)
}

/// Runs gradient descent; returns the trained parameters and one dict per monitored step.
#[pyfunction]
#[pyo3(signature = (params, dataset, steps, eta = None))]
fn train_model<'py>(py: Python<'py>, params: &PyParams, dataset: &PyDataset, steps: usize, eta: Option<f64>) -> PyResult<(PyParams, Vec<Bound<'py, PyDict>>)> {
    let cfg = TrainConfig {
        eta: eta.map_or(Eta::Auto, Eta::Fixed),
        steps,
        ..TrainConfig::default()
    };
    let (p, trace) = train::train(&params.0, &dataset.0, &cfg).map_err(err)?;
    let mut records = Vec::with_capacity(trace.records.len());
    for r in &trace.records {
        let d = PyDict::new(py);
        d.set_item("step", r.step)?;
        d.set_item("loss", r.loss)?;
        d.set_item("w_spec_norm", r.w_spec_norm)?;
        d.set_item("lambda_tau", r.lambda_tau)?;
        d.set_item("grad_norm_sq", r.grad_norm_sq)?;
        d.set_item("rate_envelope", r.rate_envelope)?;
        records.push(d);
    }
    Ok((PyParams(p), records))
}

#[pymodule]
fn deq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyParams>()?;
    m.add("DeqException", m.py().get_type::<DeqException>())?;
    m.add_function(wrap_pyfunction!(solve_equilibrium, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradients, m)?)?;
    m.add_function(wrap_pyfunction!(population_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(check_condition, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let m = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let rows = to_rows(&m);
        assert_eq!(rows, vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]]);
        assert_eq!(from_rows(&rows).unwrap(), m);
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
