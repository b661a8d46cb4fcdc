//! Python bindings for the `drmpc` crate.
//!
//! Structured results come back as plain dicts and lists. Modes are 1-based,
//! as in the CLI.

use drmpc::cli::{cmd_solve_once, CliConfig};
use drmpc::markov::{self, AmbiguitySet, TransitionEstimate};
use drmpc::mjls::{self, build_acc_model};
use drmpc::polyhedra::{self, LinearOptimum};
use drmpc::risk;
use drmpc::safety::{self, rci_iterate, rpi_candidate};
use drmpc::simulator::{empirical_cdf, run_batch};
use drmpc::Error;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn err(e: Error) -> PyErr {
    match e {
        Error::Solver(_) | Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<PyObject> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any().unbind(),
            (None, Some(f)) => f.into_pyobject(py)?.into_any().unbind(),
            _ => py.None(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn json_to_py(py: Python<'_>, v: &impl serde::Serialize) -> PyResult<PyObject> {
    let value = serde_json::to_value(v).map_err(|e| err(e.into()))?;
    to_py(py, &value)
}

/// Physical and controller parameters of the ACC model.
#[pyclass(name = "AccParams", module = "drmpc_py")]
#[derive(Clone)]
pub struct PyAccParams {
    inner: mjls::AccParams,
}

#[pymethods]
impl PyAccParams {
    #[new]
    #[pyo3(signature = (c, ts=0.5, a_min=-4.0, a_max=5.0, v_max=40.0, v_ref=30.0, q=5.0, r=10.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(c: Vec<f64>, ts: f64, a_min: f64, a_max: f64, v_max: f64, v_ref: f64, q: f64, r: f64) -> PyResult<Self> {
        let inner = mjls::AccParams { ts, c, a_min, a_max, v_max, v_ref, q, r };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn c(&self) -> Vec<f64> {
        self.inner.c.clone()
    }

    #[getter]
    fn c_min(&self) -> f64 {
        self.inner.c_min()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<PyObject> {
        json_to_py(py, &self.inner)
    }

    /// Successor state `(h, v_e, v_t)` for input `u` and 1-based mode `w`.
    fn step(&self, x: Vec<f64>, u: f64, w: usize) -> PyResult<Vec<f64>> {
        let model = build_acc_model(&self.inner).map_err(err)?;
        let w = w.checked_sub(1).ok_or_else(|| PyValueError::new_err("modes are 1-based"))?;
        let next = model
            .step(&DVector::from_vec(x), &DVector::from_element(1, u), w)
            .map_err(err)?;
        Ok(next.iter().copied().collect())
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// H-polyhedron `{x : G x ≤ h}`.
#[pyclass(name = "Polyhedron", module = "drmpc_py")]
#[derive(Clone)]
pub struct PyPolyhedron {
    inner: polyhedra::Polyhedron,
}

#[pymethods]
impl PyPolyhedron {
    #[new]
    fn new(g: Vec<Vec<f64>>, h: Vec<f64>) -> PyResult<Self> {
        let dim = g.first().map_or(0, |r| r.len());
        let rows: Vec<(Vec<f64>, f64)> = g.into_iter().zip(h).collect();
        Ok(Self { inner: polyhedra::Polyhedron::from_rows(dim, &rows).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: polyhedra::Polyhedron::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_rows(&self) -> usize {
        self.inner.num_rows()
    }

    #[pyo3(signature = (x, tol=1e-9))]
    fn contains(&self, x: Vec<f64>, tol: f64) -> PyResult<bool> {
        self.inner.contains(&DVector::from_vec(x), tol).map_err(err)
    }

    fn intersect(&self, other: &PyPolyhedron) -> PyResult<Self> {
        Ok(Self { inner: self.inner.intersect(&other.inner).map_err(err)? })
    }

    fn eliminate(&self, j: usize) -> PyResult<Self> {
        let p = self.inner.eliminate_variable(j).map_err(err)?;
        Ok(Self { inner: p.remove_redundancy(polyhedra::DEFAULT_TOL).map_err(err)? })
    }

    fn is_empty(&self) -> PyResult<bool> {
        self.inner.is_empty().map_err(err)
    }

    #[pyo3(signature = (other, tol=1e-9))]
    fn is_subset(&self, other: &PyPolyhedron, tol: f64) -> PyResult<bool> {
        self.inner.is_subset(&other.inner, tol).map_err(err)
    }

    /// `(value, argmin)`; `(inf, None)` if empty, `(-inf, None)` if unbounded.
    fn minimize(&self, c: Vec<f64>) -> PyResult<(f64, Option<Vec<f64>>)> {
        Ok(match self.inner.minimize_linear(&DVector::from_vec(c)).map_err(err)? {
            LinearOptimum::Optimal { value, argmin } => (value, Some(argmin.iter().copied().collect())),
            LinearOptimum::Empty => (f64::INFINITY, None),
            LinearOptimum::Unbounded => (f64::NEG_INFINITY, None),
        })
    }

    fn h_min(&self, v_e: f64, v_t: f64) -> PyResult<f64> {
        safety::h_min(&self.inner, v_e, v_t).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Polyhedron(dim={}, rows={})", self.inner.dim(), self.inner.num_rows())
    }
}

#[pyfunction]
fn radius(alpha: f64, d: usize, n: u64) -> PyResult<f64> {
    markov::radius(alpha, d, n).map_err(err)
}

/// Transition counts and empirical rows from a 1-based mode sequence.
#[pyfunction]
fn estimate(py: Python<'_>, sample: Vec<usize>, d: usize) -> PyResult<PyObject> {
    let seq = sample
        .iter()
        .map(|&w| w.checked_sub(1).filter(|&w| w < d).ok_or_else(|| PyValueError::new_err(format!("mode {w} outside 1..={d}"))))
        .collect::<PyResult<Vec<usize>>>()?;
    let est = TransitionEstimate::estimate(&seq, d).map_err(err)?;
    json_to_py(py, &est)
}

#[pyfunction]
fn avar(z: Vec<f64>, p: Vec<f64>, delta: f64) -> PyResult<f64> {
    risk::avar_value(&z, &p, delta).map_err(err)
}

/// Robust AVaR over the ℓ1 ball of radius `r` around `center`.
#[pyfunction]
fn robust_avar(z: Vec<f64>, center: Vec<f64>, r: f64, delta: f64) -> PyResult<f64> {
    let amb = AmbiguitySet::l1_ball(center, r).map_err(err)?;
    risk::robust_avar_value(&z, &amb, delta).map_err(err)
}

#[pyfunction]
fn rss_distance(params: &PyAccParams, v_e: f64, v_t: f64) -> PyResult<f64> {
    safety::rss_distance(&params.inner, v_e, v_t).map_err(err)
}

#[pyfunction]
fn rpi_set(params: &PyAccParams) -> PyResult<PyPolyhedron> {
    Ok(PyPolyhedron { inner: rpi_candidate(&params.inner).map_err(err)? })
}

/// RCI iteration from the braking candidate. Returns a dict with
/// `converged`, `iterations` and `iterates` (list of Polyhedron).
#[pyfunction]
#[pyo3(signature = (params, max_iter=safety::RCI_MAX_ITER, tol=safety::RCI_TOL))]
fn invariant_set(py: Python<'_>, params: &PyAccParams, max_iter: usize, tol: f64) -> PyResult<PyObject> {
    let model = build_acc_model(&params.inner).map_err(err)?;
    let r0 = rpi_candidate(&params.inner).map_err(err)?;
    let rci = rci_iterate(&model, &model.state_set, &model.soft.as_polyhedron(), &r0, max_iter, tol).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("converged", rci.converged)?;
    out.set_item("iterations", rci.iterations)?;
    let iterates = PyList::empty(py);
    for r in rci.iterates {
        iterates.append(Py::new(py, PyPolyhedron { inner: r })?)?;
    }
    out.set_item("iterates", iterates)?;
    Ok(out.into_any().unbind())
}

/// Solves one OCP for a CLI-style JSON config; `w0` is 1-based.
#[pyfunction]
#[pyo3(signature = (config, x0=None, w0=None))]
fn solve_once(py: Python<'_>, config: &str, x0: Option<Vec<f64>>, w0: Option<usize>) -> PyResult<PyObject> {
    let cfg = CliConfig::from_json(config).map_err(err)?;
    let report = cmd_solve_once(&cfg, x0, w0, None).map_err(err)?;
    json_to_py(py, &report)
}

/// Closed-loop batch for a CLI-style JSON config. Returns `summary`,
/// per-realization `costs` (None when truncated) and the `ecdf` points.
#[pyfunction]
fn simulate(py: Python<'_>, config: &str) -> PyResult<PyObject> {
    let cfg = CliConfig::from_json(config).map_err(err)?;
    let exp = cfg.experiment().map_err(err)?;
    let (results, summary) = py.allow_threads(|| run_batch(&exp)).map_err(err)?;
    let costs: Vec<Option<f64>> = results
        .iter()
        .map(|r| (r.infeasible_at.is_none() && r.solver_failure_at.is_none()).then_some(r.closed_loop_cost))
        .collect();
    let done: Vec<f64> = costs.iter().flatten().copied().collect();
    let ecdf = if done.is_empty() { Vec::new() } else { empirical_cdf(&done).map_err(err)? };
    let out = PyDict::new(py);
    out.set_item("summary", json_to_py(py, &summary)?)?;
    out.set_item("costs", costs)?;
    out.set_item("ecdf", ecdf)?;
    Ok(out.into_any().unbind())
}

/// Matrix helper for callers that want `G` and `h` back.
#[pyfunction]
fn polyhedron_rows(p: &PyPolyhedron) -> (Vec<Vec<f64>>, Vec<f64>) {
    let g: &DMatrix<f64> = p.inner.g();
    let rows = (0..g.nrows()).map(|i| g.row(i).iter().copied().collect()).collect();
    (rows, p.inner.h().iter().copied().collect())
}

#[pymodule]
fn drmpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAccParams>()?;
    m.add_class::<PyPolyhedron>()?;
    m.add_function(wrap_pyfunction!(radius, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(avar, m)?)?;
    m.add_function(wrap_pyfunction!(robust_avar, m)?)?;
    m.add_function(wrap_pyfunction!(rss_distance, m)?)?;
    m.add_function(wrap_pyfunction!(rpi_set, m)?)?;
    m.add_function(wrap_pyfunction!(invariant_set, m)?)?;
    m.add_function(wrap_pyfunction!(solve_once, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(polyhedron_rows, m)?)?;
    Ok(())
}
