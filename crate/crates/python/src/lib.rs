//! Python bindings: scalar fields, preset systems, Melnikov evaluation,
//! root isolation, simulation and the scenario runner.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use melnikov::bifurcation::{count_cycles, eval_poly, isolate_roots, CycleSearch};
use melnikov::cli::{run, Command, Scenario};
use melnikov::field::Partial;
use melnikov::melnikov::{boundary_m1, boundary_m2, m1, m2, sweep, SweepKind};
use melnikov::presets::{self, QuadraticFamily};
use melnikov::simulator::{difference_map, verify_limit_cycle, SimOptions};
use melnikov::{Expression, PiecewiseSystem, ScalarField};

fn runtime<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn partial_by_name(name: &str) -> PyResult<Partial> {
    Ok(match name {
        "x" => Partial::X,
        "y" => Partial::Y,
        "xx" => Partial::XX,
        "xy" => Partial::XY,
        "yy" => Partial::YY,
        "xxx" => Partial::XXX,
        "xxy" => Partial::XXY,
        "xyy" => Partial::XYY,
        "yyy" => Partial::YYY,
        _ => return Err(PyValueError::new_err(format!("unknown partial {name:?}"))),
    })
}

/// Scalar field H(x, y) parsed from an expression string.
#[pyclass(name = "Field", frozen)]
struct PyField {
    inner: ScalarField,
}

#[pymethods]
impl PyField {
    #[new]
    fn new(src: &str) -> PyResult<Self> {
        Ok(PyField { inner: ScalarField::parse(src).map_err(value)? })
    }

    fn __call__(&self, x: f64, y: f64) -> f64 {
        self.inner.evaluate(x, y)
    }

    /// Partial derivative by name: "x", "y", "xx", "xy", ..., "yyy".
    fn partial(&self, which: &str, x: f64, y: f64) -> PyResult<f64> {
        Ok(self.inner.partial(partial_by_name(which)?, x, y))
    }

    fn derivative_expr(&self, which: &str) -> PyResult<String> {
        Ok(self.inner.partial_expr(partial_by_name(which)?).to_string())
    }

    fn __repr__(&self) -> String {
        format!("Field({:?})", self.inner.to_string())
    }
}

/// Two-zone system built from one of the presets.
#[pyclass(name = "System", frozen)]
struct PySystem {
    inner: PiecewiseSystem,
}

fn sample_dict<'py>(py: Python<'py>, r: f64, m1: f64, m2: Option<f64>, sigma: f64, lambda: f64, comps: &BTreeMap<String, f64>) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("r", r)?;
    d.set_item("M1", m1)?;
    d.set_item("M2", m2)?;
    d.set_item("sigma", sigma)?;
    d.set_item("lambda", lambda)?;
    d.set_item("components", comps.clone())?;
    Ok(d)
}

#[pymethods]
impl PySystem {
    /// Center-center pair with quadratic coefficients given by name (a..N).
    #[staticmethod]
    #[pyo3(signature = (coefficients = None))]
    fn center_center(coefficients: Option<BTreeMap<String, f64>>) -> PyResult<Self> {
        let mut q = QuadraticFamily::default();
        for (k, v) in coefficients.unwrap_or_default() {
            q.set(&k, v).ok_or_else(|| PyValueError::new_err(format!("unknown coefficient {k:?}")))?;
        }
        Ok(PySystem { inner: presets::center_center(&q) })
    }

    #[staticmethod]
    #[pyo3(signature = (f, epsilon = 0.01))]
    fn center_center_boundary(f: &str, epsilon: f64) -> PyResult<Self> {
        Ok(PySystem { inner: presets::center_center_boundary(ScalarField::parse(f).map_err(value)?, epsilon) })
    }

    #[staticmethod]
    #[pyo3(signature = (a = 7.0, f = "sin(x)", epsilon = 0.01))]
    fn saddle_center(a: f64, f: &str, epsilon: f64) -> PyResult<Self> {
        let e: Expression = f.parse().map_err(value)?;
        Ok(PySystem { inner: presets::saddle_center(a, &e, epsilon) })
    }

    #[staticmethod]
    #[pyo3(signature = (f = "sin(x)", epsilon = 0.01))]
    fn smooth_circle(f: &str, epsilon: f64) -> PyResult<Self> {
        Ok(PySystem { inner: presets::smooth_circle(ScalarField::parse(f).map_err(value)?, epsilon) })
    }

    #[getter]
    fn window(&self) -> (f64, f64) {
        (self.inner.annulus.r_min, self.inner.annulus.r_max)
    }

    #[getter]
    fn reversed(&self) -> bool {
        self.inner.reversed
    }

    fn m1<'py>(&self, py: Python<'py>, r: f64) -> PyResult<Bound<'py, PyDict>> {
        let s = m1(&self.inner, r).map_err(runtime)?;
        sample_dict(py, s.r, s.m1, s.m2, s.sigma, s.lambda, &s.components)
    }

    fn m2<'py>(&self, py: Python<'py>, r: f64) -> PyResult<Bound<'py, PyDict>> {
        let s = m2(&self.inner, r).map_err(runtime)?;
        sample_dict(py, s.r, s.m1, s.m2, s.sigma, s.lambda, &s.components)
    }

    fn boundary_m1(&self, r: f64) -> PyResult<f64> {
        Ok(boundary_m1(&self.inner, r).map_err(runtime)?.value)
    }

    fn boundary_m2(&self, r: f64) -> PyResult<f64> {
        Ok(boundary_m2(&self.inner, r).map_err(runtime)?.value)
    }

    /// Sweep over `n` evenly spaced levels of the window.
    #[pyo3(signature = (n = 32, boundary = None))]
    fn sweep<'py>(&self, py: Python<'py>, n: usize, boundary: Option<bool>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let kind = if boundary.unwrap_or(self.inner.boundary.is_some()) { SweepKind::Boundary } else { SweepKind::General };
        let rows = py.detach(|| sweep(&self.inner, kind, &self.inner.annulus.grid(n))).map_err(runtime)?;
        rows.iter()
            .map(|row| {
                let d = sample_dict(py, row.r, row.m1, row.m2, row.sigma, row.lambda, &row.components)?;
                d.set_item("valid_m2", row.valid_m2)?;
                Ok(d)
            })
            .collect()
    }

    /// Difference map H⁺(Q) − H⁺(P) with the four-part split.
    fn difference_map<'py>(&self, py: Python<'py>, r: f64, epsilon: f64) -> PyResult<Bound<'py, PyDict>> {
        let d = py.detach(|| difference_map(&self.inner, r, epsilon, &SimOptions::default())).map_err(runtime)?;
        let out = PyDict::new(py);
        out.set_item("value", d.value)?;
        out.set_item("l_parts", d.l_parts.to_vec())?;
        out.set_item("p", d.p)?;
        out.set_item("p2", d.p2)?;
        out.set_item("q", d.q)?;
        Ok(out)
    }

    fn verify_limit_cycle<'py>(&self, py: Python<'py>, r_star: f64, epsilon: f64) -> PyResult<Bound<'py, PyDict>> {
        let v = py.detach(|| verify_limit_cycle(&self.inner, r_star, epsilon, &SimOptions::default())).map_err(runtime)?;
        let out = PyDict::new(py);
        out.set_item("found", v.found)?;
        out.set_item("fixed_point", v.fixed_point)?;
        out.set_item("return_map_derivative", v.return_map_derivative)?;
        out.set_item("stable", v.stable)?;
        Ok(out)
    }

    /// Zeros of the boundary M1 with stability, optionally simulated at `verify_epsilon`.
    #[pyo3(signature = (verify_epsilon = None))]
    fn count_cycles<'py>(&self, py: Python<'py>, verify_epsilon: Option<f64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let w = self.inner.annulus;
        let mut search = CycleSearch::new((w.r_min, w.r_max));
        search.verify_epsilon = verify_epsilon;
        let reports = py.detach(|| count_cycles(&self.inner, &search)).map_err(runtime)?;
        reports
            .iter()
            .map(|rep| {
                let rec = rep.record();
                let d = PyDict::new(py);
                d.set_item("r_star", rec.r_star)?;
                d.set_item("multiplicity", rec.multiplicity)?;
                d.set_item("stable", rec.stable)?;
                d.set_item("criterion_value", rec.criterion_value)?;
                d.set_item("verified", rec.verified)?;
                Ok(d)
            })
            .collect()
    }
}

/// Real zeros of `Σ c_k x^k` on `(lo, hi)`.
#[pyfunction]
#[pyo3(signature = (coefficients, lo, hi, grid = 256))]
fn polynomial_roots(coefficients: Vec<f64>, lo: f64, hi: f64, grid: usize) -> Vec<f64> {
    isolate_roots(|x| eval_poly(&coefficients, x), (lo, hi), grid, 1).into_iter().map(|r| r.r_star).collect()
}

/// Run a CLI command on a TOML scenario; returns {artifact name: contents}.
#[pyfunction]
fn run_scenario(command: &str, scenario: &str) -> PyResult<BTreeMap<String, String>> {
    let cmd: Command = command.parse().map_err(value)?;
    let s = Scenario::parse(scenario).map_err(value)?;
    let artifacts = run(cmd, &s).map_err(runtime)?;
    Ok(artifacts.into_iter().map(|a| (a.name, a.contents)).collect())
}

#[pymodule]
fn melnikov_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyField>()?;
    m.add_class::<PySystem>()?;
    m.add_function(wrap_pyfunction!(polynomial_roots, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
