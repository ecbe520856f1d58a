//! Python bindings: models, pathwise Malliavin quantities, score estimation and reverse sampling.

use malliavin_score::malliavin::{
    covering_inner_product, malliavin_covariance, skorokhod_all, SkorokhodBreakdown, SkorokhodMode,
    SkorokhodOptions,
};
use malliavin_score::oracle::duality_report;
use malliavin_score::path::{sample_brownian, simulate_variations};
use malliavin_score::score::{
    analytic_score_linear, estimate_score, reverse_time_sample, AnalyticScore, Bandwidth, PipelineOptions,
    Regression, ScoreProvider, ScoreTable, ZeroScore,
};
use malliavin_score::{BuiltinModel, Error, SdeModel, TimeGrid, VariationTrajectory};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::collections::BTreeMap;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_)
        | Error::Contract(_)
        | Error::Dimension(_)
        | Error::InvalidGrid(_)
        | Error::NotAGridNode { .. }
        | Error::OutOfRange(_)
        | Error::NonFiniteInput(_)
        | Error::UnsupportedModel(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<SkorokhodMode> {
    match mode {
        "auto" => Ok(SkorokhodMode::Auto),
        "general" => Ok(SkorokhodMode::General),
        "state_independent" => Ok(SkorokhodMode::StateIndependent),
        "reference" => Ok(SkorokhodMode::Reference),
        other => Err(PyValueError::new_err(format!(
            "mode must be auto, general, state_independent or reference, not '{other}'"
        ))),
    }
}

type Rows = Vec<Vec<f64>>;

fn rows(flat: &[f64], width: usize) -> Rows {
    flat.chunks(width).map(<[f64]>::to_vec).collect()
}

/// A built-in SDE model, e.g. `Model("tanh", theta=1.0, alpha=0.5)`.
#[pyclass(name = "Model", module = "malliavin_py", frozen)]
struct PyModel(BuiltinModel);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (name, **params))]
    fn new(name: &str, params: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut map = BTreeMap::new();
        if let Some(params) = params {
            for (k, v) in params.iter() {
                map.insert(k.extract::<String>()?, v.extract::<f64>()?);
            }
        }
        BuiltinModel::from_name(name, &map).map(Self).map_err(py_err)
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.0.id()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    #[getter]
    fn noise_dim(&self) -> usize {
        self.0.noise_dim()
    }

    #[getter]
    fn params(&self) -> Vec<(String, f64)> {
        self.0.params()
    }

    #[getter]
    fn state_independent_diffusion(&self) -> bool {
        self.0.state_independent_diffusion()
    }

    fn drift(&self, t: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&x)?;
        let mut out = vec![0.0; self.0.state_dim()];
        self.0.drift(t, &x, &mut out);
        Ok(out)
    }

    /// Row-major `m × d` diffusion matrix.
    fn diffusion(&self, t: f64, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.check(&x)?;
        let d = self.0.noise_dim();
        let mut out = vec![0.0; self.0.state_dim() * d];
        self.0.diffusion(t, &x, &mut out);
        Ok(rows(&out, d))
    }

    fn __repr__(&self) -> String {
        let params: Vec<String> = self.0.params().iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("Model('{}', {})", self.0.id(), params.join(", "))
    }
}

impl PyModel {
    fn check(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.0.state_dim() {
            return Err(PyValueError::new_err(format!(
                "x has length {}, model expects {}",
                x.len(),
                self.0.state_dim()
            )));
        }
        Ok(())
    }
}

/// Uniform grid on `[0, horizon]` with `steps` steps.
#[pyclass(name = "Grid", module = "malliavin_py", frozen)]
struct PyGrid(TimeGrid);

#[pymethods]
impl PyGrid {
    #[new]
    fn new(horizon: f64, steps: usize) -> PyResult<Self> {
        TimeGrid::new(horizon, steps).map(Self).map_err(py_err)
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.0.horizon()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.0.dt()
    }

    fn time(&self, node: usize) -> f64 {
        self.0.time(node)
    }

    fn node_of(&self, t: f64) -> PyResult<usize> {
        self.0.node_of(t).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Grid(horizon={}, steps={})", self.0.horizon(), self.0.steps())
    }
}

fn breakdown_dict<'py>(py: Python<'py>, b: &SkorokhodBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("k", b.k)?;
    d.set_item("ito", b.ito)?;
    d.set_item("a", b.a)?;
    d.set_item("b", b.b)?;
    d.set_item("c", b.c)?;
    d.set_item("total", b.total)?;
    Ok(d)
}

/// One simulated path with its first and inverse first variation.
#[pyclass(name = "Trajectory", module = "malliavin_py", frozen)]
struct PyTrajectory(VariationTrajectory);

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    /// States at every node, one row per node.
    #[getter]
    fn states(&self) -> Vec<Vec<f64>> {
        (0..=self.0.steps()).map(|i| self.0.x(i).to_vec()).collect()
    }

    #[getter]
    fn terminal(&self) -> Vec<f64> {
        self.0.terminal().to_vec()
    }

    /// `max_i |Y_i Y_i⁻¹ − I|`.
    #[getter]
    fn inverse_drift(&self) -> f64 {
        self.0.inverse_drift()
    }

    fn first_variation(&self, node: usize) -> PyResult<Vec<Vec<f64>>> {
        self.node(node)?;
        Ok(rows(self.0.y(node), self.0.state_dim()))
    }

    fn inverse_variation(&self, node: usize) -> PyResult<Vec<Vec<f64>>> {
        self.node(node)?;
        Ok(rows(self.0.yinv(node), self.0.state_dim()))
    }

    /// `γ`, `γ⁻¹`, its condition number and the covering matrix `⟨DX^i, u_k⟩`.
    fn malliavin_covariance<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let bundle = malliavin_covariance(&self.0).map_err(py_err)?;
        let m = bundle.state_dim();
        let to_rows = |a: nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..a.nrows()).map(|r| a.row(r).iter().copied().collect()).collect()
        };
        let mut covering = vec![vec![0.0; m]; m];
        for (i, row) in covering.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = covering_inner_product(&self.0, &bundle, i, k).map_err(py_err)?;
            }
        }
        let d = PyDict::new(py);
        d.set_item("gamma", to_rows(bundle.gamma()))?;
        d.set_item("gamma_inv", to_rows(bundle.gamma_inv()))?;
        d.set_item("condition_number", bundle.condition_number())?;
        d.set_item("covering", covering)?;
        Ok(d)
    }

    /// Skorokhod integrals of all covering fields with their Itô, A, B and C parts.
    #[pyo3(signature = (mode = "auto"))]
    fn skorokhod<'py>(&self, py: Python<'py>, mode: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let opts = SkorokhodOptions {
            mode: parse_mode(mode)?,
            ..Default::default()
        };
        let bundle = malliavin_covariance(&self.0).map_err(py_err)?;
        let parts = skorokhod_all(&self.0, &bundle, opts).map_err(py_err)?;
        parts.iter().map(|b| breakdown_dict(py, b)).collect()
    }
}

impl PyTrajectory {
    fn node(&self, node: usize) -> PyResult<()> {
        if node > self.0.steps() {
            return Err(PyValueError::new_err(format!("node {node} > {}", self.0.steps())));
        }
        Ok(())
    }
}

/// Simulates path `path_index` of `seed` with Euler–Maruyama.
#[pyfunction]
#[pyo3(signature = (model, x0, grid, seed = 1, path_index = 0))]
fn simulate(model: &PyModel, x0: Vec<f64>, grid: &PyGrid, seed: u64, path_index: u64) -> PyResult<PyTrajectory> {
    let w = sample_brownian(&grid.0, model.0.noise_dim(), seed, path_index);
    simulate_variations(&model.0, &x0, &grid.0, &w)
        .map(PyTrajectory)
        .map_err(py_err)
}

/// Score estimates on a set of points at one time.
#[pyclass(name = "ScoreTable", module = "malliavin_py", frozen)]
struct PyScoreTable(ScoreTable);

#[pymethods]
impl PyScoreTable {
    #[getter]
    fn t(&self) -> f64 {
        self.0.t
    }

    #[getter]
    fn points(&self) -> Vec<Vec<f64>> {
        self.0.points.clone()
    }

    /// One row per point; flagged points are NaN.
    #[getter]
    fn score(&self) -> Vec<Vec<f64>> {
        self.0.entries.chunks(self.0.m).map(|r| r.iter().map(|e| e.score).collect()).collect()
    }

    #[getter]
    fn stderr(&self) -> Vec<Vec<f64>> {
        self.0.entries.chunks(self.0.m).map(|r| r.iter().map(|e| e.stderr).collect()).collect()
    }

    #[getter]
    fn n_eff(&self) -> Vec<f64> {
        self.0.entries.chunks(self.0.m).map(|r| r[0].n_eff).collect()
    }

    #[getter]
    fn flagged(&self) -> Vec<bool> {
        self.0.entries.chunks(self.0.m).map(|r| r.iter().any(|e| e.is_flagged())).collect()
    }

    #[getter]
    fn bandwidth(&self) -> Vec<f64> {
        self.0.bandwidth.clone()
    }

    #[getter]
    fn excluded(&self) -> usize {
        self.0.excluded
    }

    #[getter]
    fn valid_paths(&self) -> usize {
        self.0.valid_paths
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.0.write_csv(&mut buf).map_err(py_err)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Monte Carlo score `−E[δ(u) | X_t = y]` at each point.
///
/// `bandwidth=None` uses Silverman's rule; `knn=k` switches to a k-nearest-neighbour average.
#[pyfunction]
#[pyo3(signature = (model, x0, grid, n_paths, t, points, bandwidth = None, knn = None, seed = 1, mode = "auto", ridge = false))]
#[allow(clippy::too_many_arguments)]
fn score(
    py: Python<'_>,
    model: &PyModel,
    x0: Vec<f64>,
    grid: &PyGrid,
    n_paths: usize,
    t: f64,
    points: Vec<Vec<f64>>,
    bandwidth: Option<f64>,
    knn: Option<usize>,
    seed: u64,
    mode: &str,
    ridge: bool,
) -> PyResult<PyScoreTable> {
    let regression = match (knn, bandwidth) {
        (Some(_), Some(_)) => return Err(PyValueError::new_err("give bandwidth or knn, not both")),
        (Some(k), None) => Regression::NearestNeighbours(k),
        (None, Some(h)) => Regression::NadarayaWatson(Bandwidth::Fixed(h)),
        (None, None) => Regression::NadarayaWatson(Bandwidth::Auto),
    };
    let opts = PipelineOptions {
        skorokhod: SkorokhodOptions {
            mode: parse_mode(mode)?,
            ..Default::default()
        },
        ridge,
    };
    let (m, g) = (model.0.clone(), grid.0);
    py.detach(|| estimate_score(&m, &x0, &g, n_paths, t, &points, regression, seed, opts))
        .map(PyScoreTable)
        .map_err(py_err)
}

/// Closed-form score of a linear model at time `t`.
#[pyfunction]
fn analytic_score(model: &PyModel, t: f64, x0: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
    analytic_score_linear(&model.0, t, &x0, &y).map_err(py_err)
}

/// `E[X_T^i δ(u_k)]` and its standard error (expected: the identity).
#[pyfunction]
#[pyo3(signature = (model, x0, grid, n_paths, seed = 1))]
fn duality<'py>(
    py: Python<'py>,
    model: &PyModel,
    x0: Vec<f64>,
    grid: &PyGrid,
    n_paths: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let (m, g) = (model.0.clone(), grid.0);
    let report = py
        .detach(|| duality_report(&m, &x0, &g, n_paths, seed, PipelineOptions::default()))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("mean", rows(&report.mean, report.m))?;
    d.set_item("stderr", rows(&report.stderr, report.m))?;
    d.set_item("max_z", report.max_z())?;
    d.set_item("valid", report.valid)?;
    d.set_item("excluded", report.excluded)?;
    Ok(d)
}

/// Calls `f(t, y) -> list[float]` for the score.
struct CallableScore(Py<PyAny>);

impl ScoreProvider for CallableScore {
    fn score(&self, node: usize, t: f64, y: &[f64], out: &mut [f64]) -> malliavin_score::Result<()> {
        Python::attach(|py| {
            let value: Vec<f64> = self
                .0
                .call1(py, (t, y.to_vec()))
                .and_then(|v| v.extract(py))
                .map_err(|e| Error::Contract(format!("score callback at node {node}: {e}")))?;
            if value.len() != out.len() {
                return Err(Error::Dimension(format!(
                    "score callback returned {} values, expected {}",
                    value.len(),
                    out.len()
                )));
            }
            out.copy_from_slice(&value);
            Ok(())
        })
    }
}

/// Runs the reverse-time SDE from fresh forward samples at `T` back to `t = 0`.
///
/// `score` is `"analytic"` (linear models), `"zero"`, or a callable `f(t, y) -> list`.
/// Returns `(initial, terminal)`: the starting draws at `T` and the samples at `0`.
#[pyfunction]
#[pyo3(signature = (model, x0, grid, n_samples, score = None, seed = 1))]
fn reverse_sample(
    py: Python<'_>,
    model: &PyModel,
    x0: Vec<f64>,
    grid: &PyGrid,
    n_samples: usize,
    score: Option<Bound<'_, PyAny>>,
    seed: u64,
) -> PyResult<(Rows, Rows)> {
    let provider: Box<dyn ScoreProvider> = match score {
        None => Box::new(AnalyticScore {
            model: model.0.clone(),
            x0: x0.clone(),
        }),
        Some(s) if s.is_callable() => Box::new(CallableScore(s.unbind())),
        Some(s) => match s.extract::<String>()?.as_str() {
            "analytic" => Box::new(AnalyticScore {
                model: model.0.clone(),
                x0: x0.clone(),
            }),
            "zero" => Box::new(ZeroScore),
            other => return Err(PyValueError::new_err(format!("unknown score source '{other}'"))),
        },
    };
    let (m, g) = (model.0.clone(), grid.0);
    let samples = py
        .detach(|| reverse_time_sample(&m, provider.as_ref(), &x0, &g, n_samples, seed))
        .map_err(py_err)?;
    Ok((rows(&samples.initial, samples.m), rows(&samples.terminal, samples.m)))
}

#[pymodule]
fn malliavin_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyScoreTable>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_score, m)?)?;
    m.add_function(wrap_pyfunction!(duality, m)?)?;
    m.add_function(wrap_pyfunction!(reverse_sample, m)?)?;
    Ok(())
}
