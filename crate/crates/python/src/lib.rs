//! Python bindings for the heatprompt pipeline.
//!
//! Structured results (metrics, reports, captions) come back as plain
//! dicts; trained models are wrapped as classes.

use heatprompt::config::RunConfig;
use heatprompt::geometry::{self, Crs, GeoMultiPolygon, Point, Polygon};
use heatprompt::models::{self, MlpHyperParams};
use heatprompt::pipeline::{self, StageSummary};
use heatprompt::semantics::{self, HashingEmbedder};
use heatprompt::synthetic::{self, WorldParams};
use heatprompt::{buildings, eval};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;
use std::path::PathBuf;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Round-trips through JSON so nested structs become dicts and lists.
fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn ring(points: Vec<(f64, f64)>) -> Vec<Point> {
    geometry::closed_ring(&points)
}

fn polygon(exterior: Vec<(f64, f64)>, holes: Option<Vec<Vec<(f64, f64)>>>) -> PyResult<GeoMultiPolygon> {
    let holes = holes.unwrap_or_default().into_iter().map(ring).collect();
    GeoMultiPolygon::new(Crs::WebMercator, vec![Polygon::new(ring(exterior), holes)]).map_err(value_err)
}

/// `(lon, lat)` in degrees to Web Mercator `(x, y)` in meters.
#[pyfunction]
fn to_mercator(lon: f64, lat: f64) -> PyResult<(f64, f64)> {
    geometry::reproject_to_mercator(lon, lat).map_err(value_err)
}

#[pyfunction]
fn to_wgs84(x: f64, y: f64) -> PyResult<(f64, f64)> {
    geometry::mercator_to_wgs84(x, y).map_err(value_err)
}

/// Area, perimeter, centroid and bbox of a Mercator polygon.
#[pyfunction]
#[pyo3(signature = (exterior, holes=None))]
fn polygon_metrics<'py>(
    py: Python<'py>,
    exterior: Vec<(f64, f64)>,
    holes: Option<Vec<Vec<(f64, f64)>>>,
) -> PyResult<Bound<'py, PyAny>> {
    let m = geometry::polygon_metrics(&polygon(exterior, holes)?).map_err(value_err)?;
    to_py(py, &m)
}

/// Square sampling window as `(center_x, center_y, side_m)`.
#[pyfunction]
#[pyo3(signature = (exterior, holes=None))]
fn sampling_window(exterior: Vec<(f64, f64)>, holes: Option<Vec<Vec<(f64, f64)>>>) -> PyResult<(f64, f64, f64)> {
    let w = geometry::sampling_window(&polygon(exterior, holes)?).map_err(value_err)?;
    Ok((w.center.x, w.center.y, w.side_m))
}

#[pyfunction]
#[pyo3(signature = (footprint_area_m2, height_m, floor_height_m=buildings::DEFAULT_FLOOR_HEIGHT_M))]
fn floor_area(footprint_area_m2: f64, height_m: f64, floor_height_m: f64) -> f64 {
    buildings::floor_area(footprint_area_m2, height_m, floor_height_m)
}

#[pyfunction]
fn r_squared(y: Vec<f64>, pred: Vec<f64>) -> PyResult<f64> {
    eval::r_squared(&y, &pred).map_err(value_err)
}

#[pyfunction]
fn mae(y: Vec<f64>, pred: Vec<f64>) -> PyResult<f64> {
    eval::mae(&y, &pred).map_err(value_err)
}

/// Percent change of R² against a reference, one decimal; `None` when the
/// reference is not positive.
#[pyfunction]
fn uplift_percent(r2_ref: f64, r2_model: f64) -> Option<f64> {
    eval::uplift_percent(r2_ref, r2_model)
}

/// Paired t-test on absolute errors. Returns `{n, mean_diff, t, p_two_sided, degenerate}`.
#[pyfunction]
fn paired_t_test<'py>(py: Python<'py>, errors_a: Vec<f64>, errors_b: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let t = eval::paired_t_abs_errors(&errors_a, &errors_b).map_err(value_err)?;
    to_py(py, &t)
}

#[pyfunction]
fn quintile_strata(y: Vec<f64>) -> PyResult<Vec<usize>> {
    eval::quintile_strata(&y).map_err(value_err)
}

/// Fold index of every sample.
#[pyfunction]
#[pyo3(signature = (labels, k=eval::DEFAULT_FOLDS, seed=0))]
fn stratified_kfold(labels: Vec<usize>, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    Ok(eval::stratified_kfold(&labels, k, seed).map_err(value_err)?.folds)
}

#[pyclass(name = "LinearModel", frozen)]
struct PyLinearModel(models::LinearModel);

#[pymethods]
impl PyLinearModel {
    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.0.weights.clone()
    }

    #[getter]
    fn bias(&self) -> f64 {
        self.0.bias
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.0.predict(&x).map_err(value_err)
    }

    fn mse(&self, x: Vec<Vec<f64>>, y: Vec<f64>) -> f64 {
        self.0.mse(&x, &y)
    }

    fn __repr__(&self) -> String {
        format!("LinearModel(dims={}, bias={})", self.0.weights.len(), self.0.bias)
    }
}

/// Ordinary least squares with an intercept.
#[pyfunction]
fn fit_linear(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<PyLinearModel> {
    models::fit_linear(&x, &y).map(PyLinearModel).map_err(value_err)
}

/// Ridge regression with an unpenalized intercept.
#[pyfunction]
fn fit_ridge(x: Vec<Vec<f64>>, y: Vec<f64>, lam: f64) -> PyResult<PyLinearModel> {
    models::fit_ridge(&x, &y, lam).map(PyLinearModel).map_err(value_err)
}

#[pyclass(name = "MlpModel", frozen)]
struct PyMlpModel(models::MlpModel);

#[pymethods]
impl PyMlpModel {
    /// Loads a checkpoint written by `to_checkpoint`.
    #[staticmethod]
    fn from_checkpoint(json: &str) -> PyResult<Self> {
        models::MlpModel::from_checkpoint(json).map(Self).map_err(value_err)
    }

    fn to_checkpoint(&self) -> String {
        self.0.to_checkpoint()
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.0.layer_sizes.clone()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.0.history.best_epoch
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.0.predict(&x).map_err(value_err)
    }

    /// Largest relative deviation between backprop and finite differences.
    fn gradient_check(&self, x: Vec<Vec<f64>>, y: Vec<f64>) -> f64 {
        models::gradient_check(&self.0, &x, &y)
    }

    fn __repr__(&self) -> String {
        format!("MlpModel(layers={:?})", self.0.layer_sizes)
    }
}

/// Trains the two-hidden-layer regressor with early stopping.
#[pyfunction]
#[pyo3(signature = (x, y, seed=0, max_epochs=None, learning_rate=None, hidden=None))]
fn mlp_train(
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    seed: u64,
    max_epochs: Option<usize>,
    learning_rate: Option<f64>,
    hidden: Option<(usize, usize)>,
) -> PyResult<PyMlpModel> {
    let mut hyper = MlpHyperParams::default();
    if let Some(e) = max_epochs {
        hyper.max_epochs = e;
    }
    if let Some(lr) = learning_rate {
        hyper.learning_rate = lr;
    }
    if let Some((a, b)) = hidden {
        hyper.hidden = [a, b];
    }
    models::mlp_train(&x, &y, hyper, seed).map(PyMlpModel).map_err(value_err)
}

/// Offline embedding: signed feature hashing of word tokens, unit length.
#[pyfunction]
fn hashing_embed(text: &str) -> PyResult<Vec<f64>> {
    HashingEmbedder::vectorize(text).map_err(value_err)
}

/// Parses a captioner response into its five factors.
#[pyfunction]
#[pyo3(signature = (raw, provider_id="python"))]
fn parse_caption<'py>(py: Python<'py>, raw: &str, provider_id: &str) -> PyResult<Bound<'py, PyAny>> {
    let caption = semantics::parse_caption(raw, provider_id).map_err(value_err)?;
    to_py(py, &caption)
}

/// The captioning prompt with the default role.
#[pyfunction]
fn build_prompt() -> String {
    semantics::build_prompt()
}

/// Writes a synthetic world and an offline config into `out`; returns the
/// config path.
#[pyfunction]
#[pyo3(signature = (out, isolines=300, seed=7))]
fn write_synthetic_project(out: PathBuf, isolines: usize, seed: u64) -> PyResult<PathBuf> {
    let params = WorldParams {
        isolines,
        seed,
        ..Default::default()
    };
    synthetic::write_project(&out, params).map_err(runtime_err)
}

fn load(config: &PathBuf, parallelism: Option<usize>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::load(config).map_err(value_err)?;
    if let Some(p) = parallelism {
        cfg.parallelism = p;
    }
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

fn stage_code(summary: &StageSummary, threshold: f64) -> i32 {
    if summary.exceeds(threshold) {
        2
    } else {
        0
    }
}

/// Runs every stage for a config file, releasing the GIL meanwhile.
/// Returns the exit code the CLI would report (0, or 2 when a stage's
/// failure share exceeds the threshold).
#[pyfunction]
#[pyo3(signature = (config, parallelism=None))]
fn run_pipeline(py: Python<'_>, config: PathBuf, parallelism: Option<usize>) -> PyResult<i32> {
    let cfg = load(&config, parallelism)?;
    py.detach(|| -> Result<i32, pipeline::PipelineError> {
        let threshold = cfg.failure_threshold;
        pipeline::ingest(&cfg)?;
        let client = pipeline::tile_client(&cfg)?;
        let mut code = stage_code(&pipeline::build_dataset(&cfg, client.as_ref())?, threshold);
        let captioner = pipeline::caption_provider(&cfg);
        let embedder = pipeline::embedding_provider(&cfg);
        let summary = pipeline::caption_embed(&cfg, captioner.as_ref(), embedder.as_ref())?;
        code = code.max(stage_code(&summary, threshold));
        pipeline::train_eval(&cfg)?;
        pipeline::report(&cfg)?;
        Ok(code)
    })
    .map_err(runtime_err)
}

/// Reads `cv_report.json` from the configured output directory.
#[pyfunction]
fn load_cv_report<'py>(py: Python<'py>, config: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load(&config, None)?;
    let text = std::fs::read_to_string(cfg.paths.output_dir.join(pipeline::CV_REPORT_FILE)).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pymodule]
fn pyheatprompt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EMBEDDING_DIM", semantics::EMBEDDING_DIM)?;
    m.add_class::<PyLinearModel>()?;
    m.add_class::<PyMlpModel>()?;
    m.add_function(wrap_pyfunction!(to_mercator, m)?)?;
    m.add_function(wrap_pyfunction!(to_wgs84, m)?)?;
    m.add_function(wrap_pyfunction!(polygon_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(sampling_window, m)?)?;
    m.add_function(wrap_pyfunction!(floor_area, m)?)?;
    m.add_function(wrap_pyfunction!(r_squared, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(uplift_percent, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(quintile_strata, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_kfold, m)?)?;
    m.add_function(wrap_pyfunction!(fit_linear, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ridge, m)?)?;
    m.add_function(wrap_pyfunction!(mlp_train, m)?)?;
    m.add_function(wrap_pyfunction!(hashing_embed, m)?)?;
    m.add_function(wrap_pyfunction!(parse_caption, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_project, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(load_cv_report, m)?)?;
    Ok(())
}
