//! Python bindings: `import waal`.
//!
//! Structured results (reports, round records) are returned as plain
//! dicts and lists decoded from their JSON form.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

use waal_core::divergence::{self, PiecewiseUniform, PointCloud};
use waal_core::oracle::SimulatedOracle;
use waal_core::train::BiasConvention;
use waal_core::{query, Experiment, ExperimentConfig};

fn value_error(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_python<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn law(intervals: Vec<(f64, f64)>) -> PyResult<PiecewiseUniform> {
    PiecewiseUniform::new(intervals).map_err(value_error)
}

fn cloud(points: Vec<Vec<f64>>) -> PyResult<PointCloud> {
    let rows = points.len();
    let cols = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != cols) {
        return Err(value_error("points must all have the same dimension"));
    }
    let flat = points.into_iter().flatten().collect();
    let array = Array2::from_shape_vec((rows, cols), flat).map_err(value_error)?;
    PointCloud::new(array).map_err(value_error)
}

/// Exact W1 between uniform laws on unions of disjoint intervals.
#[pyfunction]
fn w1(p: Vec<(f64, f64)>, q: Vec<(f64, f64)>) -> PyResult<f64> {
    Ok(divergence::w1_quantile(&law(p)?, &law(q)?))
}

/// Monte-Carlo W1 from `n` seeded draws of each law.
#[pyfunction]
#[pyo3(signature = (p, q, n = 20_000, seed = 0))]
fn w1_monte_carlo(p: Vec<(f64, f64)>, q: Vec<(f64, f64)>, n: usize, seed: u64) -> PyResult<f64> {
    divergence::mc_w1_estimate(&law(p)?, &law(q)?, n, seed).map_err(value_error)
}

/// Smallest risk of a threshold classifier separating the two laws.
#[pyfunction]
fn threshold_risk(p: Vec<(f64, f64)>, q: Vec<(f64, f64)>) -> PyResult<f64> {
    Ok(divergence::threshold_risk(&law(p)?, &law(q)?).eps_star)
}

/// Exact W1 between two equal-size point clouds (rows are points).
#[pyfunction]
fn w1_exact(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    divergence::w1_exact_small(&cloud(x)?, &cloud(y)?).map_err(value_error)
}

/// W1 and threshold risk of both query families over `grid` values of x0.
#[pyfunction]
#[pyo3(signature = (a, b, grid = 101))]
fn divergence_report(py: Python<'_>, a: f64, b: f64, grid: usize) -> PyResult<Py<PyAny>> {
    to_python(py, &divergence::divergence_report(a, b, grid).map_err(value_error)?)
}

/// Labeled-side weight C0 for unbalanced ratio `gamma` and query ratio `alpha`.
#[pyfunction]
#[pyo3(signature = (gamma, alpha, convention = "per_batch"))]
fn bias_coefficient(gamma: f64, alpha: f64, convention: &str) -> PyResult<f64> {
    let convention = match convention {
        "per_batch" => BiasConvention::PerBatch,
        "full_pool" => BiasConvention::FullPool,
        other => return Err(value_error(format!("unknown convention {other:?}"))),
    };
    waal_core::train::bias_coefficient_with(gamma, alpha, convention).map_err(value_error)
}

/// Mixed uncertainty score of one probability row; smaller is more uncertain.
#[pyfunction]
#[pyo3(signature = (p, beta = 0.5))]
fn uncertainty(p: Vec<f64>, beta: f64) -> PyResult<f64> {
    query::uncertainty(&p, beta).map_err(value_error)
}

#[pyfunction]
fn score_l1(p: Vec<f64>) -> f64 {
    query::score_l1(&p)
}

#[pyfunction]
fn score_single_worst(p: Vec<f64>) -> f64 {
    query::score_single_worst(&p)
}

/// Worst finite-difference relative error over every loss.
#[pyfunction]
#[pyo3(signature = (seed = 0, configs = waal_core::gradcheck::DEFAULT_CONFIGS))]
fn gradcheck(seed: u64, configs: usize) -> PyResult<f64> {
    Ok(waal_core::gradcheck::run_gradcheck(seed, configs, false)
        .map_err(value_error)?
        .worst())
}

/// Runs an experiment config (a JSON string) with simulated labels and
/// returns the round records of every seed, in seed order. Relative dataset
/// paths resolve against `base_dir`.
#[pyfunction]
#[pyo3(signature = (config, seeds = None, base_dir = None))]
fn run(
    py: Python<'_>,
    config: &str,
    seeds: Option<Vec<u64>>,
    base_dir: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let config = ExperimentConfig::from_json_str(config).map_err(value_error)?;
    let seeds = seeds.unwrap_or_else(|| config.seeds.clone());
    let records = py
        .detach(|| {
            let mut all = Vec::new();
            for seed in seeds {
                let mut exp = Experiment::new(&config, seed, base_dir.as_deref())?;
                let mut oracle = SimulatedOracle::from_pool(exp.pool());
                exp.pool_mut().hide_unlabeled();
                while exp.run_round(&mut oracle, &mut |_| {})?.is_some() {}
                all.extend_from_slice(exp.records());
            }
            Ok::<_, waal_core::Error>(all)
        })
        .map_err(value_error)?;
    to_python(py, &records)
}

#[pymodule]
fn waal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(w1, m)?)?;
    m.add_function(wrap_pyfunction!(w1_monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_risk, m)?)?;
    m.add_function(wrap_pyfunction!(w1_exact, m)?)?;
    m.add_function(wrap_pyfunction!(divergence_report, m)?)?;
    m.add_function(wrap_pyfunction!(bias_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(uncertainty, m)?)?;
    m.add_function(wrap_pyfunction!(score_l1, m)?)?;
    m.add_function(wrap_pyfunction!(score_single_worst, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
