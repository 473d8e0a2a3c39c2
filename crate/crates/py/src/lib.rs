//! Python bindings: thin JSON-returning wrappers around the solver, the
//! verification suite and the particle simulator.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::path::Path;

use mfslq::model::load_spec;
use mfslq::report;
use mfslq::stationarity::solve_mfslq;
use mfslq::tree_sde::{simulate_mfsde_particles, DeterministicFeedback};
use mfslq::verify::run_verification;

fn err(e: mfslq::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn load(path: &str, steps: Option<usize>) -> PyResult<mfslq::ProblemSpec> {
    let mut spec = load_spec(Path::new(path)).map_err(err)?;
    if let Some(steps) = steps {
        spec = spec.with_steps(steps);
    }
    Ok(spec)
}

/// Solve the instance at `path`; returns the full report as a JSON string.
#[pyfunction]
#[pyo3(signature = (path, steps=None, seed=0))]
fn solve(path: &str, steps: Option<usize>, seed: u64) -> PyResult<String> {
    let spec = load(path, steps)?;
    let rep = solve_mfslq(&spec).map_err(err)?;
    Ok(report::to_json_string(&report::report_json(
        &rep, &spec.grid, seed,
    )))
}

/// Run the verification suite on the instance; returns its JSON report.
#[pyfunction]
#[pyo3(signature = (path, steps=None, seed=0))]
fn verify(path: &str, steps: Option<usize>, seed: u64) -> PyResult<String> {
    let spec = load(path, steps)?;
    let rep = run_verification(&spec).map_err(err)?;
    Ok(report::to_json_string(&report::verification_json(
        &rep, seed,
    )))
}

/// Monte Carlo particle simulation under the solved feedback law; returns
/// times, empirical means and the terminal standard error as JSON.
#[pyfunction]
#[pyo3(signature = (path, particles=10_000, seed=0, steps=None))]
fn simulate(path: &str, particles: usize, seed: u64, steps: Option<usize>) -> PyResult<String> {
    let spec = load(path, steps)?;
    let rep = solve_mfslq(&spec).map_err(err)?;
    let n_steps = spec.grid.steps;
    let feedback = DeterministicFeedback {
        gain: (0..n_steps)
            .map(|i| {
                let k = rep.control.gain[i].len() as f64;
                rep.control.gain[i].iter().sum::<nalgebra::DMatrix<f64>>() / k
            })
            .collect(),
        offset: (0..n_steps)
            .map(|i| {
                let k = rep.control.offset[i].len() as f64;
                rep.control.offset[i]
                    .iter()
                    .sum::<nalgebra::DVector<f64>>()
                    / k
            })
            .collect(),
    };
    let particles_rep =
        simulate_mfsde_particles(&spec, &feedback, particles, n_steps, seed).map_err(err)?;
    let out = serde_json::json!({
        "times": particles_rep.times,
        "mean": particles_rep.mean.iter().map(|v| v.iter().cloned().collect::<Vec<f64>>()).collect::<Vec<_>>(),
        "sup_mean_sq": particles_rep.sup_mean_sq,
        "std_err": particles_rep.std_err.iter().cloned().collect::<Vec<f64>>(),
    });
    Ok(report::to_json_string(&out))
}

#[pymodule]
fn mfslq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
