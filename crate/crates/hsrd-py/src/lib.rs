//! Python bindings. Sources and reports cross the boundary as JSON text in
//! the same schema the command line reads and writes.

use hsrd::cli::{cmd_entropy, parse_tuple, standard_protocol, QuantityArg};
use hsrd::qstate::HybridSource;
use hsrd::region::{self, ScenarioSpec};
use hsrd::{entropy, protocol, CMatrix, Error, C64};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

/// Invalid input maps to ValueError; solver, numerical and plan failures to
/// RuntimeError. The message starts with the CLI exit code.
fn to_py(e: Error) -> PyErr {
    let msg = format!("[{}] {e}", e.exit_code());
    match e.exit_code() {
        2 => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn source(state_json: &str) -> PyResult<HybridSource> {
    HybridSource::from_json(state_json).map_err(to_py)
}

fn quantity(name: &str) -> PyResult<QuantityArg> {
    Ok(match name {
        "hmin" => QuantityArg::Hmin,
        "hmax" => QuantityArg::Hmax,
        "hmax-prime" => QuantityArg::HmaxPrime,
        "h" => QuantityArg::H,
        "mi" => QuantityArg::Mi,
        _ => return Err(PyValueError::new_err(format!("unknown quantity {name}"))),
    })
}

/// Entropy of a source; `systems` is "TARGET|CONDITIONING", e.g. "C|B".
#[pyfunction]
#[pyo3(signature = (state_json, quantity_name, systems, eps = 0.0))]
pub fn entropy_of(state_json: &str, quantity_name: &str, systems: &str, eps: f64) -> PyResult<f64> {
    cmd_entropy(&source(state_json)?, quantity(quantity_name)?, systems, eps).map_err(to_py)
}

/// H_min(A|B) of a density matrix given as rows of complex numbers.
#[pyfunction]
#[pyo3(signature = (rows, da, db, eps = 0.0))]
pub fn hmin_matrix(rows: Vec<Vec<C64>>, da: usize, db: usize, eps: f64) -> PyResult<f64> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    let m = CMatrix::from_vec(n, n, rows.into_iter().flatten().collect()).map_err(to_py)?;
    entropy::smooth_hmin_matrix(&m, da, db, eps).map_err(to_py)
}

/// Direct, converse or asymptotic bounds as a JSON report. The asymptotic
/// kind returns {"inner": ..., "outer": ...}.
#[pyfunction]
#[pyo3(signature = (state_json, kind, eps = 0.05, delta = 0.05))]
pub fn region_report(state_json: &str, kind: &str, eps: f64, delta: f64) -> PyResult<String> {
    let src = source(state_json)?;
    let r = match kind {
        "direct" => region::direct_bound(&src, eps, delta),
        "converse" => region::converse_bound(&src, eps, delta),
        "asymptotic" => {
            let a = region::asymptotic_region(&src).map_err(to_py)?;
            return Ok(format!("{{\"inner\": {}, \"outer\": {}}}", a.inner.to_json(), a.outer.to_json()));
        }
        _ => return Err(PyValueError::new_err(format!("unknown region kind {kind}"))),
    };
    r.map(|b| b.to_json()).map_err(to_py)
}

/// (label, satisfied, slack) for every row of a bound at the given tuple.
#[pyfunction]
#[pyo3(signature = (state_json, kind, tuple, eps = 0.05, delta = 0.05))]
pub fn check_tuple(state_json: &str, kind: &str, tuple: &str, eps: f64, delta: f64) -> PyResult<Vec<(String, bool, f64)>> {
    let src = source(state_json)?;
    let t = parse_tuple(tuple).map_err(to_py)?;
    let bound = match kind {
        "direct" => region::direct_bound(&src, eps, delta),
        "converse" => region::converse_bound(&src, eps, delta),
        "asymptotic-inner" => region::asymptotic_region(&src).map(|a| a.inner),
        "asymptotic-outer" => region::asymptotic_region(&src).map(|a| a.outer),
        _ => return Err(PyValueError::new_err(format!("unknown bound {kind}"))),
    }
    .map_err(to_py)?;
    Ok(region::check_tuple(&bound, &t).into_iter().map(|c| (c.label, c.satisfied, c.slack)).collect())
}

/// Scenario report as JSON.
#[pyfunction]
#[pyo3(signature = (state_json, scenario, eps = 0.05, delta = 0.05))]
pub fn reduce(state_json: &str, scenario: &str, eps: f64, delta: f64) -> PyResult<String> {
    let id = scenario.parse().map_err(to_py)?;
    let rep = region::reduce_scenario(&source(state_json)?, &ScenarioSpec::new(id), eps, delta).map_err(to_py)?;
    serde_json::to_string_pretty(&rep).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs the standard protocol realizing `tuple` ("c,q,e,e0"); JSON report.
#[pyfunction]
pub fn protocol_run(state_json: &str, tuple: &str) -> PyResult<String> {
    let src = source(state_json)?;
    let t = parse_tuple(tuple).map_err(to_py)?;
    let p = standard_protocol(&src, &t).map_err(to_py)?;
    protocol::run_protocol(&src, &p).map(|r| r.to_json()).map_err(to_py)
}

/// Constructs a protocol from a selected (σ, U) pair; JSON report.
#[pyfunction]
#[pyo3(signature = (state_json, tuple, eps, delta, seed = 0))]
pub fn protocol_construct(state_json: &str, tuple: &str, eps: f64, delta: f64, seed: u64) -> PyResult<String> {
    let src = source(state_json)?;
    let t = parse_tuple(tuple).map_err(to_py)?;
    let c = protocol::construct_protocol(&src, &protocol::ConstructParams::new(t, eps, delta, seed)).map_err(to_py)?;
    Ok(c.report.to_json())
}

/// Runs the command line in-process: returns (exit code, stdout, stderr).
#[pyfunction]
pub fn cli(args: Vec<String>) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("hsrd".to_string()).chain(args);
    let code = hsrd::cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

#[pymodule]
fn hsrd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(entropy_of, m)?)?;
    m.add_function(wrap_pyfunction!(hmin_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(region_report, m)?)?;
    m.add_function(wrap_pyfunction!(check_tuple, m)?)?;
    m.add_function(wrap_pyfunction!(reduce, m)?)?;
    m.add_function(wrap_pyfunction!(protocol_run, m)?)?;
    m.add_function(wrap_pyfunction!(protocol_construct, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
