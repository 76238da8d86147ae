use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nkscopf::attack::{find_worst_case_attack, project_attack};
use nkscopf::driver::{run_scopf, ScopfConfig};
use nkscopf::evaluation::{evaluate_dispatch, sample_contingencies, EvaluationOptions};
use nkscopf::grid::{parse_case, parse_case_file, PowerSystem};
use nkscopf::opf::solve_base_opf_full;
use nkscopf::powerflow::{solve_power_flow, Dispatch, PowerFlowOptions};
use nkscopf::Error;

create_exception!(pynkscopf, SolverError, PyRuntimeError);
create_exception!(pynkscopf, InfeasibleError, SolverError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Infeasible { .. } => InfeasibleError::new_err(e.to_string()),
        Error::Syntax { .. }
        | Error::Semantic(_)
        | Error::Dimension { .. }
        | Error::InvalidInput(_)
        | Error::Json(_)
        | Error::Io(_)
        | Error::StaleSolution => PyValueError::new_err(e.to_string()),
        _ => SolverError::new_err(e.to_string()),
    }
}

fn config(json: Option<&str>) -> PyResult<ScopfConfig> {
    match json {
        Some(text) => ScopfConfig::from_json(text).map_err(to_py),
        None => Ok(ScopfConfig::default()),
    }
}

/// A parsed power system case.
#[pyclass(name = "Case", frozen)]
struct Case {
    sys: PowerSystem,
}

#[pymethods]
impl Case {
    /// Parses a MATPOWER-style case file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Case {
            sys: parse_case_file(path).map_err(to_py)?,
        })
    }

    /// Parses MATPOWER-style case text.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Case {
            sys: parse_case(text).map_err(to_py)?,
        })
    }

    #[getter]
    fn n_bus(&self) -> usize {
        self.sys.n_bus()
    }

    #[getter]
    fn n_gen(&self) -> usize {
        self.sys.n_gen()
    }

    #[getter]
    fn n_outage(&self) -> usize {
        self.sys.n_outage()
    }

    #[getter]
    fn base_mva(&self) -> f64 {
        self.sys.base_mva()
    }

    /// Labels of the outage-eligible devices, in attack-vector order.
    fn device_labels(&self) -> Vec<String> {
        self.sys
            .outage_devices()
            .iter()
            .map(|&d| self.sys.device_label(d))
            .collect()
    }

    /// Set points stored in the case as `(p, v)`.
    fn nominal_dispatch(&self) -> (Vec<f64>, Vec<f64>) {
        let d = Dispatch::nominal(&self.sys);
        (d.p, d.v)
    }

    fn __repr__(&self) -> String {
        format!(
            "Case(n_bus={}, n_gen={}, n_outage={})",
            self.sys.n_bus(),
            self.sys.n_gen(),
            self.sys.n_outage()
        )
    }
}

impl Case {
    fn dispatch(&self, p: Vec<f64>, v: Vec<f64>) -> PyResult<Dispatch> {
        Dispatch::new(&self.sys, p, v).map_err(to_py)
    }
}

/// Newton power flow at dispatch `(p, v)`, the case set points when omitted.
#[pyfunction]
#[pyo3(signature = (case, p=None, v=None, tol=1e-8, max_iter=50))]
fn power_flow<'py>(
    py: Python<'py>,
    case: &Case,
    p: Option<Vec<f64>>,
    v: Option<Vec<f64>>,
    tol: f64,
    max_iter: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let x = match (p, v) {
        (Some(p), Some(v)) => case.dispatch(p, v)?,
        (None, None) => Dispatch::nominal(&case.sys),
        _ => return Err(PyValueError::new_err("give both p and v or neither")),
    };
    let opts = PowerFlowOptions {
        tol,
        max_iter,
        ..Default::default()
    };
    let pf = py
        .detach(|| solve_power_flow(&case.sys, &x, None, &opts))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("vm", pf.state.vm)?;
    d.set_item("va", pf.state.va)?;
    d.set_item("qg", pf.state.qg)?;
    d.set_item("p_slack", pf.state.p_slack)?;
    d.set_item("iterations", pf.iterations)?;
    d.set_item("residual", pf.residual)?;
    Ok(d)
}

/// Base-case optimal power flow; returns the dispatch and its cost in $/h.
#[pyfunction]
#[pyo3(signature = (case, config=None))]
fn base_opf<'py>(py: Python<'py>, case: &Case, config: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = self::config(config)?;
    let sol = py
        .detach(|| solve_base_opf_full(&case.sys, &cfg.solver))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("p", sol.dispatch.p)?;
    d.set_item("v", sol.dispatch.v)?;
    d.set_item("cost", sol.cost)?;
    d.set_item("iterations", sol.iterations)?;
    Ok(d)
}

/// Euclidean projection onto `{y in [0,1]^n : sum(y) <= k}`.
#[pyfunction]
#[pyo3(name = "project_attack")]
fn py_project_attack(y: Vec<f64>, k: usize) -> Vec<f64> {
    project_attack(&y, k).values().to_vec()
}

/// Worst-case continuous attack with budget `k` against dispatch `(p, v)`.
#[pyfunction]
#[pyo3(signature = (case, p, v, k, config=None))]
fn find_attack<'py>(
    py: Python<'py>,
    case: &Case,
    p: Vec<f64>,
    v: Vec<f64>,
    k: usize,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = self::config(config)?;
    let x = case.dispatch(p, v)?;
    let res = py
        .detach(|| find_worst_case_attack(&case.sys, &x, k, &cfg.attack, &cfg.solver, None))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("y", res.y.values().to_vec())?;
    d.set_item("loss", res.solution.attack_loss(&case.sys))?;
    d.set_item("initial_loss", res.trace.initial_loss)?;
    d.set_item("iterations", res.trace.iterations.len())?;
    d.set_item("converged", res.trace.converged)?;
    d.set_item("trace_csv", res.trace.to_csv())?;
    Ok(d)
}

/// Full attack-defense loop; `config` is the JSON run config.
#[pyfunction]
#[pyo3(signature = (case, config=None))]
fn run<'py>(py: Python<'py>, case: &Case, config: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = self::config(config)?;
    let (x, history) = py.detach(|| run_scopf(&case.sys, &cfg)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("p", x.p)?;
    d.set_item("v", x.v)?;
    d.set_item("converged", history.converged)?;
    d.set_item("reason", history.reason.clone())?;
    d.set_item("iterations", history.records.len())?;
    d.set_item("history_csv", history.to_csv())?;
    Ok(d)
}

/// Violation counts of dispatch `(p, v)` over sampled outage scenarios.
#[pyfunction]
#[pyo3(signature = (case, p, v, sizes, counts, seed=0, parallelism=1, tol=1e-4))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    case: &Case,
    p: Vec<f64>,
    v: Vec<f64>,
    sizes: Vec<usize>,
    counts: Vec<usize>,
    seed: u64,
    parallelism: usize,
    tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    if sizes.len() != counts.len() {
        return Err(PyValueError::new_err("sizes and counts differ in length"));
    }
    if counts.contains(&0) {
        return Err(PyValueError::new_err("counts must be positive"));
    }
    let x = case.dispatch(p, v)?;
    let mut scenarios = Vec::new();
    for (&size, &count) in sizes.iter().zip(&counts) {
        scenarios.extend(sample_contingencies(&case.sys, size, count, seed.wrapping_add(size as u64)));
    }
    let opts = EvaluationOptions {
        tol,
        parallelism,
        seed: Some(seed),
        ..Default::default()
    };
    let report = py
        .detach(|| evaluate_dispatch(&case.sys, &x, &scenarios, &opts))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    let rows = report
        .aggregates
        .iter()
        .map(|a| (a.size, a.scenarios, a.violations))
        .collect::<Vec<_>>();
    d.set_item("aggregates", rows)?;
    d.set_item("total_violations", report.total_violations())?;
    d.set_item("total_scenarios", report.total_scenarios())?;
    d.set_item("csv", report.to_csv())?;
    Ok(d)
}

#[pymodule]
fn pynkscopf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Case>()?;
    m.add_function(wrap_pyfunction!(power_flow, m)?)?;
    m.add_function(wrap_pyfunction!(base_opf, m)?)?;
    m.add_function(wrap_pyfunction!(py_project_attack, m)?)?;
    m.add_function(wrap_pyfunction!(find_attack, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("SolverError", m.py().get_type::<SolverError>())?;
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    Ok(())
}
