//! Python module `shardflow`. Structured results come back as plain
//! dicts and lists decoded from JSON.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use shardflow_core::bench::{run_experiment as run_exp, ExperimentConfig};
use shardflow_core::model::{self, TopologySpec};
use shardflow_core::scheduler::{self, Allocation, MetricsSnapshot, SchedulerConfig};
use shardflow_core::sim::{SimConfig, Simulation};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
fn hash_key_to_executor(key: u64, y: u32) -> PyResult<u32> {
    if y == 0 {
        return Err(PyValueError::new_err("y must be >= 1"));
    }
    Ok(model::hash_key_to_executor(key, y))
}

#[pyfunction]
fn hash_key_to_shard(key: u64, z: u32) -> PyResult<u32> {
    if z == 0 {
        return Err(PyValueError::new_err("z must be >= 1"));
    }
    Ok(model::hash_key_to_shard(key, z))
}

/// Validates a topology JSON document; returns operator ids in
/// topological order.
#[pyfunction]
fn validate_topology(topology_json: &str) -> PyResult<Vec<String>> {
    let spec = TopologySpec::from_json(topology_json).map_err(value_err)?;
    let topo = model::validate_topology(&spec).map_err(value_err)?;
    Ok(topo.order.iter().map(|o| spec.operators[o.0].id.clone()).collect())
}

/// Mean M/M/k sojourn time; `inf` when λ ≥ kμ.
#[pyfunction]
fn mmk_latency(lam: f64, mu: f64, k: u32) -> PyResult<f64> {
    if !(mu > 0.0) || k == 0 || !(lam >= 0.0) {
        return Err(PyValueError::new_err("need lam >= 0, mu > 0 and k >= 1"));
    }
    Ok(scheduler::mmk_latency(lam, mu, k).seconds())
}

/// Greedy core allocation for a metrics snapshot (JSON). Returns
/// `(cores, met)`.
#[pyfunction]
#[pyo3(signature = (snapshot_json, latency_target, budget))]
fn allocate(snapshot_json: &str, latency_target: f64, budget: u32) -> PyResult<(Vec<u32>, bool)> {
    let snap: MetricsSnapshot = serde_json::from_str(snapshot_json).map_err(value_err)?;
    let m = snap.executors();
    if snap.service_rate.len() != m || !(snap.source_rate > 0.0) || !(latency_target > 0.0) {
        return Err(PyValueError::new_err("malformed snapshot"));
    }
    let cfg = SchedulerConfig {
        latency_target,
        ..SchedulerConfig::default()
    };
    let out = scheduler::allocate(&snap, &cfg, budget);
    let met = matches!(out, Allocation::Met(_));
    Ok((out.into_vector().0, met))
}

/// Runs one simulation from a run-config JSON document and returns
/// `{"windows": [...], "totals": {...}}`.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg: SimConfig = serde_json::from_str(config_json).map_err(value_err)?;
    let trace = Simulation::new(cfg).and_then(|s| s.run()).map_err(value_err)?;
    #[derive(Serialize)]
    struct Out<'a> {
        policy: &'a str,
        windows: &'a [shardflow_core::sim::WindowRow],
        totals: &'a shardflow_core::sim::RunTotals,
    }
    to_py(
        py,
        &Out {
            policy: trace.policy.name(),
            windows: &trace.windows,
            totals: &trace.totals,
        },
    )
}

/// Runs an experiment config file, writes its outputs to `out_dir` and
/// returns the summary rows.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir, jobs = 1, report = false))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_path: &str,
    out_dir: &str,
    jobs: usize,
    report: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let exp = ExperimentConfig::load(Path::new(config_path)).map_err(value_err)?;
    let rows = run_exp(&exp, Path::new(out_dir), jobs, report).map_err(value_err)?;
    to_py(py, &rows)
}

#[pymodule]
fn shardflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hash_key_to_executor, m)?)?;
    m.add_function(wrap_pyfunction!(hash_key_to_shard, m)?)?;
    m.add_function(wrap_pyfunction!(validate_topology, m)?)?;
    m.add_function(wrap_pyfunction!(mmk_latency, m)?)?;
    m.add_function(wrap_pyfunction!(allocate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
