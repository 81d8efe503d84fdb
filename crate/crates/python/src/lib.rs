//! Python bindings: workloads, synthesis, simulation and the verifier suite.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use recorp::cli::{parse_links, parse_topology};
use recorp::format;
use recorp::model::{FlowId, Policy as CorePolicy};
use recorp::simulator::{self, RunConfig};
use recorp::synthesizer::{self, SynthesisConfig, SynthesisError};
use recorp::verifier::{self, SuiteConfig};
use recorp::workload::{self, WorkloadKind};

create_exception!(recorp_py, UnschedulableError, PyException);

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A topology together with its flow set.
#[pyclass(module = "recorp_py", skip_from_py_object)]
#[derive(Clone)]
struct Workload {
    inner: format::Workload,
}

#[pymethods]
impl Workload {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Workload {
            inner: format::parse_workload(text).map_err(value_err)?,
        })
    }

    /// `n` leaves sending one-hop flows to the base station.
    #[staticmethod]
    #[pyo3(signature = (n, period = 100, reliability = 0.99))]
    fn star(n: u32, period: u32, reliability: f64) -> PyResult<Self> {
        let (topology, flows) = workload::star_workload(n, period, reliability).map_err(value_err)?;
        Ok(Workload {
            inner: format::Workload { topology, flows },
        })
    }

    /// Topology spec as on the command line: `star:N`, `mesh:N:DEG`,
    /// `washu`, `indriya` or a workload file path.
    #[staticmethod]
    #[pyo3(signature = (kind, count, topology = "washu", base_period = 100, reliability = 0.99, seed = 42))]
    fn generate(
        kind: &str,
        count: usize,
        topology: &str,
        base_period: u32,
        reliability: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let kind: WorkloadKind = kind.parse().map_err(value_err)?;
        let topology = parse_topology(topology, seed).map_err(value_err)?;
        let flows =
            workload::generate_workload(&topology, kind, count, base_period, reliability, seed).map_err(value_err)?;
        Ok(Workload {
            inner: format::Workload { topology, flows },
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        format::write_workload(&self.inner).map_err(value_err)
    }

    #[getter]
    fn flow_count(&self) -> usize {
        self.inner.flows.len()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.topology.nodes().len()
    }

    #[getter]
    fn hyperperiod(&self) -> PyResult<u32> {
        recorp::model::hyperperiod(&self.inner.flows).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Workload(nodes={}, flows={})", self.node_count(), self.flow_count())
    }
}

/// A synthesized pull policy with its reliability analysis.
#[pyclass(module = "recorp_py", skip_from_py_object)]
#[derive(Clone)]
struct Policy {
    inner: CorePolicy,
}

#[pymethods]
impl Policy {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Policy {
            inner: format::parse_policy(text).map_err(value_err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        format::write_policy(&self.inner).map_err(value_err)
    }

    #[getter]
    fn hyperperiod(&self) -> u32 {
        self.inner.hyperperiod()
    }

    #[getter]
    fn pull_count(&self) -> usize {
        self.inner.pull_count()
    }

    /// `(flow, instance, end_to_end_bound)` for every instance in the hyperperiod.
    fn bounds(&self) -> Vec<(u32, u32, f64)> {
        self.inner
            .analysis
            .iter()
            .map(|r| (r.flow.0, r.instance, r.end_to_end()))
            .collect()
    }

    /// Worst analytic response time of a flow, if it has instances.
    fn response_time(&self, flow: u32) -> Option<u32> {
        synthesizer::response_time(&self.inner, FlowId(flow))
    }

    fn __repr__(&self) -> String {
        format!(
            "Policy(hyperperiod={}, pulls={})",
            self.hyperperiod(),
            self.pull_count()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (workload, m = 0.7, service_cap = 4, active_cap = 10, channels = None))]
fn synthesize(
    workload: &Workload,
    m: f64,
    service_cap: usize,
    active_cap: usize,
    channels: Option<u16>,
) -> PyResult<Policy> {
    let cfg = SynthesisConfig {
        m,
        service_cap,
        active_cap,
        channels,
    };
    match synthesizer::synthesize(&workload.inner.topology, &workload.inner.flows, &cfg) {
        Ok(s) => Ok(Policy { inner: s.policy }),
        Err(SynthesisError::Unschedulable(u)) => Err(UnschedulableError::new_err(u.to_string())),
        Err(e) => Err(value_err(e)),
    }
}

/// Runs the policy and returns per-flow statistics as dictionaries.
#[pyfunction]
#[pyo3(signature = (workload, policy, links = "uniform", hyperperiods = 10_000, seed = 42, m = 0.7))]
fn simulate<'py>(
    py: Python<'py>,
    workload: &Workload,
    policy: &Policy,
    links: &str,
    hyperperiods: u64,
    seed: u64,
    m: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let links = parse_links(links, m).map_err(value_err)?;
    let stats = simulator::run(
        &policy.inner,
        &workload.inner.flows,
        &links,
        &RunConfig::new(hyperperiods, seed),
    )
    .map_err(value_err)?;
    if stats.runtime_conflicts > 0 {
        return Err(value_err(format!("{} run-time conflicts", stats.runtime_conflicts)));
    }
    stats
        .flows
        .iter()
        .map(|f| {
            let d = PyDict::new(py);
            d.set_item("flow", f.id.0)?;
            d.set_item("instances", f.instances)?;
            d.set_item("delivered", f.delivered)?;
            d.set_item("pdr", f.pdr)?;
            d.set_item("bound", f.bound)?;
            d.set_item("max_response", f.max_response)?;
            Ok(d)
        })
        .collect()
}

/// Largest star workload that stays schedulable.
#[pyfunction]
#[pyo3(signature = (m = 0.7, service_cap = 4, period = 100, reliability = 0.99, limit = 500))]
fn max_flows(m: f64, service_cap: usize, period: u32, reliability: f64, limit: usize) -> PyResult<usize> {
    let cfg = SynthesisConfig {
        service_cap,
        ..SynthesisConfig::with_m(m)
    };
    synthesizer::max_flows_search::<SynthesisError>(
        |n| Ok(workload::star_workload(n as u32, period, reliability)?),
        &cfg,
        limit,
    )
    .map_err(value_err)
}

/// Runs the verifier suite; returns `(name, cases, failures)` per check.
#[pyfunction]
#[pyo3(signature = (seed = 42, quick = true))]
fn verify(py: Python<'_>, seed: u64, quick: bool) -> Vec<(String, u64, u64)> {
    let mut cfg = SuiteConfig {
        seed,
        ..Default::default()
    };
    if quick {
        cfg.order_width = 6;
        cfg.random_trials = 100;
        cfg.domination_trials = 500;
    }
    py.detach(|| verifier::run_suite(&cfg))
        .into_iter()
        .map(|r| (r.name, r.cases, r.failures))
        .collect()
}

#[pymodule]
fn recorp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Workload>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(max_flows, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add("UnschedulableError", m.py().get_type::<UnschedulableError>())?;
    Ok(())
}
