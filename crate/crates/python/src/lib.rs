//! Python bindings: scenarios, simulation runs, comparisons, and the
//! statistics and constraint helpers.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use coopdiag::behavior::{self, Strategy};
use coopdiag::domain::{self, AgentId};
use coopdiag::sim;
use coopdiag::stats;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn strategy(name: &str) -> PyResult<Strategy> {
    name.parse().map_err(value_error)
}

#[pyclass(name = "Scenario", frozen)]
struct PyScenario {
    inner: sim::Scenario,
}

#[pymethods]
impl PyScenario {
    /// The 38-agent scenario shipped with the library.
    #[staticmethod]
    fn bundled() -> Self {
        Self {
            inner: sim::Scenario::bundled(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        sim::Scenario::from_json(text)
            .map(|inner| Self { inner })
            .map_err(value_error)
    }

    /// `(path, message)` for every problem in `text`; empty when valid.
    #[staticmethod]
    fn issues(text: &str) -> Vec<(String, String)> {
        match sim::Scenario::from_json(text) {
            Ok(_) => vec![],
            Err(e) => e.issues().into_iter().map(|i| (i.path, i.message)).collect(),
        }
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn episodes(&self) -> u32 {
        self.inner.run.episodes
    }

    #[getter]
    fn agents(&self) -> Vec<String> {
        self.inner
            .agents
            .iter()
            .map(|a| a.id.to_string())
            .chain(self.inner.background.iter().map(|b| b.id.to_string()))
            .collect()
    }

    /// `(id, kind, onset_episode)` per failure.
    #[getter]
    fn failures(&self) -> Vec<(String, String, u32)> {
        self.inner
            .failures
            .iter()
            .map(|f| (f.id.clone(), format!("{:?}", f.kind).to_lowercase(), f.onset_episode))
            .collect()
    }

    /// Hops between two agents on the binding graph; `None` if disconnected.
    fn hop_distance(&self, a: &str, b: &str) -> Option<usize> {
        sim::Topology::from_scenario(&self.inner).hop_distance(&AgentId::new(a), &AgentId::new(b))
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?}, {} agents)", self.inner.name, self.agents().len())
    }
}

#[pyclass(name = "MetricsRecord", frozen, get_all)]
struct PyMetricsRecord {
    episode: u32,
    strategy: String,
    response_time_ms: f64,
    cost_units: f64,
    violation: bool,
    active_failures: Vec<String>,
}

#[pymethods]
impl PyMetricsRecord {
    fn __repr__(&self) -> String {
        format!(
            "MetricsRecord(episode={}, response_time_ms={}, cost_units={}, violation={})",
            self.episode, self.response_time_ms, self.cost_units, self.violation
        )
    }
}

#[pyclass(name = "RunResult", frozen)]
struct PyRunResult {
    scenario: sim::Scenario,
    inner: sim::RunResult,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn strategy(&self) -> String {
        self.inner.strategy.to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn metrics(&self) -> Vec<PyMetricsRecord> {
        self.inner
            .metrics
            .iter()
            .map(|m| PyMetricsRecord {
                episode: m.episode,
                strategy: m.strategy.to_string(),
                response_time_ms: m.response_time_ms,
                cost_units: m.cost_units,
                violation: m.violation,
                active_failures: m.active_failures.clone(),
            })
            .collect()
    }

    #[getter]
    fn accumulated_cost(&self) -> f64 {
        self.inner.summary.accumulated_cost
    }

    #[getter]
    fn violation_episodes(&self) -> usize {
        self.inner.summary.violation_episodes
    }

    #[getter]
    fn final_active_failures(&self) -> Vec<String> {
        self.inner.summary.final_active_failures.clone()
    }

    /// `(label, first, last, mean_response_ms)` per phase.
    #[getter]
    fn phases(&self) -> Vec<(String, u32, u32, f64)> {
        self.inner
            .summary
            .phases
            .iter()
            .map(|p| (p.phase.label.clone(), p.phase.first, p.phase.last, p.mean_response_ms))
            .collect()
    }

    fn csv(&self) -> String {
        sim::to_csv(&self.inner.metrics)
    }

    fn log(&self) -> String {
        self.inner.log.render()
    }

    /// Protocol-audit violations; empty when the run is consistent.
    fn audit(&self) -> Vec<String> {
        sim::audit(&self.scenario, &self.inner).violations
    }

    fn __len__(&self) -> usize {
        self.inner.metrics.len()
    }
}

#[pyfunction]
#[pyo3(signature = (scenario, strategy_name, seed, episodes=None))]
fn run_simulation(
    py: Python<'_>,
    scenario: &PyScenario,
    strategy_name: &str,
    seed: u64,
    episodes: Option<u32>,
) -> PyResult<PyRunResult> {
    let st = strategy(strategy_name)?;
    let s = &scenario.inner;
    let inner = py
        .detach(|| sim::run_simulation(s, st, seed, episodes))
        .map_err(value_error)?;
    Ok(PyRunResult {
        scenario: s.clone(),
        inner,
    })
}

/// Aggregates over `seeds` per strategy: a list of dicts with the same
/// fields as the comparison CSV.
#[pyfunction]
#[pyo3(signature = (scenario, strategies, seeds, episodes=None))]
fn compare(
    py: Python<'_>,
    scenario: &PyScenario,
    strategies: Vec<String>,
    seeds: Vec<u64>,
    episodes: Option<u32>,
) -> PyResult<Vec<BTreeMap<String, Py<PyAny>>>> {
    let sts = strategies
        .iter()
        .map(|s| strategy(s))
        .collect::<PyResult<Vec<_>>>()?;
    let s = &scenario.inner;
    let summaries = py
        .detach(|| {
            let mut out = Vec::new();
            for st in &sts {
                for seed in &seeds {
                    out.push(sim::run_simulation(s, *st, *seed, episodes)?.summary);
                }
            }
            Ok::<_, sim::EngineError>(out)
        })
        .map_err(value_error)?;
    sim::aggregate(&summaries)
        .into_iter()
        .map(|a| {
            let mut d: BTreeMap<String, Py<PyAny>> = BTreeMap::new();
            d.insert("strategy".into(), a.strategy.to_string().into_pyobject(py)?.into_any().unbind());
            d.insert("runs".into(), a.runs.into_pyobject(py)?.into_any().unbind());
            for (k, v) in [
                ("cost_mean", a.cost_mean),
                ("cost_std", a.cost_std),
                ("violations_mean", a.violations_mean),
                ("violations_std", a.violations_std),
                ("final_failures_mean", a.final_failures_mean),
            ] {
                d.insert(k.into(), v.into_pyobject(py)?.into_any().unbind());
            }
            Ok(d)
        })
        .collect()
}

#[pyfunction]
fn tukey_fences(values: Vec<f64>) -> PyResult<(f64, f64)> {
    let f = stats::tukey_fences(&values).map_err(value_error)?;
    Ok((f.lower, f.upper))
}

#[pyfunction]
fn is_anomalous(values: Vec<f64>) -> PyResult<bool> {
    stats::is_anomalous(&values).map_err(value_error)
}

#[pyfunction]
fn anomaly_probability(values: Vec<f64>, times: Vec<f64>) -> PyResult<f64> {
    let s = stats::Sample::new(values, times).map_err(value_error)?;
    stats::anomaly_probability(&s).map_err(value_error)
}

#[pyfunction]
fn kde_interval_mass(values: Vec<f64>, times: Vec<f64>, lo: f64, hi: f64) -> PyResult<f64> {
    let s = stats::Sample::new(values, times).map_err(value_error)?;
    let m = stats::density_model(&s, &stats::KdeConfig::default()).map_err(value_error)?;
    stats::kde_interval_mass(&m, lo, hi).map_err(value_error)
}

#[pyclass(name = "Constraint", frozen)]
struct PyConstraint {
    inner: domain::Constraint,
}

#[pymethods]
impl PyConstraint {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        domain::parse_constraint(text)
            .map(|inner| Self { inner })
            .map_err(value_error)
    }

    fn eval(&self, measurements: BTreeMap<String, f64>) -> PyResult<bool> {
        self.inner.eval(&measurements).map_err(value_error)
    }

    fn features(&self) -> Vec<String> {
        self.inner.features().into_iter().map(str::to_string).collect()
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Constraint({:?})", self.inner.to_string())
    }
}

/// Similarity-weighted mean of `(prob, similarity)` replies.
#[pyfunction]
fn external_verification_score(replies: Vec<(f64, f64)>) -> f64 {
    behavior::external_verification_score(replies)
}

#[pyfunction]
#[pyo3(signature = (score, threshold=behavior::DEFAULT_THRESHOLD))]
fn cause_from_score(score: f64, threshold: f64) -> String {
    behavior::cause_from_score(score, threshold).to_string()
}

#[pymodule]
#[pyo3(name = "coopdiag")]
fn coopdiag_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRunResult>()?;
    m.add_class::<PyMetricsRecord>()?;
    m.add_class::<PyConstraint>()?;
    m.add_function(wrap_pyfunction!(run_simulation, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(tukey_fences, m)?)?;
    m.add_function(wrap_pyfunction!(is_anomalous, m)?)?;
    m.add_function(wrap_pyfunction!(anomaly_probability, m)?)?;
    m.add_function(wrap_pyfunction!(kde_interval_mass, m)?)?;
    m.add_function(wrap_pyfunction!(external_verification_score, m)?)?;
    m.add_function(wrap_pyfunction!(cause_from_score, m)?)?;
    m.add("STRATEGIES", Strategy::ALL.map(|s| s.name()).to_vec())?;
    Ok(())
}
