//! Python bindings. Structured values cross the boundary as JSON strings in
//! the same shapes the scenario files and reports use.

use pyo3::exceptions::{PyKeyError, PyPermissionError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::json;

use jamus_core::broker::{Broker as CoreBroker, CapacityConfig, PlatformCapacity, ReservationId, SubscribeOutcome};
use jamus_core::container::{Container as CoreContainer, ContainerError};
use jamus_core::contracts::{AccessKind, AccessPermission, Amendment, ComponentId, Contract};
use jamus_core::host::{self, gen, CheckOutcome, RunOptions};
use jamus_core::resources::{HandleId, ResourceError};
use jamus_core::sanctions::Sanction;

fn parse<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    host::parse_json(text).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("core types serialize")
}

fn container_err(e: ContainerError) -> PyErr {
    match e {
        ContainerError::Resource(ResourceError::Vetoed(v)) => PyPermissionError::new_err(format!("creation vetoed ({v})")),
        ContainerError::Resource(ResourceError::HandleLocked(h)) => PyPermissionError::new_err(format!("handle {h} is locked")),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Outcome of a scenario run.
#[pyclass(frozen, module = "jamus")]
struct RunResult {
    #[pyo3(get)]
    report: String,
    #[pyo3(get)]
    trace: String,
    #[pyo3(get)]
    flow: String,
    #[pyo3(get)]
    exit_code: i32,
}

/// Runs a scenario given as JSON. `seed` selects a random interleaving.
#[pyfunction]
#[pyo3(signature = (scenario, seed=None, flow=false))]
fn run_scenario(scenario: &str, seed: Option<u64>, flow: bool) -> PyResult<RunResult> {
    let s = host::parse_scenario(scenario).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = host::run(&s, &RunOptions { seed, flow });
    Ok(RunResult {
        report: out.report.to_json(),
        trace: out.trace_text(),
        flow: out.flow_text(),
        exit_code: out.exit_code(),
    })
}

/// Evaluates a contract against a capacity configuration.
/// Returns `(exit_code, submission_report_json)`.
#[pyfunction]
fn check(contract: &str, capacity: &str) -> PyResult<(i32, String)> {
    let outcome = host::check(contract, capacity);
    match &outcome {
        CheckOutcome::Report(r) => Ok((outcome.exit_code(), to_json(r))),
        CheckOutcome::Invalid(msg) => Err(PyValueError::new_err(msg.clone())),
    }
}

/// Replays a trace against its scenario and returns the discrepancies.
#[pyfunction]
fn verify_trace(trace: &str, scenario: &str) -> PyResult<Vec<String>> {
    let s = host::parse_scenario(scenario).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let found = host::verify_trace(trace, &s).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(found.iter().map(ToString::to_string).collect())
}

/// A schema-valid random scenario, as JSON.
#[pyfunction]
fn random_scenario(seed: u64) -> String {
    to_json(&gen::random_scenario(seed))
}

#[pyclass(module = "jamus")]
struct Broker {
    inner: CoreBroker,
}

#[pymethods]
impl Broker {
    #[new]
    fn new(capacity: &str) -> PyResult<Self> {
        let config: CapacityConfig = parse("capacity", capacity)?;
        let capacity = PlatformCapacity::from_config(&config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: CoreBroker::new(capacity),
        })
    }

    fn evaluate(&self, contract: &str) -> PyResult<String> {
        let c: Contract = parse("contract", contract)?;
        let report = self.inner.evaluate(&c).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(to_json(&report))
    }

    /// Returns the reservation id, or `None` with the report when rejected.
    fn subscribe(&mut self, holder: &str, contract: &str) -> PyResult<(Option<u64>, String)> {
        let c: Contract = parse("contract", contract)?;
        match self.inner.subscribe(&ComponentId::new(holder), &c) {
            Ok(SubscribeOutcome::Reserved(r)) => Ok((Some(r.id.0), to_json(&r))),
            Ok(SubscribeOutcome::Rejected(report)) => Ok((None, to_json(&report))),
            Err(e) => Err(PyValueError::new_err(e.to_string())),
        }
    }

    fn release(&mut self, reservation: u64) -> PyResult<()> {
        self.inner
            .release(ReservationId(reservation))
            .map_err(|e| PyKeyError::new_err(e.to_string()))
    }

    /// Returns JSON with the report, the amended contract and the
    /// reservation delta (both null on rejection).
    fn evaluate_amendment(&mut self, contract: &str, reservation: u64, amendment: &str) -> PyResult<String> {
        let c: Contract = parse("contract", contract)?;
        let a: Amendment = parse("amendment", amendment)?;
        let out = self
            .inner
            .evaluate_amendment(&c, ReservationId(reservation), &a)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(json!({
            "report": out.report,
            "amended": out.amended,
            "delta": out.delta,
        })
        .to_string())
    }

    fn capacity(&self) -> String {
        to_json(self.inner.capacity())
    }

    fn is_conserved(&self) -> bool {
        self.inner.is_conserved()
    }
}

/// One supervised component, driven directly without a broker.
#[pyclass(unsendable, module = "jamus")]
struct Container {
    inner: CoreContainer,
}

fn access_kind(name: &str) -> PyResult<AccessKind> {
    AccessKind::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown access kind {name:?}")))
}

#[pymethods]
impl Container {
    #[new]
    fn new(component: &str) -> Self {
        Self {
            inner: CoreContainer::new(ComponentId::new(component)),
        }
    }

    #[pyo3(signature = (contract, sanctions="[]"))]
    fn configure(&mut self, contract: &str, sanctions: &str) -> PyResult<()> {
        let c: Contract = parse("contract", contract)?;
        let s: Vec<Sanction> = parse("sanctions", sanctions)?;
        self.inner.configure(&c, s, None).map_err(container_err)
    }

    fn reconfigure(&mut self, contract: &str) -> PyResult<()> {
        let c: Contract = parse("contract", contract)?;
        self.inner.reconfigure(&c).map_err(container_err)
    }

    fn seed_file(&mut self, path: &str, size: u64) -> PyResult<()> {
        let p = jamus_core::contracts::VPath::parse(path).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.seed_file(p, size);
        Ok(())
    }

    /// `mode` is "r", "w" or "rw".
    #[pyo3(signature = (path, mode="rw"))]
    fn open_file(&mut self, path: &str, mode: &str) -> PyResult<u32> {
        let (read, write) = match mode {
            "r" => (true, false),
            "w" => (false, true),
            "rw" => (true, true),
            other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
        };
        let h = self
            .inner
            .open_file(path, AccessPermission::File { read, write })
            .map_err(container_err)?;
        Ok(h.0)
    }

    fn open_socket(&mut self, host: &str, port: u16) -> PyResult<u32> {
        Ok(self.inner.open_socket(host, port).map_err(container_err)?.0)
    }

    /// Returns the verdict, e.g. "allow" or "reject:quota".
    fn access(&mut self, handle: u32, access: &str, amount: u64) -> PyResult<String> {
        let v = self
            .inner
            .access(HandleId(handle), access_kind(access)?, amount)
            .map_err(container_err)?;
        Ok(v.to_string())
    }

    fn allocate(&mut self, amount: u64) -> PyResult<String> {
        Ok(self.inner.allocate(amount).map_err(container_err)?.to_string())
    }

    fn free(&mut self, amount: u64) -> PyResult<String> {
        Ok(self.inner.free(amount).map_err(container_err)?.to_string())
    }

    fn close(&mut self, handle: u32) -> PyResult<()> {
        self.inner.close(HandleId(handle)).map_err(container_err)
    }

    fn stop(&mut self) -> PyResult<()> {
        self.inner.stop().map_err(container_err)
    }

    fn handle_state(&self, handle: u32) -> Option<String> {
        self.inner
            .handle_state(HandleId(handle))
            .map(|s| to_json(&s).trim_matches('"').to_owned())
    }

    fn violations(&self) -> String {
        to_json(&self.inner.violations())
    }

    fn sanction_log(&self) -> String {
        to_json(&self.inner.sanction_log())
    }

    fn usage_report(&self) -> String {
        to_json(&self.inner.usage_report())
    }
}

#[pymodule]
fn jamus(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RunResult>()?;
    m.add_class::<Broker>()?;
    m.add_class::<Container>()?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(verify_trace, m)?)?;
    m.add_function(wrap_pyfunction!(random_scenario, m)?)?;
    Ok(())
}
