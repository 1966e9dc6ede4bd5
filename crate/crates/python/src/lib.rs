//! Python bindings: privacy curves, the block ledger, the binary counter
//! and the simulator.

use std::collections::BTreeMap;

use dpf_core::ledger::{
    self, AccountingMode, Allocation, BlockDescriptor, BlockId, BlockSelector, Budget, ClaimId,
    DemandVector, Interval,
};
use dpf_core::rdp::{self, AlphaGrid, RdpCurve};
use dpf_core::semantics::{self, CounterConfig};
use dpf_core::sim::{self, SimConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn grid_named(name: &str) -> PyResult<AlphaGrid> {
    AlphaGrid::by_name(name).ok_or_else(|| PyValueError::new_err(format!("unknown grid `{name}`")))
}

/// An RDP curve: ε(α) over a grid of orders.
#[pyclass(name = "Curve", module = "dpfsched", frozen, from_py_object)]
#[derive(Clone)]
struct PyCurve {
    inner: RdpCurve,
}

#[pymethods]
impl PyCurve {
    #[new]
    #[pyo3(signature = (orders, eps))]
    fn new(orders: Vec<f64>, eps: Vec<f64>) -> PyResult<Self> {
        let grid = AlphaGrid::new(orders).map_err(value_err)?;
        Ok(PyCurve {
            inner: RdpCurve::new(grid, eps).map_err(value_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (sigma, grid = "extended"))]
    fn gaussian(sigma: f64, grid: &str) -> PyResult<Self> {
        let inner = rdp::gaussian_curve(sigma, &grid_named(grid)?).map_err(value_err)?;
        Ok(PyCurve { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (eps0, grid = "extended"))]
    fn laplace(eps0: f64, grid: &str) -> PyResult<Self> {
        let inner = rdp::laplace_curve(eps0, &grid_named(grid)?).map_err(value_err)?;
        Ok(PyCurve { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (eps0, grid = "extended"))]
    fn pure(eps0: f64, grid: &str) -> PyResult<Self> {
        let inner = rdp::pure_dp_curve(eps0, &grid_named(grid)?).map_err(value_err)?;
        Ok(PyCurve { inner })
    }

    /// Binary-tree counter with total ε over `horizon` intervals.
    #[staticmethod]
    #[pyo3(signature = (eps, horizon, grid = "extended"))]
    fn counter(eps: f64, horizon: u64, grid: &str) -> PyResult<Self> {
        let inner = semantics::binary_mechanism_rdp_curve(eps, horizon, &grid_named(grid)?)
            .map_err(value_err)?;
        Ok(PyCurve { inner })
    }

    #[getter]
    fn orders(&self) -> Vec<f64> {
        self.inner.grid().orders().to_vec()
    }

    #[getter]
    fn eps(&self) -> Vec<f64> {
        self.inner.eps().to_vec()
    }

    fn scale(&self, k: f64) -> Self {
        PyCurve {
            inner: self.inner.scale(k),
        }
    }

    fn __add__(&self, other: &PyCurve) -> PyResult<Self> {
        Ok(PyCurve {
            inner: self.inner.add(&other.inner).map_err(value_err)?,
        })
    }

    /// Best (ε, α) at the given δ.
    fn to_dp(&self, delta: f64) -> PyResult<(f64, f64)> {
        let (g, alpha) = rdp::rdp_to_dp(&self.inner, delta).map_err(value_err)?;
        Ok((g.epsilon, alpha))
    }

    fn __len__(&self) -> usize {
        self.inner.grid().len()
    }

    fn __repr__(&self) -> String {
        format!("Curve(orders={:?}, eps={:?})", self.orders(), self.eps())
    }
}

/// Sum of curves over a shared grid.
#[pyfunction]
fn compose(curves: Vec<PyCurve>) -> PyResult<PyCurve> {
    let first = curves
        .first()
        .ok_or_else(|| PyValueError::new_err("compose needs at least one curve"))?;
    let grid = first.inner.grid().clone();
    let inner: Vec<RdpCurve> = curves.into_iter().map(|c| c.inner).collect();
    Ok(PyCurve {
        inner: rdp::compose(&grid, &inner).map_err(value_err)?,
    })
}

#[derive(FromPyObject)]
enum BudgetArg {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl BudgetArg {
    fn into_budget(self) -> Budget {
        match self {
            BudgetArg::Scalar(x) => Budget::scalar(x),
            BudgetArg::Vector(v) => Budget::from_values(v),
        }
    }
}

fn everything() -> BlockSelector {
    BlockSelector::Time {
        time: Interval::new(0, u64::MAX),
    }
}

/// Budget ledger over time-window blocks.
#[pyclass(name = "Ledger", module = "dpfsched")]
struct PyLedger {
    inner: ledger::Ledger,
}

#[pymethods]
impl PyLedger {
    /// `mode` is "basic" or "renyi"; `grid` names the order grid for Rényi.
    #[new]
    #[pyo3(signature = (mode = "basic", grid = "extended"))]
    fn new(mode: &str, grid: &str) -> PyResult<Self> {
        let mode = match mode {
            "basic" => AccountingMode::Basic,
            "renyi" => AccountingMode::Renyi {
                grid: grid_named(grid)?,
            },
            other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
        };
        Ok(PyLedger {
            inner: ledger::Ledger::new(mode),
        })
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims()
    }

    /// Adds a block for the time window [start, end) with all budget locked.
    #[pyo3(signature = (start, end, budget, tick = 0))]
    fn create_block(&mut self, start: u64, end: u64, budget: BudgetArg, tick: u64) -> PyResult<u64> {
        let desc = BlockDescriptor::TimeWindow {
            time: Interval::new(start, end),
        };
        let id = self
            .inner
            .create_block(desc, budget.into_budget(), tick)
            .map_err(value_err)?;
        Ok(id.0)
    }

    /// Pending claim demanding `{block: budget}`.
    #[pyo3(signature = (demand, tick = 0))]
    fn submit(&mut self, demand: BTreeMap<u64, BudgetArg>, tick: u64) -> PyResult<u64> {
        let d: DemandVector = demand
            .into_iter()
            .map(|(b, x)| (BlockId(b), x.into_budget()))
            .collect();
        let id = self.inner.submit_claim(everything(), d, tick).map_err(value_err)?;
        Ok(id.0)
    }

    fn can_satisfy(&self, claim: u64) -> PyResult<bool> {
        let c = self
            .inner
            .claim(ClaimId(claim))
            .ok_or_else(|| PyValueError::new_err(format!("unknown claim {claim}")))?;
        Ok(self.inner.can_satisfy(&c.demand))
    }

    /// True if granted; False leaves the ledger unchanged.
    fn allocate(&mut self, claim: u64) -> PyResult<bool> {
        let a = self.inner.allocate(ClaimId(claim)).map_err(value_err)?;
        Ok(a == Allocation::Granted)
    }

    fn consume_all(&mut self, claim: u64) -> PyResult<()> {
        self.inner.consume_all(ClaimId(claim)).map_err(value_err)
    }

    fn release(&mut self, claim: u64) -> PyResult<()> {
        self.inner.release(ClaimId(claim)).map_err(value_err)
    }

    fn deny(&mut self, claim: u64) -> PyResult<()> {
        self.inner.deny(ClaimId(claim)).map_err(value_err)
    }

    fn unlock(&mut self, block: u64, amount: BudgetArg) -> PyResult<Vec<f64>> {
        let moved = self
            .inner
            .unlock(BlockId(block), &amount.into_budget())
            .map_err(value_err)?;
        Ok(moved.values().to_vec())
    }

    fn unlock_fraction(&mut self, block: u64, fraction: f64) -> PyResult<Vec<f64>> {
        let moved = self
            .inner
            .unlock_fraction(BlockId(block), fraction)
            .map_err(value_err)?;
        Ok(moved.values().to_vec())
    }

    /// Registers of one block as a dict of lists.
    fn registers(&self, block: u64) -> PyResult<BTreeMap<&'static str, Vec<f64>>> {
        let b = self
            .inner
            .block(BlockId(block))
            .ok_or_else(|| PyValueError::new_err(format!("unknown block {block}")))?;
        let r = &b.registers;
        Ok(BTreeMap::from([
            ("total", r.total.values().to_vec()),
            ("locked", r.locked.values().to_vec()),
            ("unlocked", r.unlocked.values().to_vec()),
            ("allocated", r.allocated.values().to_vec()),
            ("consumed", r.consumed.values().to_vec()),
        ]))
    }

    fn claim_state(&self, claim: u64) -> PyResult<String> {
        let c = self
            .inner
            .claim(ClaimId(claim))
            .ok_or_else(|| PyValueError::new_err(format!("unknown claim {claim}")))?;
        Ok(format!("{:?}", c.state))
    }

    /// Invariant violations, empty when the ledger is consistent.
    fn audit(&self) -> Vec<String> {
        self.inner.audit().iter().map(|v| v.to_string()).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(value_err)
    }
}

/// Binary-tree streaming counter.
#[pyclass(name = "BinaryCounter", module = "dpfsched")]
struct PyCounter {
    inner: semantics::BinaryCounter,
}

#[pymethods]
impl PyCounter {
    #[new]
    #[pyo3(signature = (eps, horizon, beta = 0.001, seed = 0, noiseless = false))]
    fn new(eps: f64, horizon: u64, beta: f64, seed: u64, noiseless: bool) -> PyResult<Self> {
        let mut cfg = CounterConfig::new(eps, horizon, beta);
        cfg.noiseless = noiseless;
        Ok(PyCounter {
            inner: semantics::BinaryCounter::new(cfg, seed).map_err(value_err)?,
        })
    }

    fn update(&mut self, new_users: u64) -> PyResult<()> {
        self.inner.counter_update(new_users).map_err(value_err)
    }

    fn release(&self, t: u64) -> PyResult<f64> {
        self.inner.counter_release(t).map_err(value_err)
    }

    fn lower_bound(&self, t: u64) -> PyResult<u64> {
        self.inner.lower_bound(t).map_err(value_err)
    }

    fn upper_bound(&self, t: u64) -> PyResult<u64> {
        self.inner.upper_bound(t).map_err(value_err)
    }

    #[getter]
    fn true_count(&self) -> u64 {
        self.inner.true_count()
    }

    #[getter]
    fn intervals(&self) -> u64 {
        self.inner.intervals()
    }

    #[getter]
    fn bound_offset(&self) -> f64 {
        self.inner.config().bound_offset()
    }
}

/// Runs a simulation from a JSON config. Returns `(metrics, events)`:
/// the metrics as a dict and the events as a list of dicts.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, config_json: &str) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let cfg: SimConfig = serde_json::from_str(config_json).map_err(value_err)?;
    cfg.validate().map_err(value_err)?;
    let r = py.detach(|| sim::run(&cfg)).map_err(|e| match e {
        sim::SimError::Audit { .. } => PyRuntimeError::new_err(e.to_string()),
        other => value_err(other),
    })?;
    let json = py.import("json")?;
    let metrics = serde_json::to_string(&r.metrics).map_err(value_err)?;
    let events = serde_json::to_string(&r.events).map_err(value_err)?;
    Ok((
        json.call_method1("loads", (metrics,))?,
        json.call_method1("loads", (events,))?,
    ))
}

#[pymodule]
fn dpfsched(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCurve>()?;
    m.add_class::<PyLedger>()?;
    m.add_class::<PyCounter>()?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add("SCHEMA_VERSION", sim::SCHEMA_VERSION)?;
    Ok(())
}
