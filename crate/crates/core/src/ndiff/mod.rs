//! Miniature differentiable engine for scalar potentials over `(x, t)`.
//!
//! A [`Field`] answers *jet* queries: the value, the spatial gradient, the
//! time derivative and a (partial) spatial Laplacian at one point, all exact
//! for the function it represents. Parameter gradients of arbitrary scalar
//! expressions of those quantities are obtained by recording the expression
//! on a [`Graph`] and calling [`Graph::param_grad`]: the graph accumulates
//! adjoints for every queried jet component, then each field pulls those
//! adjoints back through its own forward-mode derivative computation
//! (reverse-over-forward).

mod adam;
mod analytic;
mod checkpoint;
mod graph;
mod net;

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::Result;

pub use adam::{AdamConfig, AdamState, ADAM_EPSILON};
pub use analytic::QuadraticField;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use graph::{FieldBatch, Graph, Var};
pub use net::{Activation, ControlField, NetShape, DEFAULT_INIT_SEED};

/// Which derivative components a query needs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Need {
    /// Spatial gradient over all `dim()` coordinates.
    pub grad: bool,
    /// Time derivative.
    pub time: bool,
    /// Laplacian restricted to these spatial coordinates.
    pub laplacian: Option<Range<usize>>,
}

impl Need {
    pub fn value() -> Self {
        Self::default()
    }

    pub fn grad() -> Self {
        Self {
            grad: true,
            ..Self::default()
        }
    }

    /// Gradient, time derivative and full spatial Laplacian.
    pub fn all(dim: usize) -> Self {
        Self {
            grad: true,
            time: true,
            laplacian: Some(0..dim),
        }
    }

    pub fn with_time(mut self) -> Self {
        self.time = true;
        self
    }

    pub fn with_laplacian(mut self, dims: Range<usize>) -> Self {
        self.laplacian = Some(dims);
        self
    }
}

/// Result of a jet query. Components that were not requested are zero
/// (`grad` is empty when neither gradient nor Laplacian was requested).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub dt: f64,
    pub laplacian: f64,
}

/// Adjoints (cotangents) for the components of a [`Jet`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JetBar {
    pub value: f64,
    pub grad: Vec<f64>,
    pub dt: f64,
    pub laplacian: f64,
}

impl JetBar {
    pub fn is_zero(&self) -> bool {
        self.value == 0.0
            && self.dt == 0.0
            && self.laplacian == 0.0
            && self.grad.iter().all(|&g| g == 0.0)
    }
}

/// Instrumentation counters, bumped once per queried point.
#[derive(Debug, Default)]
pub struct QueryCounters {
    values: AtomicU64,
    grads: AtomicU64,
    time_derivs: AtomicU64,
    laplacians: AtomicU64,
}

impl QueryCounters {
    pub fn record(&self, need: &Need) {
        self.values.fetch_add(1, Ordering::Relaxed);
        if need.grad {
            self.grads.fetch_add(1, Ordering::Relaxed);
        }
        if need.time {
            self.time_derivs.fetch_add(1, Ordering::Relaxed);
        }
        if need.laplacian.is_some() {
            self.laplacians.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn values(&self) -> u64 {
        self.values.load(Ordering::Relaxed)
    }

    pub fn grads(&self) -> u64 {
        self.grads.load(Ordering::Relaxed)
    }

    pub fn time_derivs(&self) -> u64 {
        self.time_derivs.load(Ordering::Relaxed)
    }

    pub fn laplacians(&self) -> u64 {
        self.laplacians.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.values.store(0, Ordering::Relaxed);
        self.grads.store(0, Ordering::Relaxed);
        self.time_derivs.store(0, Ordering::Relaxed);
        self.laplacians.store(0, Ordering::Relaxed);
    }
}

impl Clone for QueryCounters {
    fn clone(&self) -> Self {
        Self {
            values: AtomicU64::new(self.values()),
            grads: AtomicU64::new(self.grads()),
            time_derivs: AtomicU64::new(self.time_derivs()),
            laplacians: AtomicU64::new(self.laplacians()),
        }
    }
}

/// A scalar potential `f(x, t)` with `x` in `R^dim`.
///
/// Implementations must be pure: identical inputs give bit-identical jets.
pub trait Field: Send + Sync {
    /// Spatial dimension.
    fn dim(&self) -> usize;

    fn num_params(&self) -> usize;

    fn jet(&self, x: &[f64], t: f64, need: &Need) -> Result<Jet>;

    /// Accumulates `sum(bar * d jet / d params)` into `grad`.
    fn jet_vjp(&self, x: &[f64], t: f64, need: &Need, bar: &JetBar, grad: &mut [f64])
        -> Result<()>;

    fn counters(&self) -> &QueryCounters;
}

pub(crate) fn check_point(x: &[f64], t: f64, dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(crate::Error::Shape(format!(
            "point has {} coordinates, field expects {}",
            x.len(),
            dim
        )));
    }
    if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::Domain(format!(
            "non-finite input x={x:?} t={t}"
        )));
    }
    Ok(())
}
