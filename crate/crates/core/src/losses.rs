//! Discretized training objectives.
//!
//! Notation: `x` is a controlled batch, `y` an uncontrolled reference batch,
//! `D_k = x_{k+1} - x_k`, `g_k = grad phi(x_k, k h)`,
//! `G_k = grad psi(x_{k+1}, (k+1) h)`, `s2 = sigma^2`.
//!
//! The quadratic differences of the printed objectives are expanded before
//! evaluation, e.g.
//!
//! ```text
//! ( |x_k - x_{k+1} - s2 h G_k|^2 - |D_k - s2 h g_k|^2 ) / (2 s2 h)
//!     = D_k.(G_k + g_k) + s2 h/2 (|G_k|^2 - |g_k|^2)
//! ```
//!
//! which is algebraically identical and avoids cancelling two `O(1/h)`
//! terms.
//!
//! | kind               | divergence part            | regularizer part                      |
//! |--------------------|----------------------------|---------------------------------------|
//! | `pinn`             | log-variance divergence    | HJB residual along `x`                |
//! | `variance`         | log-variance divergence    | `Var_n[...] / (K+1)` along `y`        |
//! | `td`               | log-variance divergence    | per-step SDE residual along `y`       |
//! | `separate_control` | endpoint variances (1), (2) | path variances `((3) + (4)) / (K+1)` |
//! | `kl_energy`        | mean of the bracket        | `h/n sum s2/2 |g_k|^2`                |
//!
//! and `total = divergence + lambda * regularizer` throughout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ndiff::{Field, FieldBatch, Graph, Need, Var};
use crate::paths::TrajectoryBatch;
use crate::targets::{PriorSpec, TargetSpec};
use crate::{Error, Result};

/// A log-density evaluated pointwise.
pub trait LogDensity: Sync {
    fn log_density(&self, x: &[f64]) -> f64;
}

impl LogDensity for TargetSpec {
    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_mu(x)
    }
}

impl LogDensity for PriorSpec {
    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_nu(x)
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> LogDensity for F {
    fn log_density(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    Pinn,
    Variance,
    Td,
    SeparateControl,
    KlEnergy,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 5] = [
        RegularizerKind::Pinn,
        RegularizerKind::Variance,
        RegularizerKind::Td,
        RegularizerKind::SeparateControl,
        RegularizerKind::KlEnergy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegularizerKind::Pinn => "pinn",
            RegularizerKind::Variance => "variance",
            RegularizerKind::Td => "td",
            RegularizerKind::SeparateControl => "separate_control",
            RegularizerKind::KlEnergy => "kl_energy",
        }
    }

    /// Whether the loss consumes an uncontrolled reference batch.
    pub fn needs_reference(self) -> bool {
        matches!(self, RegularizerKind::Variance | RegularizerKind::Td)
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegularizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Forward,
    Backward,
    Both,
}

/// Which control a single-field regularizer acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Drift {
    Forward,
    Backward,
}

impl Direction {
    fn drifts(self) -> &'static [Drift] {
        match self {
            Direction::Forward => &[Drift::Forward],
            Direction::Backward => &[Drift::Backward],
            Direction::Both => &[Drift::Forward, Drift::Backward],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: RegularizerKind,
    pub lambda: f64,
    #[serde(default)]
    pub direction: Direction,
    /// Backward HJB residual with `+ s2/2 |grad psi|^2` instead of `-`.
    #[serde(default)]
    pub printed_backward_pinn: bool,
}

impl LossConfig {
    pub fn new(kind: RegularizerKind, lambda: f64) -> Self {
        Self {
            kind,
            lambda,
            direction: Direction::Forward,
            printed_backward_pinn: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub divergence_part: f64,
    pub regularizer_part: f64,
    /// The four separately-controlled variance terms, empty for other kinds.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<f64>,
}

/// Graph handles of a recorded loss.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub divergence: Var,
    pub regularizer: Var,
    pub terms: Vec<Var>,
}

impl LossVars {
    pub fn value(&self, g: &Graph<'_>) -> Result<LossValue> {
        g.check()?;
        Ok(LossValue {
            total: g.value(self.total),
            divergence_part: g.value(self.divergence),
            regularizer_part: g.value(self.regularizer),
            terms: self.terms.iter().map(|&v| g.value(v)).collect(),
        })
    }
}

/// Leaves of one field at every state of every trajectory.
#[derive(Clone, Copy, Debug)]
pub struct PathLeaves {
    batch: FieldBatch,
    states: usize,
    dim: usize,
}

impl PathLeaves {
    fn idx(&self, i: usize, k: usize) -> usize {
        i * self.states + k
    }

    pub fn value(&self, i: usize, k: usize) -> Var {
        self.batch.value(self.idx(i, k))
    }

    pub fn grad(&self, i: usize, k: usize) -> Vec<Var> {
        let p = self.idx(i, k);
        (0..self.dim).map(|j| self.batch.grad(p, j)).collect()
    }

    pub fn dt(&self, i: usize, k: usize) -> Var {
        self.batch.dt(self.idx(i, k))
    }

    pub fn lap(&self, i: usize, k: usize) -> Var {
        self.batch.lap(self.idx(i, k))
    }
}

/// Queries `field` at all `K + 2` states of every trajectory.
pub fn query_path<'f>(
    g: &mut Graph<'f>,
    traj: &TrajectoryBatch,
    field: &'f dyn Field,
    need: &Need,
) -> Result<PathLeaves> {
    if field.dim() != traj.dim {
        return Err(Error::Shape(format!(
            "field dimension {} differs from trajectory dimension {}",
            field.dim(),
            traj.dim
        )));
    }
    let (pts, ts) = traj.stacked(0..traj.num_states());
    let batch = g.query(field, &pts, &ts, need)?;
    Ok(PathLeaves {
        batch,
        states: traj.num_states(),
        dim: traj.dim,
    })
}

fn require_batch(traj: &TrajectoryBatch) -> Result<()> {
    if traj.n < 2 {
        return Err(Error::DegenerateBatch {
            needed: 2,
            got: traj.n,
        });
    }
    Ok(())
}

fn require_reference(traj: &TrajectoryBatch) -> Result<()> {
    if traj.controlled {
        return Err(Error::Misuse(
            "this regularizer expects an uncontrolled reference batch".into(),
        ));
    }
    Ok(())
}

fn increment(traj: &TrajectoryBatch, i: usize, k: usize) -> Vec<f64> {
    traj.state(i, k + 1)
        .iter()
        .zip(traj.state(i, k))
        .map(|(b, a)| b - a)
        .collect()
}

/// Per-trajectory log-likelihood-ratio brackets of the log-variance
/// divergence:
///
/// ```text
/// log nu(x_0) - log mu(x_{K+1}) + sum_k D_k.(G_k + g_k) + s2 h/2 (|G_k|^2 - |g_k|^2)
/// ```
///
/// `phi` needs gradients at states `0..=K`, `psi` at `1..=K+1`.
pub fn logvar_brackets(
    g: &mut Graph<'_>,
    traj: &TrajectoryBatch,
    phi: &PathLeaves,
    psi: &PathLeaves,
    nu: &dyn LogDensity,
    mu: &dyn LogDensity,
) -> Vec<Var> {
    let half = 0.5 * traj.sigma * traj.sigma * traj.h;
    let kk = traj.steps;
    (0..traj.n)
        .map(|i| {
            let mut xs = Vec::new();
            let mut cs = Vec::new();
            for k in 0..=kk {
                let d = increment(traj, i, k);
                let gp = phi.grad(i, k);
                let gq = psi.grad(i, k + 1);
                for j in 0..traj.dim {
                    xs.push(gq[j]);
                    cs.push(d[j]);
                    xs.push(gp[j]);
                    cs.push(d[j]);
                }
                let nq = g.norm_sq(&gq);
                let np = g.norm_sq(&gp);
                xs.push(nq);
                cs.push(half);
                xs.push(np);
                cs.push(-half);
            }
            let body = g.lin(&xs, &cs);
            let c = nu.log_density(traj.state(i, 0)) - mu.log_density(traj.state(i, kk + 1));
            g.add_const(body, c)
        })
        .collect()
}

/// Forward factorization brackets along a batch:
///
/// ```text
/// phi(y_{K+1}) - phi(y_0) + sum_k ( -D_k.grad phi(y_k) + s2 h/2 |grad phi(y_k)|^2 )
/// ```
pub fn forward_factorization_brackets(
    g: &mut Graph<'_>,
    traj: &TrajectoryBatch,
    phi: &PathLeaves,
) -> Vec<Var> {
    let half = 0.5 * traj.sigma * traj.sigma * traj.h;
    let kk = traj.steps;
    (0..traj.n)
        .map(|i| {
            let mut xs = vec![phi.value(i, kk + 1), phi.value(i, 0)];
            let mut cs = vec![1.0, -1.0];
            for k in 0..=kk {
                let d = increment(traj, i, k);
                let gp = phi.grad(i, k);
                for j in 0..traj.dim {
                    xs.push(gp[j]);
                    cs.push(-d[j]);
                }
                let np = g.norm_sq(&gp);
                xs.push(np);
                cs.push(half);
            }
            g.lin(&xs, &cs)
        })
        .collect()
}

/// Backward factorization brackets along a batch:
///
/// ```text
/// psi(y_{K+1}) - psi(y_0) + sum_k ( -D_k.grad psi(y_{k+1}) - s2 h/2 |grad psi(y_{k+1})|^2 )
/// ```
pub fn backward_factorization_brackets(
    g: &mut Graph<'_>,
    traj: &TrajectoryBatch,
    psi: &PathLeaves,
) -> Vec<Var> {
    let half = 0.5 * traj.sigma * traj.sigma * traj.h;
    let kk = traj.steps;
    (0..traj.n)
        .map(|i| {
            let mut xs = vec![psi.value(i, kk + 1), psi.value(i, 0)];
            let mut cs = vec![1.0, -1.0];
            for k in 0..=kk {
                let d = increment(traj, i, k);
                let gq = psi.grad(i, k + 1);
                for j in 0..traj.dim {
                    xs.push(gq[j]);
                    cs.push(-d[j]);
                }
                let nq = g.norm_sq(&gq);
                xs.push(nq);
                cs.push(-half);
            }
            g.lin(&xs, &cs)
        })
        .collect()
}

/// `(1/(K+1)) Var_n[logvar bracket]`.
pub fn record_logvar_divergence<'f>(
    g: &mut Graph<'f>,
    traj: &TrajectoryBatch,
    phi: &PathLeaves,
    psi: &PathLeaves,
    nu: &dyn LogDensity,
    mu: &dyn LogDensity,
) -> Result<Var> {
    require_batch(traj)?;
    let br = logvar_brackets(g, traj, phi, psi, nu, mu);
    let v = g.var_pop(&br);
    Ok(g.scale(v, 1.0 / (traj.steps + 1) as f64))
}

/// HJB residual `h/n sum_{i,k} |r(x_k, k h)|` with
/// `r = dt phi + s2/2 lap phi + s2/2 |grad phi|^2` (forward) or
/// `r = dt psi - s2/2 lap psi - s2/2 |grad psi|^2` (backward).
pub fn record_pinn<'f>(
    g: &mut Graph<'f>,
    traj: &TrajectoryBatch,
    field: &'f dyn Field,
    drift: Drift,
    printed_backward: bool,
) -> Result<Var> {
    let d = traj.dim;
    let leaves = query_path(g, traj, field, &Need::all(d))?;
    let half = 0.5 * traj.sigma * traj.sigma;
    let (c_lap, c_sq) = match drift {
        Drift::Forward => (half, half),
        Drift::Backward if printed_backward => (-half, half),
        Drift::Backward => (-half, -half),
    };
    let mut res = Vec::with_capacity(traj.n * (traj.steps + 1));
    for i in 0..traj.n {
        for k in 0..=traj.steps {
            let gr = leaves.grad(i, k);
            let n2 = g.norm_sq(&gr);
            let r = g.lin(&[leaves.dt(i, k), leaves.lap(i, k), n2], &[1.0, c_lap, c_sq]);
            res.push(g.abs(r));
        }
    }
    let s = g.sum(&res);
    Ok(g.scale(s, traj.h / traj.n as f64))
}

/// `(1/(K+1)) Var_n` of the factorization bracket along a reference batch.
pub fn record_variance_regularizer<'f>(
    g: &mut Graph<'f>,
    reference: &TrajectoryBatch,
    field: &'f dyn Field,
    drift: Drift,
) -> Result<Var> {
    require_reference(reference)?;
    require_batch(reference)?;
    let leaves = query_path(g, reference, field, &Need::grad())?;
    let br = match drift {
        Drift::Forward => forward_factorization_brackets(g, reference, &leaves),
        Drift::Backward => backward_factorization_brackets(g, reference, &leaves),
    };
    let v = g.var_pop(&br);
    Ok(g.scale(v, 1.0 / (reference.steps + 1) as f64))
}

/// Mean-of-squares alternative to the forward variance regularizer,
/// `(1/n) sum_i (phi(y_{K+1}) - phi(y_0) + s2 h/2 sum_k |grad phi(y_k)|^2)^2`,
/// which drops the zero-mean stochastic-integral term.
pub fn record_moment_regularizer<'f>(
    g: &mut Graph<'f>,
    reference: &TrajectoryBatch,
    field: &'f dyn Field,
) -> Result<Var> {
    require_reference(reference)?;
    let leaves = query_path(g, reference, field, &Need::grad())?;
    let half = 0.5 * reference.sigma * reference.sigma * reference.h;
    let kk = reference.steps;
    let sq: Vec<Var> = (0..reference.n)
        .map(|i| {
            let mut xs = vec![leaves.value(i, kk + 1), leaves.value(i, 0)];
            let mut cs = vec![1.0, -1.0];
            for k in 0..=kk {
                let gr = leaves.grad(i, k);
                xs.push(g.norm_sq(&gr));
                cs.push(half);
            }
            let b = g.lin(&xs, &cs);
            g.square(b)
        })
        .collect();
    Ok(g.mean(&sq))
}

/// TD residual `h/n sum_{i,k} |r_k|` along a reference batch with cached
/// noise `z_k`:
///
/// ```text
/// forward:  phi(y_{k+1}) - phi(y_k) + s2 h/2 |grad phi(y_k)|^2 - sigma sqrt(h) grad phi(y_k).z_k
/// backward: psi(y_{k+1}) - psi(y_k) - s2 h/2 |grad psi(y_k)|^2 - h s2 lap psi(y_k)
///           - sigma sqrt(h) grad psi(y_k).z_k
/// ```
pub fn record_td_regularizer<'f>(
    g: &mut Graph<'f>,
    reference: &TrajectoryBatch,
    field: &'f dyn Field,
    drift: Drift,
) -> Result<Var> {
    require_reference(reference)?;
    let d = reference.dim;
    let need = match drift {
        Drift::Forward => Need::grad(),
        Drift::Backward => Need::grad().with_laplacian(0..d),
    };
    let leaves = query_path(g, reference, field, &need)?;
    let s2h = reference.sigma * reference.sigma * reference.h;
    let sq = reference.sigma * reference.h.sqrt();
    let sign = match drift {
        Drift::Forward => 1.0,
        Drift::Backward => -1.0,
    };
    let mut res = Vec::with_capacity(reference.n * (reference.steps + 1));
    for i in 0..reference.n {
        for k in 0..=reference.steps {
            let gr = leaves.grad(i, k);
            let z = reference.noise(i, k);
            let n2 = g.norm_sq(&gr);
            let mut xs = vec![leaves.value(i, k + 1), leaves.value(i, k), n2];
            let mut cs = vec![1.0, -1.0, sign * 0.5 * s2h];
            for j in 0..d {
                xs.push(gr[j]);
                cs.push(-sq * z[j]);
            }
            if drift == Drift::Backward {
                xs.push(leaves.lap(i, k));
                cs.push(-s2h);
            }
            let r = g.lin(&xs, &cs);
            res.push(g.abs(r));
        }
    }
    let s = g.sum(&res);
    Ok(g.scale(s, reference.h / reference.n as f64))
}

/// The four separately-controlled variance terms along a controlled batch:
///
/// ```text
/// (1) Var_n[psi + phi - log mu](x_{K+1})
/// (2) Var_n[psi + phi - log nu](x_0)
/// (3) Var_n[backward factorization bracket of psi]
/// (4) Var_n[forward factorization bracket of phi]
/// ```
///
/// Term (4) is printed with the opposite overall sign, which the variance
/// does not see.
pub fn separate_control_terms(
    g: &mut Graph<'_>,
    traj: &TrajectoryBatch,
    phi: &PathLeaves,
    psi: &PathLeaves,
    nu: &dyn LogDensity,
    mu: &dyn LogDensity,
) -> Result<[Var; 4]> {
    require_batch(traj)?;
    let kk = traj.steps;
    let end: Vec<Var> = (0..traj.n)
        .map(|i| {
            let s = g.add(psi.value(i, kk + 1), phi.value(i, kk + 1));
            g.add_const(s, -mu.log_density(traj.state(i, kk + 1)))
        })
        .collect();
    let start: Vec<Var> = (0..traj.n)
        .map(|i| {
            let s = g.add(psi.value(i, 0), phi.value(i, 0));
            g.add_const(s, -nu.log_density(traj.state(i, 0)))
        })
        .collect();
    let t1 = g.var_pop(&end);
    let t2 = g.var_pop(&start);
    let b3 = backward_factorization_brackets(g, traj, psi);
    let t3 = g.var_pop(&b3);
    let b4 = forward_factorization_brackets(g, traj, phi);
    let t4 = g.var_pop(&b4);
    Ok([t1, t2, t3, t4])
}

/// Inputs shared by all loss kinds.
pub struct LossInputs<'a> {
    pub controlled: &'a TrajectoryBatch,
    pub reference: Option<&'a TrajectoryBatch>,
    pub nu: &'a dyn LogDensity,
    pub mu: &'a dyn LogDensity,
}

/// Records the configured objective on `g`.
pub fn record_loss<'f>(
    g: &mut Graph<'f>,
    cfg: &LossConfig,
    inputs: &LossInputs<'_>,
    phi: &'f dyn Field,
    psi: &'f dyn Field,
) -> Result<LossVars> {
    cfg.validate()?;
    let traj = inputs.controlled;
    if !traj.controlled {
        return Err(Error::Misuse("the divergence needs a controlled batch".into()));
    }
    require_batch(traj)?;
    let pl = query_path(g, traj, phi, &Need::grad())?;
    let sl = query_path(g, traj, psi, &Need::grad())?;
    let reference = || {
        inputs
            .reference
            .ok_or_else(|| Error::Misuse(format!("loss `{}` needs a reference batch", cfg.kind)))
    };
    let field_of = |d: Drift| -> &'f dyn Field {
        match d {
            Drift::Forward => phi,
            Drift::Backward => psi,
        }
    };
    let mut terms = Vec::new();
    let (divergence, regularizer) = match cfg.kind {
        RegularizerKind::SeparateControl => {
            let t = separate_control_terms(g, traj, &pl, &sl, inputs.nu, inputs.mu)?;
            terms = t.to_vec();
            let div = g.add(t[0], t[1]);
            let paths = g.add(t[2], t[3]);
            let reg = g.scale(paths, 1.0 / (traj.steps + 1) as f64);
            (div, reg)
        }
        RegularizerKind::KlEnergy => {
            let br = logvar_brackets(g, traj, &pl, &sl, inputs.nu, inputs.mu);
            let div = g.mean(&br);
            let mut sq = Vec::with_capacity(traj.n * (traj.steps + 1));
            for i in 0..traj.n {
                for k in 0..=traj.steps {
                    let gr = pl.grad(i, k);
                    sq.push(g.norm_sq(&gr));
                }
            }
            let s = g.sum(&sq);
            let c = 0.5 * traj.sigma * traj.sigma * traj.h / traj.n as f64;
            (div, g.scale(s, c))
        }
        kind => {
            let div = record_logvar_divergence(g, traj, &pl, &sl, inputs.nu, inputs.mu)?;
            let mut regs = Vec::new();
            for &d in cfg.direction.drifts() {
                let r = match kind {
                    RegularizerKind::Pinn => {
                        record_pinn(g, traj, field_of(d), d, cfg.printed_backward_pinn)?
                    }
                    RegularizerKind::Variance => {
                        record_variance_regularizer(g, reference()?, field_of(d), d)?
                    }
                    RegularizerKind::Td => record_td_regularizer(g, reference()?, field_of(d), d)?,
                    _ => unreachable!("handled above"),
                };
                regs.push(r);
            }
            (div, g.sum(&regs))
        }
    };
    let weighted = g.scale(regularizer, cfg.lambda);
    let total = g.add(divergence, weighted);
    Ok(LossVars {
        total,
        divergence,
        regularizer,
        terms,
    })
}

pub fn evaluate_loss(
    cfg: &LossConfig,
    inputs: &LossInputs<'_>,
    phi: &dyn Field,
    psi: &dyn Field,
) -> Result<LossValue> {
    let mut g = Graph::new();
    record_loss(&mut g, cfg, inputs, phi, psi)?.value(&g)
}

pub fn logvar_divergence(
    traj: &TrajectoryBatch,
    phi: &dyn Field,
    psi: &dyn Field,
    nu: &dyn LogDensity,
    mu: &dyn LogDensity,
) -> Result<f64> {
    let mut g = Graph::new();
    let pl = query_path(&mut g, traj, phi, &Need::grad())?;
    let sl = query_path(&mut g, traj, psi, &Need::grad())?;
    let v = record_logvar_divergence(&mut g, traj, &pl, &sl, nu, mu)?;
    g.checked_value(v)
}

pub fn kl_divergence_energy(
    traj: &TrajectoryBatch,
    phi: &dyn Field,
    psi: &dyn Field,
    nu: &dyn LogDensity,
    mu: &dyn LogDensity,
    lambda: f64,
) -> Result<LossValue> {
    let cfg = LossConfig::new(RegularizerKind::KlEnergy, lambda);
    let inputs = LossInputs {
        controlled: traj,
        reference: None,
        nu,
        mu,
    };
    evaluate_loss(&cfg, &inputs, phi, psi)
}

pub fn separate_control_loss(
    traj: &TrajectoryBatch,
    phi: &dyn Field,
    psi: &dyn Field,
    nu: &dyn LogDensity,
    mu: &dyn LogDensity,
    lambda: f64,
) -> Result<LossValue> {
    let cfg = LossConfig::new(RegularizerKind::SeparateControl, lambda);
    let inputs = LossInputs {
        controlled: traj,
        reference: None,
        nu,
        mu,
    };
    evaluate_loss(&cfg, &inputs, phi, psi)
}

pub fn pinn_regularizer(traj: &TrajectoryBatch, field: &dyn Field, drift: Drift) -> Result<f64> {
    let mut g = Graph::new();
    let v = record_pinn(&mut g, traj, field, drift, false)?;
    g.checked_value(v)
}

pub fn variance_regularizer(
    reference: &TrajectoryBatch,
    field: &dyn Field,
    drift: Drift,
) -> Result<f64> {
    let mut g = Graph::new();
    let v = record_variance_regularizer(&mut g, reference, field, drift)?;
    g.checked_value(v)
}

pub fn td_regularizer(reference: &TrajectoryBatch, field: &dyn Field, drift: Drift) -> Result<f64> {
    let mut g = Graph::new();
    let v = record_td_regularizer(&mut g, reference, field, drift)?;
    g.checked_value(v)
}

pub fn moment_regularizer(reference: &TrajectoryBatch, field: &dyn Field) -> Result<f64> {
    let mut g = Graph::new();
    let v = record_moment_regularizer(&mut g, reference, field)?;
    g.checked_value(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::QuadraticField;
    use crate::paths::{simulate_controlled, simulate_reference, SdeConfig};
    use crate::rng::{NoiseStream, Purpose};
    use crate::stats::var_pop;

    fn hand_batch(states: Vec<f64>, noises: Vec<f64>, n: usize, steps: usize, h: f64, controlled: bool) -> TrajectoryBatch {
        let dim = states.len() / (n * (steps + 2));
        TrajectoryBatch {
            n,
            steps,
            dim,
            sigma: 1.0,
            h,
            seed: 0,
            controlled,
            drifts: vec![0.0; noises.len()],
            states,
            noises,
        }
    }

    fn std_normal_log(x: &[f64]) -> f64 {
        -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Printed (unexpanded) bracket for a 1D one-step chain.
    fn printed_bracket(x0: f64, x1: f64, gphi: f64, gpsi: f64, h: f64) -> f64 {
        let a = x0 - x1 - h * gpsi;
        let b = x1 - x0 - h * gphi;
        std_normal_log(&[x0]) - std_normal_log(&[x1]) + (a * a - b * b) / (2.0 * h)
    }

    #[test]
    fn logvar_divergence_matches_printed_form_on_hand_trajectories() {
        // phi = -x^2/4 + 0.1 t, psi = 0.3 x^2 / 2 - 0.2 x
        let phi = QuadraticField::new(1, -0.5, 0.0, &[0.0], 0.0, 0.1).unwrap();
        let psi = QuadraticField::new(1, 0.3, 0.0, &[-0.2], 0.0, 0.0).unwrap();
        let h = 0.5;
        let xs = [(0.3, -0.4), (1.2, 0.9), (-0.7, 0.1)];
        let states: Vec<f64> = xs.iter().flat_map(|&(a, b)| [a, b]).collect();
        let traj = hand_batch(states, vec![0.0; 3], 3, 0, h, true);
        let got = logvar_divergence(&traj, &phi, &psi, &std_normal_log, &std_normal_log).unwrap();
        let br: Vec<f64> = xs
            .iter()
            .map(|&(a, b)| printed_bracket(a, b, -0.5 * a, 0.3 * b - 0.2, h))
            .collect();
        assert!((got - var_pop(&br)).abs() < 1e-13, "{got} vs {}", var_pop(&br));
    }

    #[test]
    fn zero_fields_leave_only_boundary_terms() {
        let z = QuadraticField::zeros(1);
        let states = vec![0.3, -0.4, 1.2, 0.9, -0.7, 0.1];
        let traj = hand_batch(states, vec![0.0; 3], 3, 0, 0.5, true);
        let v = kl_divergence_energy(&traj, &z, &z, &std_normal_log, &std_normal_log, 1.0).unwrap();
        let expect = ((0.3f64.powi(2) - 0.16) + (1.44 - 0.81) + (0.49 - 0.01)) / 6.0;
        assert!((v.divergence_part + expect).abs() < 1e-14);
        assert_eq!(v.regularizer_part, 0.0);
    }

    fn oracle_like_batch(controlled: bool) -> TrajectoryBatch {
        let prior = PriorSpec::isotropic(2, 1.2);
        let cfg = SdeConfig {
            sigma: 0.8,
            steps: 9,
            horizon: 1.0,
            n: 64,
            seed: 3,
        };
        let stream = NoiseStream::new(3, Purpose::Reference, 0);
        if controlled {
            let phi = QuadraticField::new(2, -0.3, 0.1, &[0.1, 0.0], 0.0, 0.0).unwrap();
            simulate_controlled(&phi, &prior, &cfg, &stream).unwrap()
        } else {
            simulate_reference(&prior, &cfg, &stream).unwrap()
        }
    }

    #[test]
    fn variance_terms_are_shift_invariant() {
        let traj = oracle_like_batch(true);
        let phi = QuadraticField::new(2, -0.3, 0.1, &[0.1, 0.0], 0.0, 0.0).unwrap();
        let psi = QuadraticField::new(2, 0.2, -0.1, &[0.0, 0.3], 0.0, 0.0).unwrap();
        let nu = |x: &[f64]| std_normal_log(x);
        let nu_shift = |x: &[f64]| std_normal_log(x) + 7.5;
        let a = logvar_divergence(&traj, &phi, &psi, &nu, &std_normal_log).unwrap();
        let b = logvar_divergence(&traj, &phi, &psi, &nu_shift, &std_normal_log).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs());
        let sc = separate_control_loss(&traj, &phi, &psi, &nu, &std_normal_log, 1.0).unwrap();
        let phi_up = QuadraticField::new(2, -0.3, 0.1, &[0.1, 0.0], 2.0, 0.0).unwrap();
        let psi_dn = QuadraticField::new(2, 0.2, -0.1, &[0.0, 0.3], -2.0, 0.0).unwrap();
        let sc2 = separate_control_loss(&traj, &phi_up, &psi_dn, &nu, &std_normal_log, 1.0).unwrap();
        for (x, y) in sc.terms.iter().zip(&sc2.terms) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn linear_field_has_constant_variance_bracket() {
        let reference = oracle_like_batch(false);
        let lin = QuadraticField::new(2, 0.0, 0.0, &[0.7, -0.4], 0.0, 0.0).unwrap();
        let v = variance_regularizer(&reference, &lin, Drift::Forward).unwrap();
        assert!(v.abs() < 1e-20);
        let mut g = Graph::new();
        let leaves = query_path(&mut g, &reference, &lin, &Need::grad()).unwrap();
        let br = forward_factorization_brackets(&mut g, &reference, &leaves);
        let expect = (reference.steps + 1) as f64 * 0.64 * reference.h * (0.49 + 0.16) / 2.0;
        for b in br {
            assert!((g.value(b) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn td_residual_of_linear_field() {
        let reference = oracle_like_batch(false);
        let lin = QuadraticField::new(2, 0.0, 0.0, &[0.7, -0.4], 0.0, 0.0).unwrap();
        let v = td_regularizer(&reference, &lin, Drift::Forward).unwrap();
        // l.(y_{k+1} - y_k) - sigma sqrt(h) l.z_k vanishes, leaving s2 h |l|^2 / 2
        let per = 0.64 * reference.h * 0.65 / 2.0;
        let expect = reference.h * (reference.steps + 1) as f64 * per;
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn constant_fields_give_zero_regularizers() {
        let reference = oracle_like_batch(false);
        let c = QuadraticField::new(2, 0.0, 0.0, &[0.0, 0.0], 3.0, 0.0).unwrap();
        for d in [Drift::Forward, Drift::Backward] {
            assert_eq!(variance_regularizer(&reference, &c, d).unwrap(), 0.0);
            assert_eq!(td_regularizer(&reference, &c, d).unwrap(), 0.0);
            assert_eq!(pinn_regularizer(&reference, &c, d).unwrap(), 0.0);
        }
    }

    #[test]
    fn pinn_of_constant_violation() {
        // phi = 0.25 t: residual 0.25 everywhere
        let traj = oracle_like_batch(true);
        let f = QuadraticField::new(2, 0.0, 0.0, &[0.0, 0.0], 0.0, 0.25).unwrap();
        let v = pinn_regularizer(&traj, &f, Drift::Forward).unwrap();
        let expect = traj.h * (traj.steps + 1) as f64 * 0.25;
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn reference_regularizers_reject_controlled_batches() {
        let traj = oracle_like_batch(true);
        let c = QuadraticField::zeros(2);
        assert!(matches!(
            variance_regularizer(&traj, &c, Drift::Forward),
            Err(Error::Misuse(_))
        ));
        assert!(matches!(td_regularizer(&traj, &c, Drift::Forward), Err(Error::Misuse(_))));
    }

    #[test]
    fn single_trajectory_is_degenerate() {
        let traj = hand_batch(vec![0.0, 1.0], vec![0.0], 1, 0, 0.5, true);
        let z = QuadraticField::zeros(1);
        assert!(matches!(
            logvar_divergence(&traj, &z, &z, &std_normal_log, &std_normal_log),
            Err(Error::DegenerateBatch { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn separate_control_endpoint_terms_with_constant_fields() {
        // K = 0 and x_1 = x_0: terms 1 and 2 reduce to Var[-log mu] and Var[-log nu]
        let pts = [0.1, -0.5, 0.9, 1.7, -1.1];
        let states: Vec<f64> = pts.iter().flat_map(|&p| [p, p]).collect();
        let traj = hand_batch(states, vec![0.0; 5], 5, 0, 1.0, true);
        let phi = QuadraticField::new(1, 0.0, 0.0, &[0.0], 1.0, 0.0).unwrap();
        let psi = QuadraticField::new(1, 0.0, 0.0, &[0.0], -4.0, 0.0).unwrap();
        let mu = |x: &[f64]| -x[0].powi(4);
        let v = separate_control_loss(&traj, &phi, &psi, &std_normal_log, &mu, 0.5).unwrap();
        let lm: Vec<f64> = pts.iter().map(|p| p.powi(4)).collect();
        let ln: Vec<f64> = pts.iter().map(|p| -std_normal_log(&[*p])).collect();
        assert!((v.terms[0] - var_pop(&lm)).abs() < 1e-12);
        assert!((v.terms[1] - var_pop(&ln)).abs() < 1e-12);
        assert_eq!(v.terms[2], 0.0);
        assert_eq!(v.terms[3], 0.0);
        assert!((v.total - (v.terms[0] + v.terms[1])).abs() < 1e-15);
    }

    #[test]
    fn loss_value_is_divergence_plus_weighted_regularizer() {
        let traj = oracle_like_batch(true);
        let reference = oracle_like_batch(false);
        let phi = QuadraticField::new(2, -0.3, 0.1, &[0.1, 0.0], 0.0, 0.0).unwrap();
        let psi = QuadraticField::new(2, 0.2, -0.1, &[0.0, 0.3], 0.0, 0.0).unwrap();
        let inputs = LossInputs {
            controlled: &traj,
            reference: Some(&reference),
            nu: &std_normal_log,
            mu: &std_normal_log,
        };
        for kind in RegularizerKind::ALL {
            for direction in [Direction::Forward, Direction::Backward, Direction::Both] {
                let cfg = LossConfig {
                    kind,
                    lambda: 0.7,
                    direction,
                    printed_backward_pinn: false,
                };
                let v = evaluate_loss(&cfg, &inputs, &phi, &psi).unwrap();
                assert!(
                    (v.total - (v.divergence_part + 0.7 * v.regularizer_part)).abs()
                        <= 1e-12 * (1.0 + v.total.abs()),
                    "{kind:?}"
                );
                assert!(v.regularizer_part >= 0.0);
            }
        }
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for k in RegularizerKind::ALL {
            assert_eq!(k.as_str().parse::<RegularizerKind>().unwrap(), k);
        }
        assert!(matches!("vae".parse::<RegularizerKind>(), Err(Error::Config(_))));
    }
}
