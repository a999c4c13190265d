//! Second-order (underdamped) dynamics in phase space `z = (x, v)`.
//!
//! Reference process with friction fixed at 2:
//!
//! ```text
//! dX = V dt
//! dV = -X dt - 2 V dt + 2 dW
//! ```
//!
//! Each step of the splitting scheme is
//!
//! ```text
//! v_hat   = e^{-h} v_k + sqrt(1 - e^{-2h}) xi_k          (OU, exact)
//! v_tilde = v_hat + 4 h grad_V lambda(x_k, v_hat, k h)   (control, Euler)
//! z_{k+1} = Phi_h(x_k, v_tilde)                          (leapfrog on x' = v, v' = -x)
//! ```
//!
//! The forward potential `lambda` and backward potential `eta` are fields of
//! spatial dimension `2d`; the velocity block is coordinates `d..2d`.

use rayon::prelude::*;

use crate::estimators::ZEstimate;
use crate::losses::LogDensity;
use crate::ndiff::{Field, FieldBatch, Graph, Need, Var};
use crate::paths::SdeConfig;
use crate::rng::{normal, NoiseStream};
use crate::targets::PriorSpec;
use crate::{Error, Result};

/// Friction coefficient of the reference process.
pub const FRICTION: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseConfig {
    /// `sigma` is not used by the second-order scheme.
    pub sde: SdeConfig,
    /// Evaluate the control at `(x_k, v_k)` instead of `(x_k, v_hat)`.
    pub control_at_current_velocity: bool,
}

impl PhaseConfig {
    pub fn new(sde: SdeConfig) -> Self {
        Self {
            sde,
            control_at_current_velocity: false,
        }
    }
}

/// One leapfrog step of length `h` for the unit harmonic oscillator.
pub fn leapfrog(x: &mut [f64], v: &mut [f64], h: f64) {
    for (xj, vj) in x.iter_mut().zip(v.iter_mut()) {
        let half = *vj - 0.5 * h * *xj;
        *xj += h * half;
        *vj = half - 0.5 * h * *xj;
    }
}

/// Exact OU substep `v <- e^{-h} v + sqrt(1 - e^{-2h}) xi`.
pub fn ou_step(v: &mut [f64], xi: &[f64], h: f64) {
    let a = (-h).exp();
    let s = (1.0 - (-2.0 * h).exp()).sqrt();
    for (vj, z) in v.iter_mut().zip(xi) {
        *vj = a * *vj + s * z;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTrajectoryBatch {
    pub n: usize,
    pub steps: usize,
    /// Position dimension `d`; states have `2d` coordinates.
    pub dim: usize,
    pub h: f64,
    pub seed: u64,
    pub controlled: bool,
    /// `[n][K + 2][2d]`.
    pub states: Vec<f64>,
    /// OU noise `xi_k`, `[n][K + 1][d]`.
    pub ou_noises: Vec<f64>,
    /// Velocities after the OU substep, `[n][K + 1][d]`.
    pub v_hat: Option<Vec<f64>>,
}

impl PhaseTrajectoryBatch {
    pub fn num_states(&self) -> usize {
        self.steps + 2
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let w = 2 * self.dim;
        let off = (i * (self.steps + 2) + k) * w;
        &self.states[off..off + w]
    }

    pub fn noise(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * (self.steps + 1) + k) * self.dim;
        &self.ou_noises[off..off + self.dim]
    }

    /// `v_hat_{k+1}` produced in step `k`.
    pub fn v_hat(&self, i: usize, k: usize) -> Result<&[f64]> {
        let cache = self
            .v_hat
            .as_ref()
            .ok_or_else(|| Error::Misuse("batch carries no OU substep cache".into()))?;
        let off = (i * (self.steps + 1) + k) * self.dim;
        Ok(&cache[off..off + self.dim])
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    /// Brownian increment implied by the OU substep, `sqrt((1 - e^{-2h}) / 2) xi_k`.
    pub fn brownian_increment(&self, i: usize, k: usize) -> Vec<f64> {
        let s = ((1.0 - (-2.0 * self.h).exp()) / 2.0).sqrt();
        self.noise(i, k).iter().map(|z| s * z).collect()
    }

    pub fn final_states(&self) -> Vec<f64> {
        (0..self.n)
            .flat_map(|i| self.state(i, self.steps + 1).to_vec())
            .collect()
    }

    fn stacked(&self, ks: std::ops::Range<usize>) -> (Vec<f64>, Vec<f64>) {
        let mut pts = Vec::with_capacity(self.n * ks.len() * 2 * self.dim);
        let mut ts = Vec::with_capacity(self.n * ks.len());
        for i in 0..self.n {
            for k in ks.clone() {
                pts.extend_from_slice(self.state(i, k));
                ts.push(self.time(k));
            }
        }
        (pts, ts)
    }
}

/// Simulates the splitting scheme from `z_0 ~ prior (x) N(0, I)`; with
/// `lambda = None` the control substep is skipped (reference process).
pub fn simulate_splitting(
    lambda: Option<&dyn Field>,
    prior: &PriorSpec,
    cfg: &PhaseConfig,
    stream: &NoiseStream,
) -> Result<PhaseTrajectoryBatch> {
    let sde = &cfg.sde;
    sde.validate()?;
    let d = prior.dim;
    if let Some(f) = lambda {
        if f.dim() != 2 * d {
            return Err(Error::Shape(format!(
                "phase-space field must have dimension {}, got {}",
                2 * d,
                f.dim()
            )));
        }
    }
    let h = sde.h();
    let k1 = sde.steps + 1;
    let need = Need::grad();
    let per: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>)>> = (0..sde.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.rng(i as u64);
            let mut states = vec![0.0; (k1 + 1) * 2 * d];
            prior.draw(&mut rng, &mut states[..d]);
            for v in &mut states[d..2 * d] {
                *v = normal(&mut rng);
            }
            let noises: Vec<f64> = (0..k1 * d).map(|_| normal(&mut rng)).collect();
            let mut vhat = vec![0.0; k1 * d];
            let mut z = vec![0.0; 2 * d];
            for k in 0..k1 {
                z.copy_from_slice(&states[k * 2 * d..(k + 1) * 2 * d]);
                let v_old: Vec<f64> = z[d..].to_vec();
                let xi = &noises[k * d..(k + 1) * d];
                ou_step(&mut z[d..], xi, h);
                vhat[k * d..(k + 1) * d].copy_from_slice(&z[d..]);
                if let Some(f) = lambda {
                    let mut at = z.clone();
                    if cfg.control_at_current_velocity {
                        at[d..].copy_from_slice(&v_old);
                    }
                    let jet = f.jet(&at, k as f64 * h, &need).map_err(|e| match e {
                        Error::Domain(_) => Error::Divergence {
                            trajectory: i,
                            step: k,
                        },
                        other => other,
                    })?;
                    for j in 0..d {
                        z[d + j] += 4.0 * h * jet.grad[d + j];
                    }
                }
                let (x, v) = z.split_at_mut(d);
                leapfrog(x, v, h);
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        trajectory: i,
                        step: k,
                    });
                }
                states[(k + 1) * 2 * d..(k + 2) * 2 * d].copy_from_slice(&z);
            }
            Ok((states, noises, vhat))
        })
        .collect();
    let mut batch = PhaseTrajectoryBatch {
        n: sde.n,
        steps: sde.steps,
        dim: d,
        h,
        seed: sde.seed,
        controlled: lambda.is_some(),
        states: Vec::with_capacity(sde.n * (k1 + 1) * 2 * d),
        ou_noises: Vec::with_capacity(sde.n * k1 * d),
        v_hat: Some(Vec::with_capacity(sde.n * k1 * d)),
    };
    for r in per {
        let (s, z, v) = r?;
        batch.states.extend(s);
        batch.ou_noises.extend(z);
        batch.v_hat.as_mut().expect("allocated above").extend(v);
    }
    Ok(batch)
}

struct PhaseLeaves {
    batch: FieldBatch,
    states: usize,
}

impl PhaseLeaves {
    fn idx(&self, i: usize, k: usize) -> usize {
        i * self.states + k
    }

    fn grad(&self, i: usize, k: usize, block: std::ops::Range<usize>) -> Vec<Var> {
        let p = self.idx(i, k);
        block.map(|j| self.batch.grad(p, j)).collect()
    }
}

fn query_phase<'f>(
    g: &mut Graph<'f>,
    traj: &PhaseTrajectoryBatch,
    field: &'f dyn Field,
    need: &Need,
) -> Result<PhaseLeaves> {
    if field.dim() != 2 * traj.dim {
        return Err(Error::Shape(format!(
            "phase-space field must have dimension {}, got {}",
            2 * traj.dim,
            field.dim()
        )));
    }
    let (pts, ts) = traj.stacked(0..traj.num_states());
    let batch = g.query(field, &pts, &ts, need)?;
    Ok(PhaseLeaves {
        batch,
        states: traj.num_states(),
    })
}

/// `Var_n` of
/// `lambda(z_{K+1}) - lambda(z_0) + sum_k 2 h |grad_V lambda(z_k)|^2 - 2 grad_V lambda(z_k).dW_k`
/// along an uncontrolled batch.
pub fn record_second_order_variance<'f>(
    g: &mut Graph<'f>,
    reference: &PhaseTrajectoryBatch,
    lambda: &'f dyn Field,
) -> Result<Var> {
    if reference.controlled {
        return Err(Error::Misuse(
            "the second-order variance regularizer expects a reference batch".into(),
        ));
    }
    if reference.n < 2 {
        return Err(Error::DegenerateBatch {
            needed: 2,
            got: reference.n,
        });
    }
    let d = reference.dim;
    let leaves = query_phase(g, reference, lambda, &Need::grad())?;
    let kk = reference.steps;
    let h = reference.h;
    let br: Vec<Var> = (0..reference.n)
        .map(|i| {
            let mut xs = vec![
                leaves.batch.value(leaves.idx(i, kk + 1)),
                leaves.batch.value(leaves.idx(i, 0)),
            ];
            let mut cs = vec![1.0, -1.0];
            for k in 0..=kk {
                let gv = leaves.grad(i, k, d..2 * d);
                let dw = reference.brownian_increment(i, k);
                for j in 0..d {
                    xs.push(gv[j]);
                    cs.push(-2.0 * dw[j]);
                }
                xs.push(g.norm_sq(&gv));
                cs.push(2.0 * h);
            }
            g.lin(&xs, &cs)
        })
        .collect();
    Ok(g.var_pop(&br))
}

/// `h/n sum_{i,k} |r|` with
/// `r = dt lambda + 2 |grad_V lambda|^2 + grad lambda . b_bar + 2 lap_V lambda`
/// and `b_bar = (v, -x - 2 v)`.
pub fn record_second_order_pinn<'f>(
    g: &mut Graph<'f>,
    traj: &PhaseTrajectoryBatch,
    lambda: &'f dyn Field,
) -> Result<Var> {
    pde_residual(g, traj, lambda, 2.0, 2.0, 0.0)
}

/// Backward potential residual
/// `r = dt eta + grad eta . b_bar + div b_bar - 2 |grad_V eta|^2 - 2 lap_V eta`
/// with `div b_bar = -2d`, averaged like [`record_second_order_pinn`].
pub fn record_eta_pinn<'f>(
    g: &mut Graph<'f>,
    traj: &PhaseTrajectoryBatch,
    eta: &'f dyn Field,
) -> Result<Var> {
    let div = -FRICTION * traj.dim as f64;
    pde_residual(g, traj, eta, -2.0, -2.0, div)
}

fn pde_residual<'f>(
    g: &mut Graph<'f>,
    traj: &PhaseTrajectoryBatch,
    field: &'f dyn Field,
    c_sq: f64,
    c_lap: f64,
    c0: f64,
) -> Result<Var> {
    let d = traj.dim;
    let need = Need::grad().with_time().with_laplacian(d..2 * d);
    let leaves = query_phase(g, traj, field, &need)?;
    let mut res = Vec::with_capacity(traj.n * (traj.steps + 1));
    for i in 0..traj.n {
        for k in 0..=traj.steps {
            let p = leaves.idx(i, k);
            let z = traj.state(i, k);
            let (x, v) = z.split_at(d);
            let gv = leaves.grad(i, k, d..2 * d);
            let n2 = g.norm_sq(&gv);
            let mut xs = vec![leaves.batch.dt(p), n2, leaves.batch.lap(p)];
            let mut cs = vec![1.0, c_sq, c_lap];
            for j in 0..d {
                xs.push(leaves.batch.grad(p, j));
                cs.push(v[j]);
                xs.push(gv[j]);
                cs.push(-x[j] - FRICTION * v[j]);
            }
            let r = g.lin(&xs, &cs);
            let r = g.add_const(r, c0);
            res.push(g.abs(r));
        }
    }
    let s = g.sum(&res);
    Ok(g.scale(s, traj.h / traj.n as f64))
}

pub fn second_order_variance_reg(reference: &PhaseTrajectoryBatch, lambda: &dyn Field) -> Result<f64> {
    let mut g = Graph::new();
    let v = record_second_order_variance(&mut g, reference, lambda)?;
    g.checked_value(v)
}

pub fn second_order_pinn_reg(traj: &PhaseTrajectoryBatch, lambda: &dyn Field) -> Result<f64> {
    let mut g = Graph::new();
    let v = record_second_order_pinn(&mut g, traj, lambda)?;
    g.checked_value(v)
}

pub fn eta_pinn_reg(traj: &PhaseTrajectoryBatch, eta: &dyn Field) -> Result<f64> {
    let mut g = Graph::new();
    let v = record_eta_pinn(&mut g, traj, eta)?;
    g.checked_value(v)
}

fn log_std_normal(v: &[f64]) -> f64 {
    -0.5 * v.iter().map(|a| a * a).sum::<f64>()
        - 0.5 * v.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Phase-space normalizing-constant estimate. Per trajectory:
///
/// ```text
/// log [mu(x_{K+1}) N(v_{K+1})] - log [nu(x_0) N(v_0)]
///   + sum_k ( |v_hat_{k+1} - e^{-h} v_k|^2
///           - |v_k - e^{-h} (w_k + 4 h grad_V eta(Phi_{-h}(z_{k+1}), (k+1) h))|^2 ) / (2 (1 - e^{-2h}))
/// ```
///
/// where `w_k` is the velocity of `Phi_{-h}(z_{k+1})`.
pub fn second_order_log_z(
    traj: &PhaseTrajectoryBatch,
    eta: &dyn Field,
    nu: &dyn LogDensity,
    mu: &dyn LogDensity,
) -> Result<ZEstimate> {
    if traj.v_hat.is_none() {
        return Err(Error::Misuse("batch carries no OU substep cache".into()));
    }
    let d = traj.dim;
    if eta.dim() != 2 * d {
        return Err(Error::Shape(format!(
            "phase-space field must have dimension {}, got {}",
            2 * d,
            eta.dim()
        )));
    }
    let h = traj.h;
    let a = (-h).exp();
    let s2 = 1.0 - (-2.0 * h).exp();
    let kk = traj.steps;
    let need = Need::grad();
    let terms: Result<Vec<f64>> = (0..traj.n)
        .into_par_iter()
        .map(|i| {
            let z0 = traj.state(i, 0);
            let zt = traj.state(i, kk + 1);
            let mut acc = mu.log_density(&zt[..d]) + log_std_normal(&zt[d..])
                - nu.log_density(&z0[..d])
                - log_std_normal(&z0[d..]);
            for k in 0..=kk {
                let vk = &traj.state(i, k)[d..];
                let vh = traj.v_hat(i, k)?;
                let mut back = traj.state(i, k + 1).to_vec();
                {
                    let (x, v) = back.split_at_mut(d);
                    leapfrog(x, v, -h);
                }
                let jet = eta.jet(&back, traj.time(k + 1), &need)?;
                let mut fwd = 0.0;
                let mut bwd = 0.0;
                for j in 0..d {
                    let f = vh[j] - a * vk[j];
                    let b = vk[j] - a * (back[d + j] + 4.0 * h * jet.grad[d + j]);
                    fwd += f * f;
                    bwd += b * b;
                }
                acc += (fwd - bwd) / (2.0 * s2);
            }
            Ok(acc)
        })
        .collect();
    ZEstimate::from_terms(terms?)
}
