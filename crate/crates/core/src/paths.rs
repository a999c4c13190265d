//! Batched Euler–Maruyama trajectories with cached noise.
//!
//! ```text
//! x_{k+1} = x_k + sigma^2 grad phi(x_k, k h) h + sigma sqrt(h) z_k,   k = 0..=K
//! h = c / (K + 1)
//! ```
//!
//! Each trajectory `i` draws `x_0` and then `z_0..z_K` from its own
//! counter-based stream, so batches are identical whatever the thread count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ndiff::{Field, Need};
use crate::rng::{normal, NoiseStream};
use crate::targets::PriorSpec;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub sigma: f64,
    /// `K`: the chain has `K + 1` increments and `K + 2` states.
    pub steps: usize,
    /// `c = T`, the time horizon.
    pub horizon: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            steps: 64,
            horizon: 1.0,
            n: 512,
            seed: 0,
        }
    }
}

impl SdeConfig {
    pub fn h(&self) -> f64 {
        self.horizon / (self.steps + 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("batch size n must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub n: usize,
    /// `K`.
    pub steps: usize,
    pub dim: usize,
    pub sigma: f64,
    pub h: f64,
    pub seed: u64,
    pub controlled: bool,
    /// `[n][K + 2][dim]`.
    pub states: Vec<f64>,
    /// `[n][K + 1][dim]`.
    pub noises: Vec<f64>,
    /// Drift actually applied at each step, `[n][K + 1][dim]`.
    pub drifts: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn num_states(&self) -> usize {
        self.steps + 2
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * (self.steps + 2) + k) * self.dim;
        &self.states[off..off + self.dim]
    }

    pub fn noise(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * (self.steps + 1) + k) * self.dim;
        &self.noises[off..off + self.dim]
    }

    pub fn drift(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * (self.steps + 1) + k) * self.dim;
        &self.drifts[off..off + self.dim]
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    pub fn initial_states(&self) -> Vec<f64> {
        (0..self.n).flat_map(|i| self.state(i, 0).to_vec()).collect()
    }

    pub fn final_states(&self) -> Vec<f64> {
        (0..self.n)
            .flat_map(|i| self.state(i, self.steps + 1).to_vec())
            .collect()
    }

    /// States `k` in `ks` of every trajectory (trajectory-major) with their times.
    pub fn stacked(&self, ks: std::ops::Range<usize>) -> (Vec<f64>, Vec<f64>) {
        let per = ks.len();
        let mut pts = Vec::with_capacity(self.n * per * self.dim);
        let mut ts = Vec::with_capacity(self.n * per);
        for i in 0..self.n {
            for k in ks.clone() {
                pts.extend_from_slice(self.state(i, k));
                ts.push(self.time(k));
            }
        }
        (pts, ts)
    }

    /// Largest deviation between a stored state and the update equation
    /// replayed from the stored drift and noise.
    pub fn reconstruction_error(&self) -> f64 {
        let scale = self.sigma * self.h.sqrt();
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for k in 0..=self.steps {
                let (x, y) = (self.state(i, k), self.state(i, k + 1));
                let (d, z) = (self.drift(i, k), self.noise(i, k));
                for j in 0..self.dim {
                    let r = x[j] + d[j] * self.h + scale * z[j];
                    worst = worst.max((r - y[j]).abs());
                }
            }
        }
        worst
    }
}

/// Drift rule evaluated at `(x_k, k h)`.
type DriftFn<'a> = dyn Fn(&[f64], f64, &mut [f64]) -> Result<()> + Sync + 'a;

fn simulate(
    dim: usize,
    prior: &PriorSpec,
    cfg: &SdeConfig,
    stream: &NoiseStream,
    drift: &DriftFn<'_>,
    noisy: bool,
    controlled: bool,
) -> Result<TrajectoryBatch> {
    cfg.validate()?;
    if prior.dim != dim {
        return Err(Error::Shape(format!(
            "prior dimension {} differs from field dimension {dim}",
            prior.dim
        )));
    }
    let k1 = cfg.steps + 1;
    let h = cfg.h();
    let scale = cfg.sigma * h.sqrt();
    let per: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>)>> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.rng(i as u64);
            let mut states = vec![0.0; (k1 + 1) * dim];
            prior.draw(&mut rng, &mut states[..dim]);
            let mut noises = vec![0.0; k1 * dim];
            if noisy {
                for z in noises.iter_mut() {
                    *z = normal(&mut rng);
                }
            }
            let mut drifts = vec![0.0; k1 * dim];
            for k in 0..k1 {
                let (head, tail) = states.split_at_mut((k + 1) * dim);
                let x = &head[k * dim..];
                let d = &mut drifts[k * dim..(k + 1) * dim];
                drift(x, k as f64 * h, d).map_err(|e| match e {
                    Error::Domain(_) => Error::Divergence {
                        trajectory: i,
                        step: k,
                    },
                    other => other,
                })?;
                let z = &noises[k * dim..(k + 1) * dim];
                let y = &mut tail[..dim];
                for j in 0..dim {
                    y[j] = x[j] + d[j] * h + scale * z[j];
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        trajectory: i,
                        step: k,
                    });
                }
            }
            Ok((states, noises, drifts))
        })
        .collect();
    let mut batch = TrajectoryBatch {
        n: cfg.n,
        steps: cfg.steps,
        dim,
        sigma: cfg.sigma,
        h,
        seed: cfg.seed,
        controlled,
        states: Vec::with_capacity(cfg.n * (k1 + 1) * dim),
        noises: Vec::with_capacity(cfg.n * k1 * dim),
        drifts: Vec::with_capacity(cfg.n * k1 * dim),
    };
    for r in per {
        let (s, z, d) = r?;
        batch.states.extend(s);
        batch.noises.extend(z);
        batch.drifts.extend(d);
    }
    Ok(batch)
}

/// Forward SDE driven by `sigma^2 grad phi`.
pub fn simulate_controlled(
    phi: &dyn Field,
    prior: &PriorSpec,
    cfg: &SdeConfig,
    stream: &NoiseStream,
) -> Result<TrajectoryBatch> {
    let s2 = cfg.sigma * cfg.sigma;
    let need = Need::grad();
    let drift = |x: &[f64], t: f64, out: &mut [f64]| -> Result<()> {
        let jet = phi.jet(x, t, &need)?;
        for (o, g) in out.iter_mut().zip(&jet.grad) {
            *o = s2 * g;
        }
        Ok(())
    };
    simulate(phi.dim(), prior, cfg, stream, &drift, true, true)
}

/// Uncontrolled reference chain `y_{k+1} = y_k + sigma sqrt(h) z_k`.
pub fn simulate_reference(
    prior: &PriorSpec,
    cfg: &SdeConfig,
    stream: &NoiseStream,
) -> Result<TrajectoryBatch> {
    let drift = |_: &[f64], _: f64, _: &mut [f64]| -> Result<()> { Ok(()) };
    simulate(prior.dim, prior, cfg, stream, &drift, true, false)
}

/// Euler discretization of the probability-flow ODE
/// `dx = sigma^2/2 (grad phi - grad psi) dt`; noises are stored as zeros.
pub fn simulate_probability_flow(
    phi: &dyn Field,
    psi: &dyn Field,
    prior: &PriorSpec,
    cfg: &SdeConfig,
    stream: &NoiseStream,
) -> Result<TrajectoryBatch> {
    let half = 0.5 * cfg.sigma * cfg.sigma;
    let need = Need::grad();
    let drift = |x: &[f64], t: f64, out: &mut [f64]| -> Result<()> {
        let a = phi.jet(x, t, &need)?;
        let b = psi.jet(x, t, &need)?;
        for j in 0..out.len() {
            out[j] = half * (a.grad[j] - b.grad[j]);
        }
        Ok(())
    };
    simulate(phi.dim(), prior, cfg, stream, &drift, false, true)
}

const DUMP_MAGIC: &[u8; 8] = b"SBTRAJ01";

/// Binary dump: magic, `n K d` (u64), `sigma h` (f64), `seed` (u64),
/// controlled flag (u8), then states, noises and drifts as f64, all
/// little-endian.
pub fn write_dump<W: Write>(batch: &TrajectoryBatch, mut w: W) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    for v in [batch.n as u64, batch.steps as u64, batch.dim as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&batch.sigma.to_le_bytes())?;
    w.write_all(&batch.h.to_le_bytes())?;
    w.write_all(&batch.seed.to_le_bytes())?;
    w.write_all(&[batch.controlled as u8])?;
    for arr in [&batch.states, &batch.noises, &batch.drifts] {
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dump<R: Read>(mut r: R) -> Result<TrajectoryBatch> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    if &b8 != DUMP_MAGIC {
        return Err(Error::Format("not a trajectory dump".into()));
    }
    let next = |r: &mut R| -> Result<[u8; 8]> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(b)
    };
    let n = u64::from_le_bytes(next(&mut r)?) as usize;
    let steps = u64::from_le_bytes(next(&mut r)?) as usize;
    let dim = u64::from_le_bytes(next(&mut r)?) as usize;
    let sigma = f64::from_le_bytes(next(&mut r)?);
    let h = f64::from_le_bytes(next(&mut r)?);
    let seed = u64::from_le_bytes(next(&mut r)?);
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let mut read_arr = |len: usize| -> Result<Vec<f64>> {
        (0..len)
            .map(|_| Ok(f64::from_le_bytes(next(&mut r)?)))
            .collect()
    };
    let states = read_arr(n * (steps + 2) * dim)?;
    let noises = read_arr(n * (steps + 1) * dim)?;
    let drifts = read_arr(n * (steps + 1) * dim)?;
    Ok(TrajectoryBatch {
        n,
        steps,
        dim,
        sigma,
        h,
        seed,
        controlled: flag[0] != 0,
        states,
        noises,
        drifts,
    })
}

pub fn save_dump(batch: &TrajectoryBatch, path: &Path) -> Result<()> {
    write_dump(batch, BufWriter::new(File::create(path)?))
}

pub fn load_dump(path: &Path) -> Result<TrajectoryBatch> {
    read_dump(BufReader::new(File::open(path)?))
}
