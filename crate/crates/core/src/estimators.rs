//! Importance-weighted normalizing-constant and expectation estimates.
//!
//! Two families of per-trajectory log weights are provided:
//!
//! * [`log_z_estimate`] forms the ratio of the backward chain driven by
//!   `grad psi` to the forward chain that generated the batch, which is an
//!   unbiased estimate of `Z` for any controls;
//! * [`importance_weights`] accumulates the Laplacian correction
//!   `h sum_k s2/2 (lap phi - lap psi)(x_k, k h)`, the log-Jacobian of the
//!   probability-flow map, on top of `mu(x_{K+1}) / nu(x_0)`.
//!
//! Weights far below the largest one (more than [`FLUSH_GAP`] in log space)
//! are flushed to zero when normalizing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::losses::LogDensity;
use crate::ndiff::{Field, Need};
use crate::paths::TrajectoryBatch;
use crate::stats::{log_mean_exp, mean, std_err, std_pop};
use crate::{Error, Result};

pub const FLUSH_GAP: f64 = 700.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZEstimate {
    pub log_z_hat: f64,
    pub per_sample_log_terms: Vec<f64>,
    pub ess: f64,
}

impl ZEstimate {
    pub fn from_terms(per_sample_log_terms: Vec<f64>) -> Result<Self> {
        if per_sample_log_terms.is_empty() {
            return Err(Error::Estimator("no trajectories".into()));
        }
        if per_sample_log_terms.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                what: "per-sample log-Z term".into(),
            });
        }
        // sorted reduction order makes the result independent of trajectory order
        let mut sorted = per_sample_log_terms.clone();
        sorted.sort_by(f64::total_cmp);
        let log_z_hat = log_mean_exp(&sorted);
        let ess = ess_from_log_weights(&sorted);
        Ok(Self {
            log_z_hat,
            per_sample_log_terms,
            ess,
        })
    }

    /// `-log Z_hat`, the orientation used in reports.
    pub fn neg_log_z(&self) -> f64 {
        -self.log_z_hat
    }

    /// ELBO: the mean of the per-sample log terms.
    pub fn mean_log_term(&self) -> f64 {
        mean(&self.per_sample_log_terms)
    }

    pub fn log_term_std(&self) -> f64 {
        std_pop(&self.per_sample_log_terms)
    }

    /// Standard error of `Z_hat / Z_hat`, i.e. of the normalized weights.
    pub fn relative_std_err(&self) -> f64 {
        let m = self.log_z_hat;
        let w: Vec<f64> = self.per_sample_log_terms.iter().map(|t| (t - m).exp()).collect();
        std_err(&w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub point: Vec<f64>,
    pub log_weight: f64,
}

/// `(sum w)^2 / sum w^2` from log weights.
pub fn ess_from_log_weights(log_w: &[f64]) -> f64 {
    let w = normalize_log_weights(log_w);
    1.0 / w.iter().map(|v| v * v).sum::<f64>()
}

/// Normalized weights, flushing those more than [`FLUSH_GAP`] below the max.
fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_w
        .iter()
        .map(|&l| if l < m - FLUSH_GAP || !l.is_finite() { 0.0 } else { (l - m).exp() })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

pub fn normalized_weights(samples: &[WeightedSample]) -> Result<Vec<f64>> {
    let lw: Vec<f64> = samples.iter().map(|s| s.log_weight).collect();
    if !lw.iter().any(|l| l.is_finite()) {
        return Err(Error::Estimator("no finite importance weight".into()));
    }
    Ok(normalize_log_weights(&lw))
}

pub fn ess(samples: &[WeightedSample]) -> Result<f64> {
    let w = normalized_weights(samples)?;
    Ok(1.0 / w.iter().map(|v| v * v).sum::<f64>())
}

/// Standard deviation over mean of the (unnormalized) weights.
pub fn weight_cv(samples: &[WeightedSample]) -> Result<f64> {
    let w = normalized_weights(samples)?;
    Ok(std_pop(&w) / mean(&w))
}

fn check_controlled(traj: &TrajectoryBatch) -> Result<()> {
    if !traj.controlled {
        return Err(Error::Misuse(
            "the estimator needs a controlled batch with cached noise".into(),
        ));
    }
    Ok(())
}

/// Per-trajectory log term
///
/// ```text
/// log mu(x_{K+1}) - log nu(x_0)
///   + sum_k |z_k|^2/2 - |x_k - x_{k+1} - s2 h grad psi(x_{k+1}, (k+1) h)|^2 / (2 s2 h)
/// ```
///
/// and its log-mean-exp.
pub fn log_z_estimate(
    traj: &TrajectoryBatch,
    psi: &dyn Field,
    nu: &dyn LogDensity,
    mu: &dyn LogDensity,
) -> Result<ZEstimate> {
    check_controlled(traj)?;
    let s2h = traj.sigma * traj.sigma * traj.h;
    let kk = traj.steps;
    let need = Need::grad();
    let terms: Result<Vec<f64>> = (0..traj.n)
        .into_par_iter()
        .map(|i| {
            let mut acc = mu.log_density(traj.state(i, kk + 1)) - nu.log_density(traj.state(i, 0));
            for k in 0..=kk {
                let x = traj.state(i, k);
                let y = traj.state(i, k + 1);
                let jet = psi.jet(y, traj.time(k + 1), &need)?;
                let z2: f64 = traj.noise(i, k).iter().map(|z| z * z).sum();
                let r2: f64 = (0..traj.dim)
                    .map(|j| {
                        let r = x[j] - y[j] - s2h * jet.grad[j];
                        r * r
                    })
                    .sum();
                acc += 0.5 * z2 - r2 / (2.0 * s2h);
            }
            Ok(acc)
        })
        .collect();
    ZEstimate::from_terms(terms?)
}

/// Terminal samples with log weights
/// `log mu(x_{K+1}) - log nu(x_0) + h sum_{k=0}^{K} s2/2 (lap phi - lap psi)(x_k, k h)`.
pub fn importance_weights(
    traj: &TrajectoryBatch,
    phi: &dyn Field,
    psi: &dyn Field,
    nu: &dyn LogDensity,
    mu: &dyn LogDensity,
) -> Result<Vec<WeightedSample>> {
    let d = traj.dim;
    let need = Need::value().with_laplacian(0..d);
    let half = 0.5 * traj.sigma * traj.sigma;
    let kk = traj.steps;
    (0..traj.n)
        .into_par_iter()
        .map(|i| {
            let mut lap = 0.0;
            for k in 0..=kk {
                let x = traj.state(i, k);
                let t = traj.time(k);
                lap += phi.jet(x, t, &need)?.laplacian - psi.jet(x, t, &need)?.laplacian;
            }
            let end = traj.state(i, kk + 1);
            let log_weight =
                mu.log_density(end) - nu.log_density(traj.state(i, 0)) + traj.h * half * lap;
            if !log_weight.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("log weight of trajectory {i}"),
                });
            }
            Ok(WeightedSample {
                point: end.to_vec(),
                log_weight,
            })
        })
        .collect()
}

/// Self-normalized `sum g(x_i) w_i / sum w_i`.
pub fn weighted_statistic<G>(samples: &[WeightedSample], g: G) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let w = normalized_weights(samples)?;
    let mut out: Vec<f64> = Vec::new();
    for (s, wi) in samples.iter().zip(&w) {
        let v = g(&s.point);
        if out.is_empty() {
            out = vec![0.0; v.len()];
        }
        if *wi == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += wi * x;
        }
    }
    Ok(out)
}

/// Weighted per-coordinate mean and standard deviation.
pub fn weighted_mean_std(samples: &[WeightedSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = normalized_weights(samples)?;
    let dim = samples.first().map_or(0, |s| s.point.len());
    let pts: Vec<f64> = samples.iter().flat_map(|s| s.point.iter().copied()).collect();
    Ok(crate::stats::weighted_moments(&pts, dim, &w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::QuadraticField;
    use crate::paths::{simulate_controlled, SdeConfig};
    use crate::rng::{NoiseStream, Purpose};
    use crate::targets::PriorSpec;

    fn normal_log(var: f64) -> impl Fn(&[f64]) -> f64 + Sync {
        move |x: &[f64]| {
            -0.5 * x.iter().map(|v| v * v).sum::<f64>() / var
                - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * var).ln()
        }
    }

    fn samples(lw: &[f64]) -> Vec<WeightedSample> {
        lw.iter()
            .enumerate()
            .map(|(i, &l)| WeightedSample {
                point: vec![i as f64, (i * i) as f64],
                log_weight: l,
            })
            .collect()
    }

    #[test]
    fn equal_weights_give_plain_mean() {
        let s = samples(&[0.3; 4]);
        let m = weighted_statistic(&s, |x| x.to_vec()).unwrap();
        assert!((m[0] - 1.5).abs() < 1e-15 && (m[1] - 3.5).abs() < 1e-15);
        assert!((ess(&s).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn scaling_all_weights_changes_nothing() {
        let a = samples(&[0.1, -2.0, 1.5, 0.0]);
        let b = samples(&[0.1 + 40.0, -2.0 + 40.0, 1.5 + 40.0, 40.0]);
        let ma = weighted_statistic(&a, |x| x.to_vec()).unwrap();
        let mb = weighted_statistic(&b, |x| x.to_vec()).unwrap();
        for (x, y) in ma.iter().zip(&mb) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn tiny_weights_are_flushed() {
        let s = samples(&[0.0, -800.0, 0.0]);
        let w = normalized_weights(&s).unwrap();
        assert_eq!(w, vec![0.5, 0.0, 0.5]);
        let bad = samples(&[f64::NEG_INFINITY, f64::NAN]);
        assert!(matches!(normalized_weights(&bad), Err(Error::Estimator(_))));
    }

    #[test]
    fn one_step_hand_value() {
        // K = 0, h = 1, sigma = 1, psi = x^2/2 (grad x), nu = N(0,2), mu = N(0,1)
        let traj = TrajectoryBatch {
            n: 2,
            steps: 0,
            dim: 1,
            sigma: 1.0,
            h: 1.0,
            seed: 0,
            controlled: true,
            states: vec![0.5, 1.1, -0.2, 0.4],
            noises: vec![0.6, 0.6],
            drifts: vec![0.0, 0.0],
        };
        let psi = QuadraticField::new(1, 1.0, 0.0, &[0.0], 0.0, 0.0).unwrap();
        let est = log_z_estimate(&traj, &psi, &normal_log(2.0), &normal_log(1.0)).unwrap();
        let hand = |x0: f64, x1: f64, z: f64| {
            let r: f64 = x0 - x1 - x1;
            normal_log(1.0)(&[x1]) - normal_log(2.0)(&[x0]) + 0.5 * z * z - 0.5 * r * r
        };
        assert!((est.per_sample_log_terms[0] - hand(0.5, 1.1, 0.6)).abs() < 1e-15);
        assert!((est.per_sample_log_terms[1] - hand(-0.2, 0.4, 0.6)).abs() < 1e-15);
        let lme = ((est.per_sample_log_terms[0].exp() + est.per_sample_log_terms[1].exp()) / 2.0).ln();
        assert!((est.log_z_hat - lme).abs() < 1e-14);
    }

    #[test]
    fn uncontrolled_one_step_estimate_is_unbiased() {
        // phi = psi = 0: exp(term) = mu(x_1) / nu(x_0) and E = Z = 3
        let prior = PriorSpec::isotropic(1, 2f64.sqrt());
        let cfg = SdeConfig {
            sigma: 1.0,
            steps: 0,
            horizon: 0.5,
            n: 20000,
            seed: 1,
        };
        let z = QuadraticField::zeros(1);
        let stream = NoiseStream::new(1, Purpose::Evaluation, 0);
        let traj = simulate_controlled(&z, &prior, &cfg, &stream).unwrap();
        let base = normal_log(1.0);
        let mu = move |x: &[f64]| base(x) + 3f64.ln();
        let est = log_z_estimate(&traj, &z, &prior, &mu).unwrap();
        let slack = 3.0 * est.relative_std_err();
        assert!((est.log_z_hat - 3f64.ln()).abs() < slack, "{} {slack}", est.log_z_hat);
        assert!(est.mean_log_term() <= est.log_z_hat);
        assert!(est.ess >= 1.0 && est.ess <= cfg.n as f64);
    }

    #[test]
    fn identical_fields_cancel_laplacian_term() {
        let prior = PriorSpec::isotropic(2, 1.0);
        let cfg = SdeConfig {
            n: 16,
            steps: 4,
            ..SdeConfig::default()
        };
        let f = QuadraticField::new(2, 0.4, -0.3, &[0.1, 0.2], 0.0, 0.0).unwrap();
        let traj = simulate_controlled(&f, &prior, &cfg, &NoiseStream::new(0, Purpose::Evaluation, 0))
            .unwrap();
        let mu = normal_log(1.0);
        let s = importance_weights(&traj, &f, &f, &prior, &mu).unwrap();
        for (i, w) in s.iter().enumerate() {
            let expect = mu(traj.state(i, 5)) - prior.log_nu(traj.state(i, 0));
            assert_eq!(w.log_weight, expect);
        }
    }

    #[test]
    fn permuting_trajectories_keeps_log_z() {
        let a = ZEstimate::from_terms(vec![0.1, -0.4, 2.0, 0.7]).unwrap();
        let b = ZEstimate::from_terms(vec![2.0, 0.7, 0.1, -0.4]).unwrap();
        assert_eq!(a.log_z_hat, b.log_z_hat);
        assert_eq!(a.ess, b.ess);
    }
}
