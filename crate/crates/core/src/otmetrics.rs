//! Entropic optimal transport and the Gaussian bridge oracle.
//!
//! [`sinkhorn_cost`] solves
//!
//! ```text
//! min_pi  <C, pi> + eps KL(pi | a x b),    C_ij = |x_i - y_j|^2
//! ```
//!
//! in the log domain. At a fixed point the objective equals the dual value
//! `sum a_i f_i + sum b_j g_j`, which is what is reported.
//!
//! [`GaussianSbOracle`] is the closed-form bridge between isotropic Gaussians
//! `N(0, a^2 I)` and `N(0, b^2 I)` under Brownian reference `sigma W`. Writing
//! `s = sigma^2 T` and `tau = t / T`:
//!
//! ```text
//! c      = sqrt(a^2 b^2 + s^2/4) - s/2                       coupling covariance
//! v(tau) = (1-tau)^2 a^2 + tau^2 b^2 + 2 tau (1-tau) c + s tau (1-tau)
//! grad phi*(x, t) = alpha(t) x,   sigma^2 T v alpha =  c(1-2tau) + tau b^2 - (1-tau) a^2 - s tau
//! grad psi*(x, t) = beta(t) x,    sigma^2 T v beta  = -(c(1-2tau) + tau b^2 - (1-tau) a^2 + s (1-tau))
//! ```
//!
//! `alpha` comes from conditioning on the terminal point and `beta` from
//! conditioning on the initial point; `alpha + beta = -1/v` is then a check,
//! not a construction.

use rayon::prelude::*;

use crate::ndiff::{check_point, Field, Jet, JetBar, Need, QueryCounters};
use crate::stats::log_sum_exp;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    /// Bound on the row-marginal deviation.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 2.0,
            tol: 1e-9,
            max_iter: 10_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropicPlanSummary {
    pub cost: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Entropic strength matching the static bridge with reference
/// `sigma W` over `[0, T]` when the cost is the plain squared distance.
pub fn sb_epsilon(sigma: f64, horizon: f64) -> f64 {
    2.0 * sigma * sigma * horizon
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_weights(w: &[f64], what: &str) -> Result<Vec<f64>> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain(format!("{what} weights must be non-negative with positive sum")));
    }
    Ok(w.iter().map(|v| (v / total).ln()).collect())
}

/// `out_i = -eps log sum_j exp(lw_j + (g_j - C_ij)/eps)`.
fn soft_min(
    out: &mut [f64],
    xs: &[f64],
    ys: &[f64],
    dim: usize,
    g: &[f64],
    lw: &[f64],
    eps: f64,
) {
    out.par_iter_mut().enumerate().for_each(|(i, o)| {
        let xi = &xs[i * dim..(i + 1) * dim];
        let mut terms = Vec::with_capacity(g.len());
        for (j, yj) in ys.chunks_exact(dim).enumerate() {
            if lw[j].is_finite() {
                terms.push(lw[j] + (g[j] - sq_dist(xi, yj)) / eps);
            }
        }
        *o = -eps * log_sum_exp(&terms);
    });
}

/// Log-domain Sinkhorn between weighted point clouds (row-major, `dim`
/// coordinates per point). Weights are normalized internally.
pub fn sinkhorn_cost(
    xs: &[f64],
    wa: &[f64],
    ys: &[f64],
    wb: &[f64],
    dim: usize,
    cfg: &SinkhornConfig,
) -> Result<EntropicPlanSummary> {
    let (n, m) = (wa.len(), wb.len());
    if xs.len() != n * dim || ys.len() != m * dim || n == 0 || m == 0 {
        return Err(Error::Shape("point clouds and weights disagree".into()));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    let la = log_weights(wa, "source")?;
    let lb = log_weights(wb, "target")?;
    let eps = cfg.epsilon;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut residual = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        soft_min(&mut f, xs, ys, dim, &g, &lb, eps);
        soft_min(&mut g, ys, xs, dim, &f, &la, eps);
        // columns are exact after the g update; measure the rows
        let mut rows = vec![0.0; n];
        rows.par_iter_mut().enumerate().for_each(|(i, r)| {
            if la[i].is_finite() {
                let xi = &xs[i * dim..(i + 1) * dim];
                let mut acc = 0.0;
                for (j, yj) in ys.chunks_exact(dim).enumerate() {
                    if lb[j].is_finite() {
                        acc += (la[i] + lb[j] + (f[i] + g[j] - sq_dist(xi, yj)) / eps).exp();
                    }
                }
                *r = (acc - la[i].exp()).abs();
            }
        });
        residual = rows.into_iter().fold(0.0, f64::max);
        if residual <= cfg.tol {
            let cost = dual_value(&f, &la) + dual_value(&g, &lb);
            return Ok(EntropicPlanSummary {
                cost,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iter,
        residual,
    })
}

fn dual_value(pot: &[f64], lw: &[f64]) -> f64 {
    pot.iter()
        .zip(lw)
        .filter(|(_, l)| l.is_finite())
        .map(|(p, l)| p * l.exp())
        .sum()
}

/// Entropic cost between `N(0, a^2 I_d)` and `N(0, b^2 I_d)` with squared
/// cost and strength `eps`. Per coordinate the optimal covariance is
/// `c = sqrt(a^2 b^2 + eps^2/16) - eps/4` and the value is
/// `a^2 + b^2 - 2c - eps/2 log(1 - c^2/(a^2 b^2))`.
pub fn gaussian_entropic_cost(a: f64, b: f64, eps: f64, dim: usize) -> f64 {
    let ab2 = a * a * b * b;
    let c = (ab2 + eps * eps / 16.0).sqrt() - eps / 4.0;
    dim as f64 * (a * a + b * b - 2.0 * c - 0.5 * eps * (1.0 - c * c / ab2).ln())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSbOracle {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub dim: usize,
    /// Covariance of `(X_0, X_T)` per coordinate.
    pub coupling: f64,
}

impl GaussianSbOracle {
    pub fn new(a: f64, b: f64, sigma: f64, horizon: f64, dim: usize) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && sigma > 0.0 && horizon > 0.0) {
            return Err(Error::Domain("oracle parameters must be positive".into()));
        }
        let s = sigma * sigma * horizon;
        let coupling = (a * a * b * b + s * s / 4.0).sqrt() - s / 2.0;
        Ok(Self {
            a,
            b,
            sigma,
            horizon,
            dim,
            coupling,
        })
    }

    fn s(&self) -> f64 {
        self.sigma * self.sigma * self.horizon
    }

    /// Per-coordinate variance of `X_t`.
    pub fn marginal_var(&self, t: f64) -> f64 {
        let u = t / self.horizon;
        let (a2, b2, c) = (self.a * self.a, self.b * self.b, self.coupling);
        (1.0 - u).powi(2) * a2 + u * u * b2 + 2.0 * u * (1.0 - u) * c + self.s() * u * (1.0 - u)
    }

    fn m(&self, u: f64) -> f64 {
        let (a2, b2, c) = (self.a * self.a, self.b * self.b, self.coupling);
        c * (1.0 - 2.0 * u) + u * b2 - (1.0 - u) * a2 - self.s() * u
    }

    pub fn alpha(&self, t: f64) -> f64 {
        let u = t / self.horizon;
        self.m(u) / (self.sigma * self.sigma * self.horizon * self.marginal_var(t))
    }

    pub fn beta(&self, t: f64) -> f64 {
        let u = t / self.horizon;
        let (a2, b2, c) = (self.a * self.a, self.b * self.b, self.coupling);
        let num = c * (1.0 - 2.0 * u) + u * b2 - (1.0 - u) * a2 + self.s() * (1.0 - u);
        -num / (self.sigma * self.sigma * self.horizon * self.marginal_var(t))
    }

    /// `d alpha / dt` by the quotient rule.
    pub fn alpha_dot(&self, t: f64) -> f64 {
        let u = t / self.horizon;
        let (a2, b2, c, s) = (self.a * self.a, self.b * self.b, self.coupling, self.s());
        let v = self.marginal_var(t);
        let m = self.m(u);
        let dm = -2.0 * c + b2 + a2 - s;
        let dv = -2.0 * (1.0 - u) * a2 + 2.0 * u * b2 + 2.0 * (1.0 - 2.0 * u) * c + s * (1.0 - 2.0 * u);
        (dm * v - m * dv) / (self.sigma * self.sigma * self.horizon * self.horizon * v * v)
    }

    /// `d beta / dt`, from the Riccati equation `beta' = sigma^2 beta^2`.
    pub fn beta_dot(&self, t: f64) -> f64 {
        let b = self.beta(t);
        self.sigma * self.sigma * b * b
    }

    fn log_nu0(&self) -> f64 {
        -0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * self.a * self.a).ln()
    }

    pub fn kappa_phi(&self, t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        -0.5 * self.dim as f64 * (1.0 + s2 * self.alpha(0.0) * t).ln()
    }

    pub fn kappa_phi_dot(&self, t: f64) -> f64 {
        -0.5 * self.dim as f64 * self.sigma * self.sigma * self.alpha(t)
    }

    pub fn kappa_psi(&self, t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        self.log_nu0() - 0.5 * self.dim as f64 * (1.0 - s2 * self.beta(0.0) * t).ln()
    }

    pub fn kappa_psi_dot(&self, t: f64) -> f64 {
        0.5 * self.dim as f64 * self.sigma * self.sigma * self.beta(t)
    }

    /// `phi*(x, t) = alpha |x|^2 / 2 + kappa_phi`, gauge `phi*(0, 0) = 0`.
    pub fn phi(&self, x: &[f64], t: f64) -> f64 {
        0.5 * self.alpha(t) * x.iter().map(|v| v * v).sum::<f64>() + self.kappa_phi(t)
    }

    /// `psi*(x, t)`, normalized so that `phi* + psi* = log rho_t`.
    pub fn psi(&self, x: &[f64], t: f64) -> f64 {
        0.5 * self.beta(t) * x.iter().map(|v| v * v).sum::<f64>() + self.kappa_psi(t)
    }

    pub fn log_marginal(&self, x: &[f64], t: f64) -> f64 {
        let v = self.marginal_var(t);
        let r2: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * r2 / v - 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * v).ln()
    }

    pub fn forward_field(&self) -> OracleField {
        OracleField::new(*self, Side::Forward)
    }

    pub fn backward_field(&self) -> OracleField {
        OracleField::new(*self, Side::Backward)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Forward,
    Backward,
}

/// Oracle potential with a three-parameter perturbation family:
///
/// ```text
/// f(x, t) = A(t)(1 + th0)|x|^2/2 + th1 sum_j x_j + th2 t |x|^2/2 + kappa(t)
/// ```
///
/// where `A` is `alpha` or `beta`. `theta = 0` is the exact oracle.
#[derive(Clone, Debug)]
pub struct OracleField {
    pub oracle: GaussianSbOracle,
    pub side: Side,
    pub theta: [f64; 3],
    counters: QueryCounters,
}

impl OracleField {
    pub fn new(oracle: GaussianSbOracle, side: Side) -> Self {
        Self {
            oracle,
            side,
            theta: [0.0; 3],
            counters: QueryCounters::default(),
        }
    }

    pub fn with_theta(mut self, theta: [f64; 3]) -> Self {
        self.theta = theta;
        self
    }

    fn coeffs(&self, t: f64) -> (f64, f64, f64, f64) {
        let o = &self.oracle;
        match self.side {
            Side::Forward => (o.alpha(t), o.alpha_dot(t), o.kappa_phi(t), o.kappa_phi_dot(t)),
            Side::Backward => (o.beta(t), o.beta_dot(t), o.kappa_psi(t), o.kappa_psi_dot(t)),
        }
    }
}

impl Field for OracleField {
    fn dim(&self) -> usize {
        self.oracle.dim
    }

    fn num_params(&self) -> usize {
        3
    }

    fn jet(&self, x: &[f64], t: f64, need: &Need) -> Result<Jet> {
        check_point(x, t, self.oracle.dim)?;
        self.counters.record(need);
        let (a, da, k, dk) = self.coeffs(t);
        let [t0, t1, t2] = self.theta;
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let sx: f64 = x.iter().sum();
        let q = a * (1.0 + t0) + t2 * t;
        let mut jet = Jet {
            value: 0.5 * q * r2 + t1 * sx + k,
            ..Jet::default()
        };
        if need.grad || need.laplacian.is_some() {
            jet.grad = x.iter().map(|v| q * v + t1).collect();
        }
        if need.time {
            jet.dt = 0.5 * (da * (1.0 + t0) + t2) * r2 + dk;
        }
        if let Some(r) = &need.laplacian {
            jet.laplacian = q * r.len() as f64;
        }
        Ok(jet)
    }

    fn jet_vjp(&self, x: &[f64], t: f64, need: &Need, bar: &JetBar, grad: &mut [f64]) -> Result<()> {
        check_point(x, t, self.oracle.dim)?;
        let (a, da, _, _) = self.coeffs(t);
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let sx: f64 = x.iter().sum();
        grad[0] += bar.value * 0.5 * a * r2;
        grad[1] += bar.value * sx;
        grad[2] += bar.value * 0.5 * t * r2;
        for (j, gb) in bar.grad.iter().enumerate() {
            grad[0] += gb * a * x[j];
            grad[1] += gb;
            grad[2] += gb * t * x[j];
        }
        if need.time {
            grad[0] += bar.dt * 0.5 * da * r2;
            grad[2] += bar.dt * 0.5 * r2;
        }
        if let Some(r) = &need.laplacian {
            let m = r.len() as f64;
            grad[0] += bar.laplacian * a * m;
            grad[2] += bar.laplacian * t * m;
        }
        Ok(())
    }

    fn counters(&self) -> &QueryCounters {
        &self.counters
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn main_oracle() -> GaussianSbOracle {
        GaussianSbOracle::new(2f64.sqrt(), 1.0, 1.0, 1.0, 2).unwrap()
    }

    #[test]
    fn pinned_coupling_and_vanishing_backward_drift() {
        let o = main_oracle();
        assert!((o.coupling - 1.0).abs() < 1e-15);
        for k in 0..=10 {
            assert!(o.beta(k as f64 / 10.0).abs() < 1e-15);
        }
        assert!((o.marginal_var(0.0) - 2.0).abs() < 1e-15);
        assert!((o.marginal_var(1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nelson_identity_and_riccati_equations() {
        for (a, b, sigma, t_end) in [(1.4, 1.0, 1.0, 1.0), (0.7, 2.0, 0.5, 3.0), (1.0, 1.0, 2.0, 0.5)] {
            let o = GaussianSbOracle::new(a, b, sigma, t_end, 3).unwrap();
            for k in 0..=50 {
                let t = t_end * k as f64 / 50.0;
                let v = o.marginal_var(t);
                assert!((o.alpha(t) + o.beta(t) + 1.0 / v).abs() < 1e-12);
                let s2 = sigma * sigma;
                let a_ = o.alpha(t);
                assert!((o.alpha_dot(t) + s2 * a_ * a_).abs() < 1e-10);
                let e = 1e-6 * t_end;
                if t > e && t < t_end - e {
                    let fd = (o.beta(t + e) - o.beta(t - e)) / (2.0 * e);
                    assert!((fd - o.beta_dot(t)).abs() < 1e-6 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn symmetric_endpoints_give_symmetric_marginals() {
        let o = GaussianSbOracle::new(1.3, 1.3, 0.8, 2.0, 1).unwrap();
        for k in 0..=20 {
            let t = 2.0 * k as f64 / 20.0;
            assert!((o.marginal_var(t) - o.marginal_var(2.0 - t)).abs() < 1e-12);
        }
        assert!((o.marginal_var(2.0) - 1.69).abs() < 1e-12);
    }

    #[test]
    fn potentials_sum_to_log_marginal() {
        let o = GaussianSbOracle::new(1.2, 0.8, 0.9, 1.5, 2).unwrap();
        for k in 0..=10 {
            let t = 1.5 * k as f64 / 10.0;
            let x = [0.3 * k as f64 - 1.0, 0.5];
            let lhs = o.phi(&x, t) + o.psi(&x, t);
            assert!((lhs - o.log_marginal(&x, t)).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn hjb_residuals_vanish() {
        let o = GaussianSbOracle::new(1.1, 0.6, 1.3, 1.0, 2).unwrap();
        let s2 = o.sigma * o.sigma;
        let f = o.forward_field();
        let g = o.backward_field();
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            let x = [0.4 - 0.1 * k as f64, 1.2];
            let j = f.jet(&x, t, &Need::all(2)).unwrap();
            let n2: f64 = j.grad.iter().map(|v| v * v).sum();
            assert!((j.dt + 0.5 * s2 * j.laplacian + 0.5 * s2 * n2).abs() < 1e-10);
            let j = g.jet(&x, t, &Need::all(2)).unwrap();
            let n2: f64 = j.grad.iter().map(|v| v * v).sum();
            assert!((j.dt - 0.5 * s2 * j.laplacian - 0.5 * s2 * n2).abs() < 1e-10);
        }
    }

    #[test]
    fn oracle_field_vjp_matches_finite_differences() {
        let f = main_oracle().forward_field().with_theta([0.1, -0.2, 0.3]);
        let (x, t) = ([0.5, -0.7], 0.4);
        let need = Need::all(2);
        let bar = JetBar {
            value: 0.3,
            grad: vec![1.1, -0.4],
            dt: 0.8,
            laplacian: -0.5,
        };
        let score = |f: &OracleField| {
            let j = f.jet(&x, t, &need).unwrap();
            bar.value * j.value + bar.grad[0] * j.grad[0] + bar.grad[1] * j.grad[1] + bar.dt * j.dt
                + bar.laplacian * j.laplacian
        };
        let mut g = vec![0.0; 3];
        f.jet_vjp(&x, t, &need, &bar, &mut g).unwrap();
        for k in 0..3 {
            let mut th = f.theta;
            th[k] += 1e-6;
            let up = f.clone().with_theta(th);
            th[k] -= 2e-6;
            let dn = f.clone().with_theta(th);
            let fd = (score(&up) - score(&dn)) / 2e-6;
            assert!((g[k] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn single_points_cost_squared_distance() {
        let cfg = SinkhornConfig {
            epsilon: 0.5,
            ..SinkhornConfig::default()
        };
        let s = sinkhorn_cost(&[0.0, 0.0], &[1.0], &[3.0, 4.0], &[1.0], 2, &cfg).unwrap();
        assert!((s.cost - 25.0).abs() < 1e-12);
    }

    #[test]
    fn cost_is_symmetric() {
        let xs = [0.0, 1.0, -0.5, 2.0, 1.5, 0.3];
        let ys = [0.2, -1.0, 0.9, 0.4];
        let wa = [0.2, 0.5, 0.3];
        let wb = [0.6, 0.4];
        let cfg = SinkhornConfig {
            epsilon: 0.3,
            tol: 1e-12,
            max_iter: 100_000,
        };
        let a = sinkhorn_cost(&xs, &wa, &ys, &wb, 2, &cfg).unwrap();
        let b = sinkhorn_cost(&ys, &wb, &xs, &wa, 2, &cfg).unwrap();
        assert!((a.cost - b.cost).abs() < 1e-9);
        assert!(a.residual <= 1e-12);
    }

    #[test]
    fn non_convergence_is_reported() {
        let cfg = SinkhornConfig {
            epsilon: 1e-3,
            tol: 1e-15,
            max_iter: 2,
        };
        let r = sinkhorn_cost(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0], &[0.5, 3.0], &[1.0, 2.0], 1, &cfg);
        assert!(matches!(r, Err(Error::NonConvergence { iterations: 2, .. })));
    }

    #[test]
    fn closed_form_cost_limits() {
        // eps -> 0 recovers W2^2 = d (a - b)^2
        let c = gaussian_entropic_cost(2.0, 0.5, 1e-9, 3);
        assert!((c - 3.0 * 2.25).abs() < 1e-6);
    }
}
