//! Closed-form quadratic potential, handy as a network-free test field.

use super::{check_point, Field, Jet, JetBar, Need, QueryCounters};
use crate::{Error, Result};

/// `f(x, t) = (a0 + a1 t)/2 |x|^2 + b.x + c0 + c1 t`
///
/// Parameters are laid out as `[a0, a1, b_0 .. b_{d-1}, c0, c1]`.
#[derive(Clone, Debug)]
pub struct QuadraticField {
    dim: usize,
    params: Vec<f64>,
    counters: QueryCounters,
}

impl QuadraticField {
    pub fn new(dim: usize, a0: f64, a1: f64, b: &[f64], c0: f64, c1: f64) -> Result<Self> {
        if b.len() != dim {
            return Err(Error::Shape(format!(
                "linear term has {} entries, expected {dim}",
                b.len()
            )));
        }
        let mut params = vec![a0, a1];
        params.extend_from_slice(b);
        params.extend([c0, c1]);
        Ok(Self {
            dim,
            params,
            counters: QueryCounters::default(),
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            params: vec![0.0; dim + 4],
            counters: QueryCounters::default(),
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (f64, f64, &[f64], f64, f64) {
        let d = self.dim;
        let p = &self.params;
        (p[0], p[1], &p[2..2 + d], p[2 + d], p[3 + d])
    }
}

impl Field for QuadraticField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn jet(&self, x: &[f64], t: f64, need: &Need) -> Result<Jet> {
        check_point(x, t, self.dim)?;
        self.counters.record(need);
        let (a0, a1, b, c0, c1) = self.split();
        let a = a0 + a1 * t;
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let bx: f64 = b.iter().zip(x).map(|(b, x)| b * x).sum();
        let mut jet = Jet {
            value: 0.5 * a * r2 + bx + c0 + c1 * t,
            ..Jet::default()
        };
        if need.grad || need.laplacian.is_some() {
            jet.grad = x.iter().zip(b).map(|(x, b)| a * x + b).collect();
        }
        if need.time {
            jet.dt = 0.5 * a1 * r2 + c1;
        }
        if let Some(r) = &need.laplacian {
            jet.laplacian = a * r.len() as f64;
        }
        Ok(jet)
    }

    fn jet_vjp(
        &self,
        x: &[f64],
        t: f64,
        need: &Need,
        bar: &JetBar,
        grad: &mut [f64],
    ) -> Result<()> {
        check_point(x, t, self.dim)?;
        let d = self.dim;
        let r2: f64 = x.iter().map(|v| v * v).sum();
        grad[0] += bar.value * 0.5 * r2;
        grad[1] += bar.value * 0.5 * t * r2;
        for j in 0..d {
            grad[2 + j] += bar.value * x[j];
        }
        grad[2 + d] += bar.value;
        grad[3 + d] += bar.value * t;
        if !bar.grad.is_empty() {
            for j in 0..d {
                grad[0] += bar.grad[j] * x[j];
                grad[1] += bar.grad[j] * t * x[j];
                grad[2 + j] += bar.grad[j];
            }
        }
        if need.time {
            grad[1] += bar.dt * 0.5 * r2;
            grad[3 + d] += bar.dt;
        }
        if let Some(r) = &need.laplacian {
            let m = r.len() as f64;
            grad[0] += bar.laplacian * m;
            grad[1] += bar.laplacian * t * m;
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

    #[test]
    fn half_square_norm() {
        let f = QuadraticField::new(2, 1.0, 0.0, &[0.0, 0.0], 0.0, 0.0).unwrap();
        let jet = f.jet(&[0.3, -1.1], 0.7, &Need::all(2)).unwrap();
        assert!((jet.value - 0.5 * (0.09 + 1.21)).abs() < 1e-15);
        assert_eq!(jet.grad, vec![0.3, -1.1]);
        assert_eq!(jet.laplacian, 2.0);
        assert_eq!(jet.dt, 0.0);
    }

    #[test]
    fn vjp_matches_parameter_finite_differences() {
        let f = QuadraticField::new(2, 0.4, -0.3, &[0.2, 0.5], 0.1, 0.9).unwrap();
        let (x, t) = ([0.6, -0.4], 0.35);
        let need = Need::all(2);
        let bar = JetBar {
            value: 0.7,
            grad: vec![-0.2, 1.3],
            dt: 0.4,
            laplacian: -0.6,
        };
        let score = |f: &QuadraticField| {
            let j = f.jet(&x, t, &need).unwrap();
            bar.value * j.value
                + bar.grad[0] * j.grad[0]
                + bar.grad[1] * j.grad[1]
                + bar.dt * j.dt
                + bar.laplacian * j.laplacian
        };
        let mut g = vec![0.0; f.num_params()];
        f.jet_vjp(&x, t, &need, &bar, &mut g).unwrap();
        for k in 0..g.len() {
            let mut up = f.clone();
            up.params_mut()[k] += 1e-6;
            let mut dn = f.clone();
            dn.params_mut()[k] -= 1e-6;
            let fd = (score(&up) - score(&dn)) / 2e-6;
            assert!((g[k] - fd).abs() < 1e-8, "param {k}: {} vs {fd}", g[k]);
        }
    }
}
