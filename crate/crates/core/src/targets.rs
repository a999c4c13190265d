//! Benchmark targets, Gaussian priors and reference values.
//!
//! All targets are two-dimensional.
//!
//! | name              | log mu                                        | prior stddev |
//! |-------------------|-----------------------------------------------|--------------|
//! | `standard_normal` | `N(0, I)`                                     | `sqrt 2`     |
//! | `funnel`          | `x0 ~ N(0, 9)`, `x1 | x0 ~ N(0, e^x0)`        | `sqrt 2`     |
//! | `gmm9`            | `1/9 sum N(m_i, I)`, `m_i in {-5,0,5}^2`      | `3.5`        |
//! | `double_well`     | `-(x0^2 - 2)^2 - (x1^2 - 2)^2` (un-normalized) | `sqrt 2`     |

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{normal, NoiseStream};
use crate::stats::log_sum_exp;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetName {
    StandardNormal,
    Funnel,
    Gmm9,
    DoubleWell,
}

impl TargetName {
    pub const ALL: [TargetName; 4] = [
        TargetName::StandardNormal,
        TargetName::Funnel,
        TargetName::Gmm9,
        TargetName::DoubleWell,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetName::StandardNormal => "standard_normal",
            TargetName::Funnel => "funnel",
            TargetName::Gmm9 => "gmm9",
            TargetName::DoubleWell => "double_well",
        }
    }
}

impl fmt::Display for TargetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TargetName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown target `{s}`")))
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Un-normalized target density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetSpec {
    pub name: TargetName,
    pub dim: usize,
}

impl TargetSpec {
    pub fn log_mu(&self, x: &[f64]) -> f64 {
        match self.name {
            TargetName::StandardNormal => -0.5 * (x[0] * x[0] + x[1] * x[1]) - LN_2PI,
            TargetName::Funnel => {
                let lp0 = -x[0] * x[0] / 18.0 - 0.5 * (18.0 * PI).ln();
                let lp1 = -x[1] * x[1] * (-x[0]).exp() / 2.0 - 0.5 * LN_2PI - 0.5 * x[0];
                lp0 + lp1
            }
            TargetName::Gmm9 => {
                let mut terms = [0.0; 9];
                for (k, term) in terms.iter_mut().enumerate() {
                    let m0 = GMM_CENTERS[k / 3];
                    let m1 = GMM_CENTERS[k % 3];
                    let d0 = x[0] - m0;
                    let d1 = x[1] - m1;
                    *term = -0.5 * (d0 * d0 + d1 * d1);
                }
                log_sum_exp(&terms) - LN_2PI - 9f64.ln()
            }
            TargetName::DoubleWell => {
                let a = x[0] * x[0] - 2.0;
                let b = x[1] * x[1] - 2.0;
                -a * a - b * b
            }
        }
    }

    /// Exact draws (rejection sampling for the double well), used as
    /// reference samples for transport metrics.
    pub fn sample(&self, n: usize, stream: &NoiseStream) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.dim);
        for i in 0..n {
            let mut rng = stream.rng(i as u64);
            match self.name {
                TargetName::StandardNormal => {
                    out.push(normal(&mut rng));
                    out.push(normal(&mut rng));
                }
                TargetName::Funnel => {
                    let x0 = 3.0 * normal(&mut rng);
                    out.push(x0);
                    out.push((0.5 * x0).exp() * normal(&mut rng));
                }
                TargetName::Gmm9 => {
                    let k = rng.random_range(0..9usize);
                    out.push(GMM_CENTERS[k / 3] + normal(&mut rng));
                    out.push(GMM_CENTERS[k % 3] + normal(&mut rng));
                }
                TargetName::DoubleWell => {
                    for _ in 0..2 {
                        out.push(sample_double_well_1d(&mut rng));
                    }
                }
            }
        }
        out
    }
}

const GMM_CENTERS: [f64; 3] = [-5.0, 0.0, 5.0];

/// Rejection from `U[-3, 3]`; the 1D density `e^{-(s^2-2)^2}` peaks at 1 and
/// its mass outside the box is below `e^{-49}`.
fn sample_double_well_1d<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let s: f64 = rng.random_range(-3.0..3.0);
        let u: f64 = rng.random();
        let a = s * s - 2.0;
        if u < (-a * a).exp() {
            return s;
        }
    }
}

/// Isotropic Gaussian prior `N(mean, stddev^2 I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    pub dim: usize,
    pub mean: Vec<f64>,
    pub stddev: f64,
}

impl PriorSpec {
    pub fn isotropic(dim: usize, stddev: f64) -> Self {
        Self {
            dim,
            mean: vec![0.0; dim],
            stddev,
        }
    }

    pub fn log_nu(&self, x: &[f64]) -> f64 {
        let s2 = self.stddev * self.stddev;
        let r2: f64 = x.iter().zip(&self.mean).map(|(x, m)| (x - m) * (x - m)).sum();
        -0.5 * r2 / s2 - 0.5 * self.dim as f64 * (LN_2PI + s2.ln())
    }

    /// One draw, consuming `dim` normals from `rng`.
    pub fn draw<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.mean) {
            *o = m + self.stddev * normal(rng);
        }
    }

    pub fn sample(&self, n: usize, stream: &NoiseStream) -> Vec<f64> {
        let mut out = vec![0.0; n * self.dim];
        for (i, row) in out.chunks_exact_mut(self.dim).enumerate() {
            self.draw(&mut stream.rng(i as u64), row);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
    pub log_z: f64,
}

pub fn make_target(name: TargetName) -> (TargetSpec, PriorSpec) {
    let target = TargetSpec { name, dim: 2 };
    let prior_sd = match name {
        TargetName::Gmm9 => 3.5,
        _ => 2f64.sqrt(),
    };
    (target, PriorSpec::isotropic(2, prior_sd))
}

pub fn ground_truth(name: TargetName) -> GroundTruth {
    match name {
        TargetName::StandardNormal => GroundTruth {
            mean: vec![0.0, 0.0],
            stddev: vec![1.0, 1.0],
            log_z: 0.0,
        },
        TargetName::Funnel => GroundTruth {
            mean: vec![0.0, 0.0],
            stddev: vec![3.0, (9.0f64 / 4.0).exp()],
            log_z: 0.0,
        },
        TargetName::Gmm9 => {
            let sd = (53.0f64 / 3.0).sqrt();
            GroundTruth {
                mean: vec![0.0, 0.0],
                stddev: vec![sd, sd],
                log_z: 0.0,
            }
        }
        TargetName::DoubleWell => {
            let (z, m2) = double_well_1d_moments();
            let sd = (m2 / z).sqrt();
            GroundTruth {
                mean: vec![0.0, 0.0],
                stddev: vec![sd, sd],
                log_z: 2.0 * z.ln(),
            }
        }
    }
}

/// `(int e^{-(s^2-2)^2} ds, int s^2 e^{-(s^2-2)^2} ds)`.
pub fn double_well_1d_moments() -> (f64, f64) {
    let w = |s: f64| {
        let a = s * s - 2.0;
        (-a * a).exp()
    };
    // unit panels keep the first Simpson estimate from missing the wells
    let (mut z, mut m2) = (0.0, 0.0);
    for p in -6..6 {
        let (a, b) = (p as f64, p as f64 + 1.0);
        z += adaptive_simpson(&w, a, b, 1e-15);
        m2 += adaptive_simpson(&|s| s * s * w(s), a, b, 1e-15);
    }
    (z, m2)
}

/// Adaptive Simpson quadrature with Richardson correction.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb) = (f(a), f(b));
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use crate::stats::{mean, std_pop};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight transcriptions of the target densities.
    fn reference_log_mu(name: TargetName, x: [f64; 2]) -> f64 {
        let gauss = |v: f64, var: f64| (-v * v / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
        match name {
            TargetName::StandardNormal => (gauss(x[0], 1.0) * gauss(x[1], 1.0)).ln(),
            TargetName::Funnel => gauss(x[0], 9.0).ln() + gauss(x[1], x[0].exp()).ln(),
            TargetName::Gmm9 => {
                let mut p = 0.0;
                for a in [-5.0, 0.0, 5.0] {
                    for b in [-5.0, 0.0, 5.0] {
                        p += gauss(x[0] - a, 1.0) * gauss(x[1] - b, 1.0) / 9.0;
                    }
                }
                p.ln()
            }
            TargetName::DoubleWell => -(x[0].powi(2) - 2.0).powi(2) - (x[1].powi(2) - 2.0).powi(2),
        }
    }

    #[test]
    fn log_densities_match_reference_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for name in TargetName::ALL {
            let (t, _) = make_target(name);
            for _ in 0..1000 {
                let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
                let a = t.log_mu(&x);
                let b = reference_log_mu(name, x);
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pinned_values() {
        let (sn, _) = make_target(TargetName::StandardNormal);
        assert!((sn.log_mu(&[0.0, 0.0]) + (2.0 * PI).ln()).abs() < 1e-15);
        let (dw, _) = make_target(TargetName::DoubleWell);
        let r2 = 2f64.sqrt();
        assert!(dw.log_mu(&[r2, r2]).abs() < 1e-14);
        assert!(dw.log_mu(&[1.3, 1.5]) < 0.0);
        let (g, _) = make_target(TargetName::Gmm9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];
            assert!((g.log_mu(&x) - g.log_mu(&[-x[0], x[1]])).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_name_is_a_configuration_error() {
        assert!(matches!("banana".parse::<TargetName>(), Err(Error::Config(_))));
        assert_eq!("gmm9".parse::<TargetName>().unwrap(), TargetName::Gmm9);
    }

    #[test]
    fn gmm_stddev_is_exact_mixture_value() {
        let gt = ground_truth(TargetName::Gmm9);
        assert!((gt.stddev[0] - 4.203_173_404_306_164).abs() < 1e-12);
    }

    #[test]
    fn double_well_quadrature_agrees_with_fine_trapezoid() {
        let (z, m2) = double_well_1d_moments();
        let n = 400_000;
        let h = 12.0 / n as f64;
        let (mut zt, mut mt) = (0.0, 0.0);
        for k in 0..=n {
            let s = -6.0 + k as f64 * h;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            let e = (-(s * s - 2.0f64).powi(2)).exp();
            zt += w * e * h;
            mt += w * s * s * e * h;
        }
        assert!((z - zt).abs() < 1e-10);
        assert!((m2 - mt).abs() < 1e-10);
        // independent adaptive Gauss-Kronrod values
        assert!((z - 1.340_445_118_332_545_2).abs() < 1e-10);
        assert!((m2 - 2.460_174_851_043_936).abs() < 1e-10);
        let gt = ground_truth(TargetName::DoubleWell);
        assert!((gt.log_z - 2.0 * z.ln()).abs() < 1e-15);
    }

    #[test]
    fn prior_draws_have_requested_moments() {
        let p = PriorSpec::isotropic(2, 2.0);
        let n = 200_000;
        let xs = p.sample(n, &NoiseStream::new(3, Purpose::Prior, 0));
        let col: Vec<f64> = xs.iter().step_by(2).copied().collect();
        assert!(mean(&col).abs() < 5.0 * 2.0 / (n as f64).sqrt());
        assert!((std_pop(&col) - 2.0).abs() < 0.02);
        let again = p.sample(n, &NoiseStream::new(3, Purpose::Prior, 0));
        assert_eq!(xs, again);
    }

    #[test]
    fn prior_log_density_is_normalized_gaussian() {
        let p = PriorSpec::isotropic(2, 2f64.sqrt());
        assert!((p.log_nu(&[0.0, 0.0]) + (4.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn exact_draws_match_truth() {
        for name in TargetName::ALL {
            let (t, _) = make_target(name);
            let gt = ground_truth(name);
            let n = 100_000;
            let xs = t.sample(n, &NoiseStream::new(5, Purpose::Other(1), 0));
            let c0: Vec<f64> = xs.iter().step_by(2).copied().collect();
            assert!((std_pop(&c0) - gt.stddev[0]).abs() < 0.03 * gt.stddev[0], "{name}");
        }
    }

    #[test]
    fn funnel_conditional_variance() {
        let (t, _) = make_target(TargetName::Funnel);
        let xs = t.sample(400_000, &NoiseStream::new(6, Purpose::Other(2), 0));
        let bin: Vec<f64> = xs
            .chunks_exact(2)
            .filter(|r| (r[0] - 1.0).abs() < 0.05)
            .map(|r| r[1])
            .collect();
        let v = crate::stats::var_pop(&bin);
        let expect = 1f64.exp();
        let se = expect * (2.0 / bin.len() as f64).sqrt();
        assert!((v - expect).abs() < 5.0 * se + 0.05 * expect, "{v} vs {expect}");
    }
}
