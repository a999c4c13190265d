//! Scalar-output residual network over `(x, t)`.
//!
//! ```text
//! h_0     = W_in (x, t) + b_in
//! h_{l+1} = act(W_l h_l + b_l) + h_l        l = 0..depth
//! phi     = w_out . h_depth + b_out
//! ```
//!
//! Derivatives with respect to the inputs are propagated forward alongside
//! the hidden state (one tangent per input direction plus an accumulated
//! second-order term for the Laplacian). The parameter pullback replays that
//! computation in reverse, so second-order quantities such as `|grad phi|^2`
//! or `lap phi` can be differentiated with respect to the weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_point, Field, Jet, JetBar, Need, QueryCounters};
use crate::{Error, Result};

/// Seed used by [`ControlField::new`] callers that do not pick their own.
pub const DEFAULT_INIT_SEED: u64 = 0x5eed_0f_c0de;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `log(1 + e^x)`; smooth, so Laplacians are meaningful.
    Softplus,
}

impl Activation {
    pub fn id(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Softplus => 1,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Softplus),
            _ => None,
        }
    }

    /// Value and first three derivatives.
    #[inline]
    fn eval(self, a: f64) -> (f64, f64, f64, f64) {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    (a, 1.0, 0.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0, 0.0)
                }
            }
            Activation::Softplus => {
                let e = (-a.abs()).exp();
                let f = a.max(0.0) + e.ln_1p();
                let s = if a >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                let s1 = s * (1.0 - s);
                (f, s, s1, s1 * (1.0 - 2.0 * s))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    /// Spatial dimension plus one (time).
    pub input_dim: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl NetShape {
    pub fn new(dim: usize, hidden: usize, depth: usize) -> Self {
        Self {
            input_dim: dim + 1,
            hidden,
            depth,
        }
    }

    pub fn num_params(&self) -> usize {
        let (i, h, l) = (self.input_dim, self.hidden, self.depth);
        h * i + h + l * (h * h + h) + h + 1
    }

    fn in_w(&self) -> usize {
        0
    }

    fn in_b(&self) -> usize {
        self.hidden * self.input_dim
    }

    fn layer_w(&self, l: usize) -> usize {
        let h = self.hidden;
        h * self.input_dim + h + l * (h * h + h)
    }

    fn layer_b(&self, l: usize) -> usize {
        self.layer_w(l) + self.hidden * self.hidden
    }

    fn out_w(&self) -> usize {
        self.layer_w(self.depth)
    }

    fn out_b(&self) -> usize {
        self.out_w() + self.hidden
    }
}

#[derive(Clone, Debug)]
pub struct ControlField {
    shape: NetShape,
    activation: Activation,
    params: Vec<f64>,
    counters: QueryCounters,
}

/// Input directions carried as tangents for one query.
struct Plan {
    /// Input coordinate of each tangent (`dim` is time).
    dirs: Vec<usize>,
    /// Whether each tangent contributes to the Laplacian.
    lap: Vec<bool>,
    has_lap: bool,
}

/// Intermediates of one forward pass, kept for the pullback.
struct Trace {
    u: Vec<f64>,
    /// `h_0..h_depth`, each `hidden` long.
    hs: Vec<f64>,
    /// Tangents per layer: `[layer][dir][hidden]`.
    ts: Vec<f64>,
    /// Laplacian accumulators per layer.
    ss: Vec<f64>,
    /// Pre-activations per residual layer.
    pre: Vec<f64>,
    /// Pre-activation tangents per residual layer: `[layer][dir][hidden]`.
    ps: Vec<f64>,
    /// Pre-activation Laplacian terms per residual layer.
    qs: Vec<f64>,
}

impl ControlField {
    /// All parameters zero: the field is identically 0.
    pub fn zeros(shape: NetShape, activation: Activation) -> Self {
        Self {
            shape,
            activation,
            params: vec![0.0; shape.num_params()],
            counters: QueryCounters::default(),
        }
    }

    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for hidden maps; the output map starts at zero so the field is 0.
    pub fn new(shape: NetShape, activation: Activation, seed: u64) -> Self {
        let mut field = Self::zeros(shape, activation);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, h) = (shape.input_dim, shape.hidden);
        let bound_in = 1.0 / (i as f64).sqrt();
        for p in &mut field.params[shape.in_w()..shape.in_b() + h] {
            *p = rng.random_range(-bound_in..bound_in);
        }
        let bound_h = 1.0 / (h as f64).sqrt();
        for l in 0..shape.depth {
            let start = shape.layer_w(l);
            for p in &mut field.params[start..start + h * h + h] {
                *p = rng.random_range(-bound_h..bound_h);
            }
        }
        field
    }

    pub fn from_params(shape: NetShape, activation: Activation, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                shape.num_params(),
                params.len()
            )));
        }
        Ok(Self {
            shape,
            activation,
            params,
            counters: QueryCounters::default(),
        })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Output bias, i.e. the additive constant of the field.
    pub fn output_bias_mut(&mut self) -> &mut f64 {
        let i = self.shape.out_b();
        &mut self.params[i]
    }

    /// Zeroes the time column of the input map, making the field independent of `t`.
    pub fn zero_time_weights(&mut self) {
        let (i, h) = (self.shape.input_dim, self.shape.hidden);
        for r in 0..h {
            self.params[r * i + i - 1] = 0.0;
        }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(self.jet(x, t, &Need::value())?.value)
    }

    pub fn spatial_grad(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.jet(x, t, &Need::grad())?.grad)
    }

    pub fn laplacian(&self, x: &[f64], t: f64) -> Result<f64> {
        let need = Need::grad().with_laplacian(0..self.dim());
        Ok(self.jet(x, t, &need)?.laplacian)
    }

    pub fn time_deriv(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(self.jet(x, t, &Need::value().with_time())?.dt)
    }

    fn plan(&self, need: &Need) -> Plan {
        let d = self.dim();
        let mut dirs = Vec::new();
        let mut lap = Vec::new();
        if need.grad || need.laplacian.is_some() {
            for j in 0..d {
                dirs.push(j);
                lap.push(need.laplacian.as_ref().is_some_and(|r| r.contains(&j)));
            }
        }
        if need.time {
            dirs.push(d);
            lap.push(false);
        }
        Plan {
            has_lap: lap.iter().any(|&b| b),
            dirs,
            lap,
        }
    }

    fn forward(&self, x: &[f64], t: f64, plan: &Plan) -> (Jet, Trace) {
        let s = self.shape;
        let (ni, h, nl) = (s.input_dim, s.hidden, s.depth);
        let nj = plan.dirs.len();
        let p = &self.params;
        let act = self.activation;

        let mut u = Vec::with_capacity(ni);
        u.extend_from_slice(x);
        u.push(t);

        let mut hs = vec![0.0; (nl + 1) * h];
        let mut ts = vec![0.0; (nl + 1) * nj * h];
        let mut ss = if plan.has_lap { vec![0.0; (nl + 1) * h] } else { Vec::new() };
        let mut pre = vec![0.0; nl * h];
        let mut ps = vec![0.0; nl * nj * h];
        let mut qs = if plan.has_lap { vec![0.0; nl * h] } else { Vec::new() };

        let w_in = &p[s.in_w()..s.in_b()];
        let b_in = &p[s.in_b()..s.in_b() + h];
        for r in 0..h {
            let row = &w_in[r * ni..(r + 1) * ni];
            hs[r] = b_in[r] + dot(row, &u);
            for (jj, &dir) in plan.dirs.iter().enumerate() {
                ts[jj * h + r] = row[dir];
            }
        }

        for l in 0..nl {
            let w = &p[s.layer_w(l)..s.layer_w(l) + h * h];
            let b = &p[s.layer_b(l)..s.layer_b(l) + h];
            let (h_prev, h_next) = hs.split_at_mut((l + 1) * h);
            let h_in = &h_prev[l * h..];
            let h_out = &mut h_next[..h];
            let (t_prev, t_next) = ts.split_at_mut((l + 1) * nj * h);
            let t_in = &t_prev[l * nj * h..];
            let t_out = &mut t_next[..nj * h];
            let a_l = &mut pre[l * h..(l + 1) * h];
            let p_l = &mut ps[l * nj * h..(l + 1) * nj * h];
            for r in 0..h {
                let row = &w[r * h..(r + 1) * h];
                a_l[r] = b[r] + dot(row, h_in);
                for jj in 0..nj {
                    p_l[jj * h + r] = dot(row, &t_in[jj * h..(jj + 1) * h]);
                }
            }
            if plan.has_lap {
                let (s_prev, s_next) = ss.split_at_mut((l + 1) * h);
                let s_in = &s_prev[l * h..];
                let s_out = &mut s_next[..h];
                let q_l = &mut qs[l * h..(l + 1) * h];
                for r in 0..h {
                    q_l[r] = dot(&w[r * h..(r + 1) * h], s_in);
                }
                for r in 0..h {
                    let (f, f1, f2, _) = act.eval(a_l[r]);
                    h_out[r] = f + h_in[r];
                    let mut acc = f1 * q_l[r] + s_in[r];
                    for jj in 0..nj {
                        let pj = p_l[jj * h + r];
                        t_out[jj * h + r] = f1 * pj + t_in[jj * h + r];
                        if plan.lap[jj] {
                            acc += f2 * pj * pj;
                        }
                    }
                    s_out[r] = acc;
                }
            } else {
                for r in 0..h {
                    let (f, f1, _, _) = act.eval(a_l[r]);
                    h_out[r] = f + h_in[r];
                    for jj in 0..nj {
                        t_out[jj * h + r] = f1 * p_l[jj * h + r] + t_in[jj * h + r];
                    }
                }
            }
        }

        let w_out = &p[s.out_w()..s.out_w() + h];
        let h_last = &hs[nl * h..];
        let t_last = &ts[nl * nj * h..];
        let mut jet = Jet {
            value: p[s.out_b()] + dot(w_out, h_last),
            ..Jet::default()
        };
        let d = self.dim();
        for (jj, &dir) in plan.dirs.iter().enumerate() {
            let g = dot(w_out, &t_last[jj * h..(jj + 1) * h]);
            if dir == d {
                jet.dt = g;
            } else {
                if jet.grad.is_empty() {
                    jet.grad = vec![0.0; d];
                }
                jet.grad[dir] = g;
            }
        }
        if plan.has_lap {
            jet.laplacian = dot(w_out, &ss[nl * h..]);
        }
        let trace = Trace {
            u,
            hs,
            ts,
            ss,
            pre,
            ps,
            qs,
        };
        (jet, trace)
    }

    fn backward(&self, plan: &Plan, trace: &Trace, bar: &JetBar, grad: &mut [f64]) {
        let s = self.shape;
        let (ni, h, nl) = (s.input_dim, s.hidden, s.depth);
        let nj = plan.dirs.len();
        let d = self.dim();
        let p = &self.params;
        let act = self.activation;

        let dir_bar = |dir: usize| -> f64 {
            if dir == d {
                bar.dt
            } else {
                bar.grad.get(dir).copied().unwrap_or(0.0)
            }
        };

        // output map
        let w_out = &p[s.out_w()..s.out_w() + h];
        let h_last = &trace.hs[nl * h..];
        let t_last = &trace.ts[nl * nj * h..];
        {
            let g_out = &mut grad[s.out_w()..s.out_w() + h];
            for c in 0..h {
                let mut acc = bar.value * h_last[c];
                for (jj, &dir) in plan.dirs.iter().enumerate() {
                    acc += dir_bar(dir) * t_last[jj * h + c];
                }
                if plan.has_lap {
                    acc += bar.laplacian * trace.ss[nl * h + c];
                }
                g_out[c] += acc;
            }
            grad[s.out_b()] += bar.value;
        }

        let mut hbar: Vec<f64> = w_out.iter().map(|w| bar.value * w).collect();
        let mut tbar = vec![0.0; nj * h];
        for (jj, &dir) in plan.dirs.iter().enumerate() {
            let gb = dir_bar(dir);
            for c in 0..h {
                tbar[jj * h + c] = gb * w_out[c];
            }
        }
        let mut sbar: Vec<f64> = if plan.has_lap {
            w_out.iter().map(|w| bar.laplacian * w).collect()
        } else {
            Vec::new()
        };

        let mut abar = vec![0.0; h];
        let mut pbar = vec![0.0; nj * h];
        let mut qbar = vec![0.0; if plan.has_lap { h } else { 0 }];

        for l in (0..nl).rev() {
            let w = &p[s.layer_w(l)..s.layer_w(l) + h * h];
            let h_in = &trace.hs[l * h..(l + 1) * h];
            let t_in = &trace.ts[l * nj * h..(l + 1) * nj * h];
            let a_l = &trace.pre[l * h..(l + 1) * h];
            let p_l = &trace.ps[l * nj * h..(l + 1) * nj * h];

            for r in 0..h {
                let (_, f1, f2, f3) = act.eval(a_l[r]);
                let mut ab = f1 * hbar[r];
                for jj in 0..nj {
                    let pj = p_l[jj * h + r];
                    let tb = tbar[jj * h + r];
                    ab += f2 * pj * tb;
                    let mut pb = f1 * tb;
                    if plan.has_lap && plan.lap[jj] {
                        let sb = sbar[r];
                        ab += f3 * pj * pj * sb;
                        pb += 2.0 * f2 * pj * sb;
                    }
                    pbar[jj * h + r] = pb;
                }
                if plan.has_lap {
                    let q = trace.qs[l * h + r];
                    ab += f2 * q * sbar[r];
                    qbar[r] = f1 * sbar[r];
                }
                abar[r] = ab;
            }

            let (gw_start, gb_start) = (s.layer_w(l), s.layer_b(l));
            let s_in: &[f64] = if plan.has_lap {
                &trace.ss[l * h..(l + 1) * h]
            } else {
                &[]
            };
            // Residual connections pass hbar/tbar/sbar straight through; the
            // W^T products are added on top.
            let mut hbar_new = hbar.clone();
            let mut tbar_new = tbar.clone();
            let mut sbar_new = sbar.clone();
            for r in 0..h {
                let row = &w[r * h..(r + 1) * h];
                let gw = &mut grad[gw_start + r * h..gw_start + (r + 1) * h];
                let ab = abar[r];
                for c in 0..h {
                    let mut acc = ab * h_in[c];
                    for jj in 0..nj {
                        acc += pbar[jj * h + r] * t_in[jj * h + c];
                    }
                    if plan.has_lap {
                        acc += qbar[r] * s_in[c];
                    }
                    gw[c] += acc;
                }
                for c in 0..h {
                    hbar_new[c] += row[c] * ab;
                }
                for jj in 0..nj {
                    let pb = pbar[jj * h + r];
                    if pb != 0.0 {
                        let tb = &mut tbar_new[jj * h..(jj + 1) * h];
                        for c in 0..h {
                            tb[c] += row[c] * pb;
                        }
                    }
                }
                if plan.has_lap {
                    let qb = qbar[r];
                    for c in 0..h {
                        sbar_new[c] += row[c] * qb;
                    }
                }
                grad[gb_start + r] += ab;
            }
            hbar = hbar_new;
            tbar = tbar_new;
            sbar = sbar_new;
        }

        // input map: h_0 = W_in u + b_in, tangent_j = W_in[:, dir_j]
        for r in 0..h {
            let gw = &mut grad[s.in_w() + r * ni..s.in_w() + (r + 1) * ni];
            for c in 0..ni {
                gw[c] += hbar[r] * trace.u[c];
            }
            for (jj, &dir) in plan.dirs.iter().enumerate() {
                gw[dir] += tbar[jj * h + r];
            }
        }
        for r in 0..h {
            grad[s.in_b() + r] += hbar[r];
        }
    }
}

/// Dot product with four interleaved partial sums (fixed order).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Field for ControlField {
    fn dim(&self) -> usize {
        self.shape.input_dim - 1
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn jet(&self, x: &[f64], t: f64, need: &Need) -> Result<Jet> {
        check_point(x, t, self.dim())?;
        self.counters.record(need);
        let plan = self.plan(need);
        let (jet, _) = self.forward(x, t, &plan);
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
        check_point(x, t, self.dim())?;
        if grad.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient buffer has {} entries, field has {} parameters",
                grad.len(),
                self.params.len()
            )));
        }
        let plan = self.plan(need);
        let (_, trace) = self.forward(x, t, &plan);
        self.backward(&plan, &trace, bar, grad);
        Ok(())
    }

    fn counters(&self) -> &QueryCounters {
        &self.counters
    }
}
