//! Scalar reverse-mode tape whose leaves are field jet components.
//!
//! Field queries are evaluated eagerly (in parallel over points) and each
//! requested jet component becomes a leaf. Arithmetic on [`Var`]s records
//! nodes. [`Graph::param_grads`] runs the tape backwards once, then hands the
//! leaf adjoints of every query to its field's pullback.

use rayon::prelude::*;

use super::{Field, Jet, JetBar, Need};
use crate::{Error, Result};

/// Handle to a scalar node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    Abs(usize),
    Square(usize),
    Exp(usize),
    Log(usize),
    /// Variadic ops refer to `args[start..start + len]`.
    Sum(usize, usize),
    Mean(usize, usize),
    VarPop(usize, usize),
    /// `sum_j coefs[j] * args[j]` over the shared range.
    Lin(usize, usize),
    SumSq(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::VarPop(..) => "var_pop",
            Op::Lin(..) => "lin",
            Op::SumSq(..) => "sum_sq",
        }
    }
}

struct Query<'f> {
    field: &'f dyn Field,
    points: Vec<f64>,
    times: Vec<f64>,
    need: Need,
    layout: Layout,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    base: usize,
    stride: usize,
    dim: usize,
    grad: bool,
    time: bool,
    lap: bool,
}

impl Layout {
    fn new(base: usize, dim: usize, need: &Need) -> Self {
        let grad = need.grad;
        let time = need.time;
        let lap = need.laplacian.is_some();
        let stride = 1 + if grad { dim } else { 0 } + time as usize + lap as usize;
        Self {
            base,
            stride,
            dim,
            grad,
            time,
            lap,
        }
    }

    fn dt_offset(&self) -> usize {
        1 + if self.grad { self.dim } else { 0 }
    }

    fn lap_offset(&self) -> usize {
        self.dt_offset() + self.time as usize
    }
}

/// Leaf handles for one batched field query.
#[derive(Clone, Copy, Debug)]
pub struct FieldBatch {
    layout: Layout,
    len: usize,
}

impl FieldBatch {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn at(&self, i: usize, off: usize) -> Var {
        assert!(i < self.len, "point {i} out of range for batch of {}", self.len);
        Var(self.layout.base + i * self.layout.stride + off)
    }

    pub fn value(&self, i: usize) -> Var {
        self.at(i, 0)
    }

    pub fn grad(&self, i: usize, j: usize) -> Var {
        assert!(self.layout.grad && j < self.layout.dim, "gradient not queried");
        self.at(i, 1 + j)
    }

    pub fn dt(&self, i: usize) -> Var {
        assert!(self.layout.time, "time derivative not queried");
        self.at(i, self.layout.dt_offset())
    }

    pub fn lap(&self, i: usize) -> Var {
        assert!(self.layout.lap, "laplacian not queried");
        self.at(i, self.layout.lap_offset())
    }
}

/// Reverse-mode tape over scalars, borrowing the fields it queries.
#[derive(Default)]
pub struct Graph<'f> {
    ops: Vec<Op>,
    vals: Vec<f64>,
    args: Vec<usize>,
    coefs: Vec<f64>,
    queries: Vec<Query<'f>>,
    first_bad: Option<usize>,
}

/// Points per pullback chunk. Fixed so the reduction tree does not depend on
/// the number of workers.
const VJP_CHUNK: usize = 256;

impl<'f> Graph<'f> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.0]
    }

    /// Value of `v`, or the first non-finite node recorded so far.
    pub fn checked_value(&self, v: Var) -> Result<f64> {
        self.check()?;
        Ok(self.vals[v.0])
    }

    /// Fails if any recorded node is non-finite.
    pub fn check(&self) -> Result<()> {
        match self.first_bad {
            Some(node) => Err(Error::Numeric {
                node,
                op: self.ops[node].name(),
            }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, val: f64) -> Var {
        let id = self.ops.len();
        if !val.is_finite() && self.first_bad.is_none() {
            self.first_bad = Some(id);
        }
        self.ops.push(op);
        self.vals.push(val);
        Var(id)
    }

    pub fn constant(&mut self, c: f64) -> Var {
        self.push(Op::Const, c)
    }

    /// Evaluates `field` at `points` (row-major, `dim` per point) and records
    /// the requested jet components as leaves.
    pub fn query(
        &mut self,
        field: &'f dyn Field,
        points: &[f64],
        times: &[f64],
        need: &Need,
    ) -> Result<FieldBatch> {
        let dim = field.dim();
        let n = times.len();
        if points.len() != n * dim {
            return Err(Error::Shape(format!(
                "{} coordinates for {} points of dimension {}",
                points.len(),
                n,
                dim
            )));
        }
        let jets: Vec<Jet> = (0..n)
            .into_par_iter()
            .map(|i| field.jet(&points[i * dim..(i + 1) * dim], times[i], need))
            .collect::<Result<_>>()?;
        let layout = Layout::new(self.ops.len(), dim, need);
        self.ops.reserve(n * layout.stride);
        self.vals.reserve(n * layout.stride);
        for jet in &jets {
            self.push(Op::Leaf, jet.value);
            if layout.grad {
                for &g in &jet.grad {
                    self.push(Op::Leaf, g);
                }
            }
            if layout.time {
                self.push(Op::Leaf, jet.dt);
            }
            if layout.lap {
                self.push(Op::Leaf, jet.laplacian);
            }
        }
        self.queries.push(Query {
            field,
            points: points.to_vec(),
            times: times.to_vec(),
            need: need.clone(),
            layout,
        });
        Ok(FieldBatch { layout, len: n })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0] + self.vals[b.0];
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0] - self.vals[b.0];
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0] * self.vals[b.0];
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0] / self.vals[b.0];
        self.push(Op::Div(a.0, b.0), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.vals[a.0];
        self.push(Op::Neg(a.0), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.vals[a.0] * c;
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.vals[a.0] + c;
        self.push(Op::AddConst(a.0), v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].abs();
        self.push(Op::Abs(a.0), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.vals[a.0];
        self.push(Op::Square(a.0), x * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].exp();
        self.push(Op::Exp(a.0), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].ln();
        self.push(Op::Log(a.0), v)
    }

    fn variadic(&mut self, xs: &[Var]) -> (usize, usize) {
        let start = self.args.len();
        self.args.extend(xs.iter().map(|v| v.0));
        self.coefs.resize(self.args.len(), 0.0);
        (start, xs.len())
    }

    /// `sum_j c_j x_j` for constant coefficients.
    pub fn lin(&mut self, xs: &[Var], cs: &[f64]) -> Var {
        assert_eq!(xs.len(), cs.len(), "coefficient count mismatch");
        let v = xs.iter().zip(cs).map(|(x, c)| c * self.vals[x.0]).sum();
        let (s, n) = self.variadic(xs);
        self.coefs[s..s + n].copy_from_slice(cs);
        self.push(Op::Lin(s, n), v)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|x| self.vals[x.0]).sum();
        let (s, n) = self.variadic(xs);
        self.push(Op::Sum(s, n), v)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|x| self.vals[x.0]).sum::<f64>() / xs.len() as f64;
        let (s, n) = self.variadic(xs);
        self.push(Op::Mean(s, n), v)
    }

    /// Population variance (divisor `n`), two-pass.
    pub fn var_pop(&mut self, xs: &[Var]) -> Var {
        let vals: Vec<f64> = xs.iter().map(|x| self.vals[x.0]).collect();
        let v = crate::stats::var_pop(&vals);
        let (s, n) = self.variadic(xs);
        self.push(Op::VarPop(s, n), v)
    }

    /// `sum_j a_j * b_j`.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        let terms: Vec<Var> = a.iter().zip(b).map(|(&x, &y)| self.mul(x, y)).collect();
        self.sum(&terms)
    }

    /// `sum_j a_j^2`.
    pub fn norm_sq(&mut self, a: &[Var]) -> Var {
        let v = a.iter().map(|x| self.vals[x.0] * self.vals[x.0]).sum();
        let (s, n) = self.variadic(a);
        self.push(Op::SumSq(s, n), v)
    }

    /// Adjoint of every node with respect to `out`.
    pub fn adjoints(&self, out: Var) -> Result<Vec<f64>> {
        self.check()?;
        let mut bar = vec![0.0; out.0 + 1];
        bar[out.0] = 1.0;
        for id in (0..=out.0).rev() {
            let b = bar[id];
            if b == 0.0 {
                continue;
            }
            match self.ops[id] {
                Op::Leaf | Op::Const => {}
                Op::Add(a, c) => {
                    bar[a] += b;
                    bar[c] += b;
                }
                Op::Sub(a, c) => {
                    bar[a] += b;
                    bar[c] -= b;
                }
                Op::Mul(a, c) => {
                    bar[a] += b * self.vals[c];
                    bar[c] += b * self.vals[a];
                }
                Op::Div(a, c) => {
                    let y = self.vals[c];
                    bar[a] += b / y;
                    bar[c] -= b * self.vals[a] / (y * y);
                }
                Op::Neg(a) => bar[a] -= b,
                Op::Scale(a, k) => bar[a] += b * k,
                Op::AddConst(a) => bar[a] += b,
                Op::Abs(a) => {
                    // subgradient 0 at the kink
                    let x = self.vals[a];
                    if x > 0.0 {
                        bar[a] += b;
                    } else if x < 0.0 {
                        bar[a] -= b;
                    }
                }
                Op::Square(a) => bar[a] += 2.0 * b * self.vals[a],
                Op::Exp(a) => bar[a] += b * self.vals[id],
                Op::Log(a) => bar[a] += b / self.vals[a],
                Op::Sum(s, n) => {
                    for &a in &self.args[s..s + n] {
                        bar[a] += b;
                    }
                }
                Op::Mean(s, n) => {
                    let w = b / n as f64;
                    for &a in &self.args[s..s + n] {
                        bar[a] += w;
                    }
                }
                Op::VarPop(s, n) => {
                    let args = &self.args[s..s + n];
                    let m = args.iter().map(|&a| self.vals[a]).sum::<f64>() / n as f64;
                    let w = 2.0 * b / n as f64;
                    for &a in args {
                        bar[a] += w * (self.vals[a] - m);
                    }
                }
                Op::Lin(s, n) => {
                    for (&a, &c) in self.args[s..s + n].iter().zip(&self.coefs[s..s + n]) {
                        bar[a] += b * c;
                    }
                }
                Op::SumSq(s, n) => {
                    for &a in &self.args[s..s + n] {
                        bar[a] += 2.0 * b * self.vals[a];
                    }
                }
            }
        }
        Ok(bar)
    }

    /// Gradient of `out` with respect to the parameters of each field in
    /// `fields` (matched by address). Fields never queried get zeros.
    pub fn param_grads(&self, out: Var, fields: &[&dyn Field]) -> Result<Vec<Vec<f64>>> {
        let bar = self.adjoints(out)?;
        let mut grads: Vec<Vec<f64>> = fields.iter().map(|f| vec![0.0; f.num_params()]).collect();
        for q in &self.queries {
            if q.layout.base > out.0 {
                continue;
            }
            let Some(slot) = fields.iter().position(|f| same_field(*f, q.field)) else {
                continue;
            };
            let g = pull_back(q, &bar)?;
            for (acc, v) in grads[slot].iter_mut().zip(g) {
                *acc += v;
            }
        }
        Ok(grads)
    }

    pub fn param_grad(&self, out: Var, field: &dyn Field) -> Result<Vec<f64>> {
        Ok(self.param_grads(out, &[field])?.pop().unwrap_or_default())
    }
}

fn same_field(a: &dyn Field, b: &dyn Field) -> bool {
    std::ptr::addr_eq(a as *const dyn Field, b as *const dyn Field)
}

fn leaf_bar(layout: &Layout, bar: &[f64], i: usize) -> JetBar {
    let base = layout.base + i * layout.stride;
    let get = |k: usize| bar.get(base + k).copied().unwrap_or(0.0);
    JetBar {
        value: get(0),
        grad: if layout.grad {
            (0..layout.dim).map(|j| get(1 + j)).collect()
        } else {
            Vec::new()
        },
        dt: if layout.time { get(layout.dt_offset()) } else { 0.0 },
        laplacian: if layout.lap { get(layout.lap_offset()) } else { 0.0 },
    }
}

/// Pullback of one query: per-chunk partial sums are reduced in chunk order.
fn pull_back(q: &Query<'_>, bar: &[f64]) -> Result<Vec<f64>> {
    let n = q.times.len();
    let dim = q.layout.dim;
    let p = q.field.num_params();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(VJP_CHUNK)
        .map(|s| (s, (s + VJP_CHUNK).min(n)))
        .collect();
    let partials: Vec<Option<Vec<f64>>> = chunks
        .par_iter()
        .map(|&(s, e)| -> Result<Option<Vec<f64>>> {
            let mut acc: Option<Vec<f64>> = None;
            for i in s..e {
                let jb = leaf_bar(&q.layout, bar, i);
                if jb.is_zero() {
                    continue;
                }
                let buf = acc.get_or_insert_with(|| vec![0.0; p]);
                q.field.jet_vjp(
                    &q.points[i * dim..(i + 1) * dim],
                    q.times[i],
                    &q.need,
                    &jb,
                    buf,
                )?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; p];
    for part in partials.into_iter().flatten() {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    Ok(total)
}
