//! Reverse-mode differentiation over vector-valued tape nodes, plus Adam.
//!
//! A [`Tape`] records primitive operations in evaluation order. Every node
//! holds its forward value; [`Tape::backward`] walks the nodes once in
//! reverse and accumulates adjoints. Nodes built only from constants are
//! untracked and never receive adjoints, so differentiating a plan through
//! a frozen model skips the weight outer products entirely.
//!
//! ```
//! use rip_core::diffmath::Tape;
//!
//! let mut tape = Tape::new();
//! let p = tape.input(vec![3.0]);
//! let y = tape.square(p);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.scalar(y), 9.0);
//! assert_eq!(grads.wrt(p).unwrap(), &[6.0]);
//! ```

use crate::error::{contract, Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    MatVec { w: usize, x: usize, rows: usize },
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    /// Log-density of a 2D Gaussian with lower Cholesky factor stored as
    /// `[l11, l22, l21]`.
    GaussLogDensity { x: usize, mean: usize, scale: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::MatVec { .. } => "matvec",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::GaussLogDensity { .. } => "gauss_log_density",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
    tracked: bool,
}

/// Append-only record of a computation. Confined to one thread.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(usize, &'static str)>,
}

/// Adjoints produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    /// Adjoint of `v`, or `None` if `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|a| a.as_deref())
    }

    /// Number of nodes the backward pass processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log N(x; mean, L Lᵀ)` for `L = [[l11, 0], [l21, l22]]`.
pub fn gauss_log_density(x: [f64; 2], mean: [f64; 2], l11: f64, l22: f64, l21: f64) -> f64 {
    let z1 = (x[0] - mean[0]) / l11;
    let z2 = (x[1] - mean[1] - l21 * z1) / l22;
    -(2.0 * PI).ln() - l11.ln() - l22.ln() - 0.5 * (z1 * z1 + z2 * z2)
}

/// Adds `adj` into `acc`, summing when `acc` is a broadcast scalar.
fn accumulate(acc: &mut [f64], adj: &[f64], factor: impl Fn(usize) -> f64) {
    if acc.len() == adj.len() {
        for (i, (a, g)) in acc.iter_mut().zip(adj).enumerate() {
            *a += g * factor(i);
        }
    } else {
        acc[0] += adj.iter().enumerate().map(|(i, g)| g * factor(i)).sum::<f64>();
    }
}

fn broadcast_len(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { nodes: Vec::with_capacity(n), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>, tracked: bool) -> Var {
        let id = self.nodes.len();
        if self.fault.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.fault = Some((id, op.name()));
        }
        self.nodes.push(Node { op, value, tracked });
        Var(id)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf whose gradient is wanted.
    pub fn input(&mut self, values: Vec<f64>) -> Var {
        self.push(Op::Leaf, values, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(Op::Leaf, values, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// First non-finite primitive recorded so far.
    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some((node, op)) => Err(Error::Numerical { op, node }),
            None => Ok(()),
        }
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = broadcast_len(va.len(), vb.len())
            .unwrap_or_else(|| panic!("shape mismatch: {} vs {}", va.len(), vb.len()));
        let pick = |v: &Vec<f64>, i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let out = (0..n)
            .map(|i| if mul { pick(va, i) * pick(vb, i) } else { pick(va, i) + pick(vb, i) })
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        let op = if mul { Op::Mul(a.0, b.0) } else { Op::Add(a.0, b.0) };
        self.push(op, out, tracked)
    }

    /// Elementwise sum; a length-1 operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, false)
    }

    /// Elementwise product; a length-1 operand broadcasts.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, true)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| -x).collect();
        let tracked = self.tracked(a);
        self.push(Op::Neg(a.0), out, tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// Row-major `rows × cols` matrix `w` times vector `x`.
    pub fn matvec(&mut self, w: Var, x: Var, rows: usize) -> Var {
        let (wv, xv) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        let cols = xv.len();
        assert_eq!(wv.len(), rows * cols, "matvec shape mismatch");
        let out = wv
            .chunks_exact(cols)
            .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        let tracked = self.tracked(w) || self.tracked(x);
        self.push(Op::MatVec { w: w.0, x: x.0, rows }, out, tracked)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let tracked = self.tracked(a);
        self.push(op, out, tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let tracked = self.tracked(a);
        self.push(Op::Sum(a.0), vec![s], tracked)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::with_capacity(parts.iter().map(|p| self.nodes[p.0].value.len()).sum());
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), out, tracked)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.nodes[a.0].value[start..start + len].to_vec();
        let tracked = self.tracked(a);
        self.push(Op::Slice { x: a.0, start }, out, tracked)
    }

    /// Log-density of point `x` (len 2) under a 2D Gaussian with `mean`
    /// (len 2) and lower Cholesky factor `scale = [l11, l22, l21]`.
    pub fn gauss_log_density(&mut self, x: Var, mean: Var, scale: Var) -> Var {
        let (xv, mv, sv) = (self.value(x), self.value(mean), self.value(scale));
        assert!(xv.len() == 2 && mv.len() == 2 && sv.len() == 3, "gauss_log_density shapes");
        let lp = gauss_log_density([xv[0], xv[1]], [mv[0], mv[1]], sv[0], sv[1], sv[2]);
        let tracked = self.tracked(x) || self.tracked(mean) || self.tracked(scale);
        self.push(Op::GaussLogDensity { x: x.0, mean: mean.0, scale: scale.0 }, vec![lp], tracked)
    }

    /// Propagates adjoints from the scalar `out` to every tracked node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        self.check()?;
        if self.nodes[out.0].value.len() != 1 {
            return contract("backward requires a scalar output");
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        adjoints[out.0] = Some(vec![1.0]);
        let mut visited = 0;
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            let Some(adj) = adjoints[id].take() else { continue };
            visited += 1;
            if node.tracked {
                self.propagate(node, &adj, &mut adjoints);
            }
            adjoints[id] = Some(adj);
        }
        Ok(Gradients { adjoints, visited })
    }

    fn slot<'a>(&self, adjoints: &'a mut [Option<Vec<f64>>], i: usize) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[i].tracked {
            return None;
        }
        let len = self.nodes[i].value.len();
        Some(adjoints[i].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, adj: &[f64], adjoints: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| &self.nodes[i].value;
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for i in [a, b] {
                    if let Some(g) = self.slot(adjoints, i) {
                        accumulate(g, adj, |_| 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let pick = |v: &Vec<f64>, i: usize| if v.len() == 1 { v[0] } else { v[i] };
                if let Some(g) = self.slot(adjoints, a) {
                    accumulate(g, adj, |i| pick(vb, i));
                }
                if let Some(g) = self.slot(adjoints, b) {
                    accumulate(g, adj, |i| pick(va, i));
                }
            }
            Op::Neg(a) => {
                if let Some(g) = self.slot(adjoints, a) {
                    accumulate(g, adj, |_| -1.0);
                }
            }
            Op::MatVec { w, x, rows } => {
                let xv = val(x);
                let cols = xv.len();
                if self.nodes[x].tracked {
                    let wv = val(w);
                    let g = self.slot(adjoints, x).expect("tracked");
                    for (r, a) in adj.iter().enumerate().take(rows) {
                        if *a == 0.0 {
                            continue;
                        }
                        for (gc, wc) in g.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                            *gc += a * wc;
                        }
                    }
                }
                if self.nodes[w].tracked {
                    let g = self.slot(adjoints, w).expect("tracked");
                    for (r, a) in adj.iter().enumerate().take(rows) {
                        if *a == 0.0 {
                            continue;
                        }
                        for (gc, xc) in g[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                            *gc += a * xc;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(g) = self.slot(adjoints, a) {
                    let y = &node.value;
                    accumulate(g, adj, |i| 1.0 - y[i] * y[i]);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(g) = self.slot(adjoints, a) {
                    let y = &node.value;
                    accumulate(g, adj, |i| y[i] * (1.0 - y[i]));
                }
            }
            Op::Softplus(a) => {
                let x = val(a);
                if let Some(g) = self.slot(adjoints, a) {
                    accumulate(g, adj, |i| sigmoid(x[i]));
                }
            }
            Op::Exp(a) => {
                if let Some(g) = self.slot(adjoints, a) {
                    let y = &node.value;
                    accumulate(g, adj, |i| y[i]);
                }
            }
            Op::Log(a) => {
                let x = val(a);
                if let Some(g) = self.slot(adjoints, a) {
                    accumulate(g, adj, |i| 1.0 / x[i]);
                }
            }
            Op::Square(a) => {
                let x = val(a);
                if let Some(g) = self.slot(adjoints, a) {
                    accumulate(g, adj, |i| 2.0 * x[i]);
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.slot(adjoints, a) {
                    for gi in g.iter_mut() {
                        *gi += adj[0];
                    }
                }
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if let Some(g) = self.slot(adjoints, p) {
                        for (gi, a) in g.iter_mut().zip(&adj[offset..offset + len]) {
                            *gi += a;
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                if let Some(g) = self.slot(adjoints, x) {
                    for (gi, a) in g[start..start + adj.len()].iter_mut().zip(adj) {
                        *gi += a;
                    }
                }
            }
            Op::GaussLogDensity { x, mean, scale } => {
                let (xv, mv, sv) = (val(x), val(mean), val(scale));
                let (l11, l22, l21) = (sv[0], sv[1], sv[2]);
                let z1 = (xv[0] - mv[0]) / l11;
                let z2 = (xv[1] - mv[1] - l21 * z1) / l22;
                let a = adj[0];
                let g_z1 = -z1 + z2 * l21 / l22;
                let d1 = a * g_z1 / l11;
                let d2 = a * -z2 / l22;
                let d_l11 = a * (-1.0 / l11 - g_z1 * z1 / l11);
                let d_l22 = a * (-1.0 + z2 * z2) / l22;
                let d_l21 = a * z2 * z1 / l22;
                if let Some(g) = self.slot(adjoints, x) {
                    g[0] += d1;
                    g[1] += d2;
                }
                if let Some(g) = self.slot(adjoints, mean) {
                    g[0] -= d1;
                    g[1] -= d2;
                }
                if let Some(g) = self.slot(adjoints, scale) {
                    g[0] += d_l11;
                    g[1] += d_l22;
                    g[2] += d_l21;
                }
            }
        }
    }
}

/// A named region of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter storage with a named segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    /// Zero-initialised vector with segments laid out in the given order.
    pub fn zeros(spec: &[(&str, usize)]) -> Self {
        let mut layout = Vec::with_capacity(spec.len());
        let mut offset = 0;
        for &(name, len) in spec {
            layout.push(Segment { name: name.to_string(), offset, len });
            offset += len;
        }
        Self { values: vec![0.0; offset], layout }
    }

    pub fn from_parts(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let mut expected = 0;
        for seg in &layout {
            if seg.offset != expected {
                return contract(format!("segment `{}` is not contiguous", seg.name));
            }
            expected += seg.len;
        }
        if expected != values.len() {
            return contract(format!("layout covers {expected} values, array has {}", values.len()));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let seg = self.layout.iter().find(|s| s.name == name)?;
        Some(&mut self.values[seg.offset..seg.offset + seg.len])
    }

    /// Places every segment on `tape`, tracked or constant.
    pub fn to_tape(&self, tape: &mut Tape, tracked: bool) -> ParamVars {
        let vars = self
            .layout
            .iter()
            .map(|s| {
                let v = self.values[s.offset..s.offset + s.len].to_vec();
                if tracked {
                    tape.input(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        ParamVars { vars }
    }

    /// Gathers per-segment adjoints into one flat gradient array.
    pub fn gather(&self, vars: &ParamVars, grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for (seg, var) in self.layout.iter().zip(&vars.vars) {
            if let Some(g) = grads.wrt(*var) {
                out[seg.offset..seg.offset + seg.len].copy_from_slice(g);
            }
        }
        out
    }
}

/// Tape handles of a [`ParamVector`]'s segments, in layout order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn as_slice(&self) -> &[Var] {
        &self.vars
    }
}

/// Evaluates `f` over `params` and returns the value and the gradient with
/// respect to every parameter entry.
pub fn forward_backward<F>(params: &ParamVector, f: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Var,
{
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, true);
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out)?;
    Ok((tape.scalar(out), params.gather(&vars, &grads)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub const TRAINING: Self = Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
    pub const PLANNING: Self = Self { learning_rate: 1e-1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

/// Moment estimates for one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { step: 0, m: vec![0.0; len], v: vec![0.0; len], config }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], direction: Direction) -> Result<()> {
        if grad.len() != params.len() || self.m.len() != params.len() {
            return contract(format!(
                "adam: params {} / gradient {} / state {} lengths differ",
                params.len(),
                grad.len(),
                self.m.len()
            ));
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let sign = match direction {
            Direction::Minimize => 1.0,
            Direction::Maximize => -1.0,
        };
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = sign * g;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Applies one Adam step to a whole [`ParamVector`].
pub fn adam_step(params: &mut ParamVector, grad: &[f64], state: &mut AdamState, direction: Direction) -> Result<()> {
    state.update(params.values_mut(), grad, direction)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn square_at_three() {
        let params = ParamVector::from_parts(vec![3.0], vec![Segment { name: "p".into(), offset: 0, len: 1 }]).unwrap();
        let (v, g) = forward_backward(&params, |t, p| t.square(p.get(0))).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn log_of_exp_is_identity() {
        let params = ParamVector::from_parts(vec![1.5], vec![Segment { name: "p".into(), offset: 0, len: 1 }]).unwrap();
        let (v, g) = forward_backward(&params, |t, p| {
            let e = t.exp(p.get(0));
            t.log(e)
        })
        .unwrap();
        assert!((v - 1.5).abs() < 1e-15);
        assert!((g[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn product_with_tanh_matches_finite_differences() {
        let f = |p: &[f64]| p[0] * p[1].tanh();
        let x = [2.0, 0.5];
        let fd = central_diff(f, &x, 1e-5);
        let mut params = ParamVector::zeros(&[("p0", 1), ("p1", 1)]);
        params.values_mut().copy_from_slice(&x);
        let (_, g) = forward_backward(&params, |t, p| {
            let th = t.tanh(p.get(1));
            t.mul(p.get(0), th)
        })
        .unwrap();
        let expected = [0.5f64.tanh(), 2.0 * (1.0 - 0.5f64.tanh().powi(2))];
        for i in 0..2 {
            assert!((g[i] - expected[i]).abs() <= 1e-12);
            assert!((g[i] - fd[i]).abs() <= 1e-6 * fd[i].abs());
        }
    }

    #[test]
    fn overflow_is_reported_with_primitive_name() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1000.0]);
        let e = tape.exp(x);
        let s = tape.sum(e);
        match tape.backward(s) {
            Err(Error::Numerical { op, node }) => {
                assert_eq!(op, "exp");
                assert_eq!(node, 1);
            }
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn log_of_negative_is_reported() {
        let mut tape = Tape::new();
        let x = tape.input(vec![-1.0]);
        let l = tape.log(x);
        assert!(matches!(tape.backward(l), Err(Error::Numerical { op: "log", .. })));
    }

    #[test]
    fn untracked_branches_get_no_adjoint() {
        let mut tape = Tape::new();
        let w = tape.constant(vec![1.0, 2.0, 3.0, 4.0]);
        let x = tape.input(vec![0.5, -1.0]);
        let y = tape.matvec(w, x, 2);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(w).is_none());
        assert_eq!(g.wrt(x).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn gaussian_closed_form() {
        let v = gauss_log_density([3.0, 0.0], [1.0, 0.0], 2.0, 1.0, 0.0);
        let closed = -(2.0 * PI).ln() - 2f64.ln() - 0.5;
        assert!((v - closed).abs() < 1e-12, "{v}");
        assert!((v - -3.03103).abs() < 1e-5);
    }

    #[test]
    fn gaussian_composite_gradients_match_finite_differences() {
        let pts = [
            [0.3, -0.7, 0.1, 0.2, 0.9, 0.4, 0.25],
            [-1.2, 2.0, 0.5, -0.3, 0.2, 1.7, -0.8],
        ];
        for p in pts {
            let f = |q: &[f64]| gauss_log_density([q[0], q[1]], [q[2], q[3]], q[4], q[5], q[6]);
            let fd = central_diff(f, &p, 1e-6);
            let mut tape = Tape::new();
            let x = tape.input(p[0..2].to_vec());
            let m = tape.input(p[2..4].to_vec());
            let s = tape.input(p[4..7].to_vec());
            let lp = tape.gauss_log_density(x, m, s);
            let g = tape.backward(lp).unwrap();
            let analytic: Vec<f64> = [g.wrt(x).unwrap(), g.wrt(m).unwrap(), g.wrt(s).unwrap()].concat();
            for (a, n) in analytic.iter().zip(&fd) {
                assert!((a - n).abs() <= 1e-6 * n.abs().max(1.0), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = ParamVector::zeros(&[("a", 3)]);
        p.values_mut().copy_from_slice(&[1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut st = AdamState::new(3, AdamConfig::TRAINING);
        adam_step(&mut p, &[0.0; 3], &mut st, Direction::Minimize).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let cfg = AdamConfig::TRAINING.with_learning_rate(0.1);
        let mut p = [0.0];
        let mut st = AdamState::new(1, cfg);
        st.update(&mut p, &[1.0], Direction::Minimize).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);

        let mut q = [0.0];
        let mut st = AdamState::new(1, cfg);
        st.update(&mut q, &[1.0], Direction::Maximize).unwrap();
        assert!((q[0] + expected).abs() < 1e-15);
    }

    #[test]
    fn adam_second_identical_gradient_step_is_not_larger() {
        let mut p = [0.0, 0.0];
        let mut st = AdamState::new(2, AdamConfig::TRAINING);
        let g = [0.7, -3.0];
        st.update(&mut p, &g, Direction::Minimize).unwrap();
        let first: Vec<f64> = p.to_vec();
        st.update(&mut p, &g, Direction::Minimize).unwrap();
        for i in 0..2 {
            let step2 = (p[i] - first[i]).abs();
            assert!(step2 <= first[i].abs() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn adam_rejects_length_mismatch() {
        let mut st = AdamState::new(2, AdamConfig::TRAINING);
        let mut p = [0.0, 0.0];
        assert!(matches!(st.update(&mut p, &[1.0], Direction::Minimize), Err(Error::Contract(_))));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn param_layout_must_cover_array() {
        let seg = vec![Segment { name: "a".into(), offset: 0, len: 2 }];
        assert!(ParamVector::from_parts(vec![0.0; 3], seg.clone()).is_err());
        assert!(ParamVector::from_parts(vec![0.0; 2], seg).is_ok());
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut tape = Tape::new();
        let x = tape.input(vec![0.3, 0.4]);
        let mut acc = tape.sum(x);
        for _ in 0..50 {
            let t = tape.tanh(x);
            let s = tape.sum(t);
            acc = tape.add(acc, s);
        }
        let g = tape.backward(acc).unwrap();
        assert_eq!(g.visited(), tape.len());
    }
}
