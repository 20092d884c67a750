//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every op appends one node to the tape. Node ids are handed out in
//! creation order, so the tape is topologically sorted by construction and
//! the backward pass is a single reverse sweep.
//!
//! Shape rules (ranks above 2 are rejected):
//! - `matmul`: `[m,k]x[k,n] -> [m,n]`, `[m,k]x[k] -> [m]`, `[k]x[k,n] -> [n]`, `[k]x[k] -> []`
//! - `add`, `sub`, `mul`: identical shapes
//! - `add_row`: `[r,c] + [c] -> [r,c]`
//! - `softmax`: along the last axis; `masked_softmax`: vectors only
//! - `concat`: vectors, end to end; `stack`: equal-length vectors into rows
//! - `slice`: contiguous range of a vector; `lookup`: one row of a matrix
//! - `sum`: anything to a scalar; `cross_entropy`: vector logits to a scalar

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Slice(Var, usize),
    Lookup(Var, usize),
    Sum(Var),
    Scale(Var, f64),
    Dropout(Var, Vec<f64>),
    CrossEntropy(Var, usize),
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
///
/// A tape may borrow a [`ParamSet`]; parameters are then inserted as leaves
/// without copying. Frozen parameters enter as constants.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamSet>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn rank_ok(op: &'static str, shapes: &[&[usize]]) -> Result<()> {
    if shapes.iter().any(|s| s.len() > 2) {
        return Err(Error::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() });
    }
    Ok(())
}

fn as_matrix(shape: &[usize], lhs: bool) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 if lhs => (1, shape[0]),
        1 => (shape[0], 1),
        _ => (shape[0], shape[1]),
    }
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-softmax of a plain slice.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| v - lse).collect()
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: None, param_vars: Vec::new() }
    }

    pub fn with_params(params: &'p ParamSet) -> Self {
        Tape { nodes: Vec::new(), params: Some(params), param_vars: vec![None; params.len()] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_set(&self) -> Option<&'p ParamSet> {
        self.params
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { shape, value: Cow::Owned(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, t: Tensor, needs_grad: bool) -> Result<Var> {
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let shape = t.shape().to_vec();
        self.nodes.push(Node { shape, value: Cow::Owned(t.into_data()), op: Op::Leaf, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf (gradients are reported for it).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn constant_vec(&mut self, v: Vec<f64>) -> Result<Var> {
        self.leaf(Tensor::vector(v), false)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.nodes.push(Node { shape: vec![n], value: Cow::Owned(vec![0.0; n]), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a parameter of the bound set; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let set = self.params.expect("tape has no parameter set");
        let t = set.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            needs_grad: set.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> Error {
        Error::Shape { op, shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect() }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        rank_ok("matmul", &[&sa, &sb])?;
        if sa.is_empty() || sb.is_empty() {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let (m, k) = as_matrix(&sa, true);
        let (k2, n) = as_matrix(&sb, false);
        if k != k2 {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for i in 0..m {
                let row = &av[i * k..(i + 1) * k];
                out[i] = row.iter().zip(bv).map(|(x, y)| x * y).sum();
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let s = av[i * k + p];
                    if s == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    orow.iter_mut().zip(brow).for_each(|(o, b)| *o += s * b);
                }
            }
        }
        let shape = match (sa.len(), sb.len()) {
            (2, 2) => vec![m, n],
            (2, 1) => vec![m],
            (1, 2) => vec![n],
            _ => vec![],
        };
        self.push("matmul", shape, out, Op::MatMul(a, b), &[a, b])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, &[a, b]));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Sums a list of equally shaped terms left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| Error::invalid("add_all of nothing"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(self.shape_err("add_row", &[m, v]));
        }
        let c = sv[0];
        let vv = self.value(v);
        let out = self.value(m).iter().enumerate().map(|(i, x)| x + vv[i % c]).collect();
        let shape = self.shape(m).to_vec();
        self.push("add_row", shape, out, Op::AddRow(m, v), &[m, v])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push("tanh", shape, out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("sigmoid", shape, out, Op::Sigmoid(x), &[x])
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        rank_ok("softmax", &[&shape])?;
        let c = *shape.last().unwrap_or(&1);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (o, i) in out.chunks_mut(c).zip(xv.chunks(c)) {
            softmax_into(i, o);
        }
        self.push("softmax", shape, out, Op::Softmax(x), &[x])
    }

    /// Softmax over a vector where entry `excluded` has probability exactly
    /// zero (its score is treated as minus infinity).
    pub fn masked_softmax(&mut self, x: Var, excluded: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 || excluded >= shape[0] {
            return Err(self.shape_err("masked_softmax", &[x]));
        }
        if shape[0] == 1 {
            return Err(Error::invalid("masked_softmax: every entry is excluded"));
        }
        let xv = self.value(x);
        let max =
            xv.iter().enumerate().filter(|&(i, _)| i != excluded).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> =
            xv.iter().enumerate().map(|(i, &v)| if i == excluded { 0.0 } else { (v - max).exp() }).collect();
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|o| *o /= total);
        self.push("masked_softmax", shape, out, Op::MaskedSoftmax(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() || parts.iter().any(|p| self.shape(*p).len() != 1) {
            return Err(self.shape_err("concat", parts));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        let n = out.len();
        self.push("concat", vec![n], out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::Shape { op: "stack", shapes: vec![] });
        };
        let c = self.shape(first).to_vec();
        if c.len() != 1 || rows.iter().any(|r| self.shape(*r) != c.as_slice()) {
            return Err(self.shape_err("stack", rows));
        }
        let mut out = Vec::with_capacity(rows.len() * c[0]);
        for r in rows {
            out.extend_from_slice(self.value(*r));
        }
        self.push("stack", vec![rows.len(), c[0]], out, Op::Stack(rows.to_vec()), rows)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 || len == 0 || start + len > s[0] {
            return Err(self.shape_err("slice", &[x]));
        }
        let out = self.value(x)[start..start + len].to_vec();
        self.push("slice", vec![len], out, Op::Slice(x, start), &[x])
    }

    /// Row `row` of matrix `table` (an embedding lookup).
    pub fn lookup(&mut self, table: Var, row: usize) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || row >= s[0] {
            return Err(Error::invalid(format!("lookup of row {row} in table of shape {s:?}")));
        }
        let c = s[1];
        let out = self.value(table)[row * c..(row + 1) * c].to_vec();
        self.push("lookup", vec![c], out, Op::Lookup(table, row), &[table])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().sum();
        self.push("sum", vec![], vec![total], Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, s), &[x])
    }

    /// Multiplies by a fixed mask (already scaled for inverted dropout).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape { op: "dropout_mask", shapes: vec![self.shape(x).to_vec(), vec![mask.len()]] });
        }
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout_mask", shape, out, Op::Dropout(x, mask), &[x])
    }

    /// Inverted dropout: keeps each entry with probability `1 - rate` and
    /// scales survivors by `1 / (1 - rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::invalid(format!("dropout rate {rate} must be below 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(x).len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        self.dropout_mask(x, mask)
    }

    /// `-log softmax(logits)[gold]`.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 1 || gold >= s[0] {
            return Err(Error::invalid(format!("cross_entropy gold {gold} for logits {s:?}")));
        }
        let xv = self.value(logits);
        let loss = log_sum_exp(xv) - xv[gold];
        self.push("cross_entropy", vec![], vec![loss], Op::CrossEntropy(logits, gold), &[logits])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 || self.shape(loss).len() > 1 {
            return Err(Error::Shape { op: "backward", shapes: vec![self.shape(loss).to_vec()] });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.shape.clone()).collect() })
    }

    fn backprop_node(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.shape(*a), true);
                let (_, n) = as_matrix(self.shape(*b), false);
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av[i * k + p];
                            db[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(d, x)| *d += s * x);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| d.iter_mut().zip(g).zip(bv).for_each(|((d, x), y)| *d += x * y));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).zip(av).for_each(|((d, x), y)| *d += x * y));
            }
            Op::AddRow(m, v) => {
                let c = self.shape(*v)[0];
                self.acc(grads, *m, |d| add_into(d, g));
                self.acc(grads, *v, |d| {
                    for (i, x) in g.iter().enumerate() {
                        d[i % c] += x;
                    }
                });
            }
            Op::Tanh(x) => self
                .acc(grads, *x, |d| d.iter_mut().zip(g).zip(y.iter()).for_each(|((d, g), y)| *d += g * (1.0 - y * y))),
            Op::Sigmoid(x) => self
                .acc(grads, *x, |d| d.iter_mut().zip(g).zip(y.iter()).for_each(|((d, g), y)| *d += g * y * (1.0 - y))),
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let c = *node.shape.last().unwrap_or(&1);
                self.acc(grads, *x, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        dr.iter_mut().zip(gr).zip(yr).for_each(|((d, g), y)| *d += y * (g - dot));
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.acc(grads, *p, |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Stack(rows) => {
                let c = node.shape[1];
                for (r, v) in rows.iter().enumerate() {
                    self.acc(grads, *v, |d| add_into(d, &g[r * c..(r + 1) * c]));
                }
            }
            Op::Slice(x, start) => {
                let start = *start;
                self.acc(grads, *x, |d| add_into(&mut d[start..start + g.len()], g));
            }
            Op::Lookup(t, row) => {
                let c = g.len();
                let row = *row;
                self.acc(grads, *t, |d| add_into(&mut d[row * c..(row + 1) * c], g));
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Scale(x, s) => self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)),
            Op::Dropout(x, mask) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).zip(mask).for_each(|((d, g), m)| *d += g * m))
            }
            Op::CrossEntropy(x, gold) => {
                let xv = self.value(*x);
                let mut p = vec![0.0; xv.len()];
                softmax_into(xv, &mut p);
                p[*gold] -= 1.0;
                self.acc(grads, *x, |d| d.iter_mut().zip(&p).for_each(|(d, p)| *d += g[0] * p));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }

    /// Gradients of the bound parameters, aligned with the parameter set.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let set = self.params.expect("tape has no parameter set");
        let mut out = ParamGrads::zeros_like(set);
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = &grads.grads[v.0] {
                    out.accumulate(ParamId(i), g);
                }
            }
        }
        out
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Result of a backward pass: one gradient per node reachable from the loss.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}
