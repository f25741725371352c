//! Reverse-mode automatic differentiation over real tensors.
//!
//! A [`Tape`] is an append-only list of nodes; every op computes its forward
//! value eagerly and records what its adjoint needs. [`Tape::backward`] walks
//! the nodes once in reverse append order. Complex quantities never appear on
//! the tape: callers keep real and imaginary planes as two separate variables
//! and expand complex products and quotients into real ops.
//!
//! Binary elementwise ops broadcast when one operand's shape is a suffix of the
//! other's (a bias `[d]` against activations `[b, n, d]`, or a scalar).

mod gradcheck;
mod params;

use std::collections::BTreeMap;
use std::str::FromStr;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatmulPlan, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// The ops [`Tape::record`] dispatches on.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    /// Concatenation along the last axis.
    Concat,
    /// `len` columns of the last axis starting at `start`.
    Slice { start: usize, len: usize },
    SoftmaxRows,
    /// Inputs: `x`, gain, bias; normalizes over the last axis.
    LayerNorm { eps: f64 },
    Gelu,
    Sum,
    Scale(f64),
}

impl FromStr for OpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "div" => OpKind::Div,
            "matmul" => OpKind::MatMul,
            "transpose" => OpKind::Transpose,
            "concat" => OpKind::Concat,
            "softmax_rows" => OpKind::SoftmaxRows,
            "layer_norm" => OpKind::LayerNorm { eps: LAYER_NORM_EPS },
            "gelu" => OpKind::Gelu,
            "sum" => OpKind::Sum,
            _ => return Err(Error::UnknownOp(s.to_string())),
        })
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul(MatmulPlan),
    Transpose,
    Reshape,
    Concat { widths: Vec<usize> },
    Slice { start: usize, len: usize },
    SoftmaxRows,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu,
    Sum,
    Scale(f64),
    Sqrt,
    ClampMin(f64),
    Gather { ids: Vec<usize> },
    CrossEntropy { rows: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    param: Option<String>,
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    no_grad: bool,
    gelu_adjoint_fault: Option<f64>,
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// right operand repeats with period `n`
    Right(usize),
    /// left operand repeats with period `n`
    Left(usize),
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() < long.len() && long.ends_with(short)
}

fn bcast(a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
    if a == b {
        Ok((Bcast::Same, a.to_vec()))
    } else if is_suffix(b, a) {
        Ok((Bcast::Right(b.iter().product()), a.to_vec()))
    } else if is_suffix(a, b) {
        Ok((Bcast::Left(a.iter().product()), b.to_vec()))
    } else {
        Err(Error::ShapeMismatch(format!("cannot broadcast {a:?} with {b:?}")))
    }
}

/// Sums a full-size gradient down to a broadcast operand of period `n`.
fn reduce_to(g: &[f64], n: usize, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    Tensor::new(shape, out).expect("reduced shape")
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn no_grad() -> Self {
        Self { no_grad: true, ..Self::default() }
    }

    /// Test hook: multiplies every GELU adjoint by `factor`.
    #[doc(hidden)]
    pub fn inject_gelu_adjoint_fault(&mut self, factor: Option<f64>) {
        self.gelu_adjoint_fault = factor;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated adjoint of `v`; `None` before [`Tape::backward`] or when
    /// `v` does not influence the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let requires_grad = !self.no_grad && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad: !self.no_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a named parameter; see [`Tape::param_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        let v = self.leaf(value);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    /// Generic dispatch over [`OpKind`].
    pub fn record(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::ShapeMismatch(format!("{op:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match op {
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Div => arity(2).and_then(|_| self.div(inputs[0], inputs[1])),
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Concat => self.concat(inputs),
            OpKind::Slice { start, len } => arity(1).and_then(|_| self.slice(inputs[0], start, len)),
            OpKind::SoftmaxRows => arity(1).and_then(|_| self.softmax_rows(inputs[0])),
            OpKind::LayerNorm { eps } => {
                arity(3).and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2], eps))
            }
            OpKind::Gelu => arity(1).map(|_| self.gelu(inputs[0])),
            OpKind::Sum => arity(1).map(|_| self.sum(inputs[0])),
            OpKind::Scale(s) => arity(1).map(|_| self.scale(inputs[0], s)),
        }
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (mode, shape) = bcast(ta.shape(), tb.shape())?;
        let (da, db) = (ta.data(), tb.data());
        let out: Vec<f64> = match mode {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Right(n) => da.iter().enumerate().map(|(k, &x)| f(x, db[k % n])).collect(),
            Bcast::Left(n) => db.iter().enumerate().map(|(k, &y)| f(da[k % n], y)).collect(),
        };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(op, vec![a.0, b.0], value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let plan = MatmulPlan::new(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.run(ta.data(), tb.data(), &mut out, 0.0);
        let value = Tensor::new(&plan.out_shape, out)?;
        Ok(self.push(Op::MatMul(plan), vec![a.0, b.0], value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.transpose()?;
        Ok(self.push(Op::Transpose, vec![a.0], value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![a.0], value))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch(format!("concat {:?} with leading {lead:?}", s)));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.data();
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(Op::Concat { widths }, parts.iter().map(|p| p.0).collect(), value))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let w = t.last_dim();
        if t.rank() == 0 || start + len > w {
            return Err(Error::ShapeMismatch(format!("slice {start}..{} of {:?}", start + len, t.shape())));
        }
        let rows = t.numel() / w;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(Op::Slice { start, len }, vec![a.0], value))
    }

    /// Softmax over the last axis, with the row maximum subtracted first.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() == 0 {
            return Err(Error::ShapeMismatch("softmax of a scalar".into()));
        }
        let w = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(Op::SoftmaxRows, vec![a.0], value))
    }

    /// `gain ⊙ (x − μ)/√(σ² + eps) + bias` over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let d = t.last_dim();
        let (g, b) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if t.rank() == 0 || g.shape() != [d] || b.shape() != [d] {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm x {:?}, gain {:?}, bias {:?}",
                t.shape(),
                g.shape(),
                b.shape()
            )));
        }
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(Op::LayerNorm { xhat, inv_std }, vec![x.0, gain.0, bias.0], value))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(gelu_scalar);
        self.push(Op::Gelu, vec![a.0], value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(Op::Sum, vec![a.0], value)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * s);
        self.push(Op::Scale(s), vec![a.0], value)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::sqrt);
        self.push(Op::Sqrt, vec![a.0], value)
    }

    /// `max(x, floor)`; the adjoint is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.max(floor));
        self.push(Op::ClampMin(floor), vec![a.0], value)
    }

    /// Row lookup: `table[V, d]` indexed by `ids` gives `lead ++ [d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch(format!("gather from {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::ShapeMismatch(format!("{} ids for leading shape {lead:?}", ids.len())));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocab { id, vocab: v });
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(Op::Gather { ids: ids.to_vec() }, vec![table.0], value))
    }

    /// Mean softmax cross-entropy over the rows (last axis = classes) that
    /// carry a target; rows with `None` are ignored. Zero if no row is labelled.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let c = t.last_dim();
        let rows = t.numel() / c;
        if targets.len() != rows {
            return Err(Error::ShapeMismatch(format!("{} targets for {rows} rows", targets.len())));
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let raw = &t.data()[r * c..(r + 1) * c];
            let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + raw.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            softmax_in_place(row);
            if let Some(y) = targets[r] {
                if y >= c {
                    return Err(Error::OutOfVocab { id: y, vocab: c });
                }
                total += lse - raw[y];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Op::CrossEntropy { rows: targets.to_vec(), probs, count },
            vec![logits.0],
            Tensor::scalar(loss),
        ))
    }

    /// Clears accumulated adjoints.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Accumulates `∂loss/∂v` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NotScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad && !node.inputs.is_empty() {
                let contribs = self.input_adjoints(i, &g);
                for (inp, cg) in node.inputs.iter().zip(contribs) {
                    if let Some(cg) = cg {
                        accumulate(&mut adj[*inp], cg);
                    }
                }
            }
            if self.grads.len() <= i {
                self.grads.resize(i + 1, None);
            }
            accumulate(&mut self.grads[i], g);
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Adjoint contributions of node `i` to each of its inputs.
    fn input_adjoints(&self, i: usize, g: &Tensor) -> Vec<Option<Tensor>> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let val = |k: usize| &self.nodes[ins[k]].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (val(0), val(1));
                let (mode, _) = bcast(a.shape(), b.shape()).expect("checked in forward");
                let (ad, bd) = (a.data(), b.data());
                let n = gd.len();
                let (ia, ib): (Box<dyn Fn(usize) -> usize>, Box<dyn Fn(usize) -> usize>) = match mode {
                    Bcast::Same => (Box::new(|k| k), Box::new(|k| k)),
                    Bcast::Right(p) => (Box::new(|k| k), Box::new(move |k| k % p)),
                    Bcast::Left(p) => (Box::new(move |k| k % p), Box::new(|k| k)),
                };
                let (mut fa, mut fb) = (vec![0.0; n], vec![0.0; n]);
                for k in 0..n {
                    let (x, y) = (ad[ia(k)], bd[ib(k)]);
                    let (p, q) = match node.op {
                        Op::Add => (gd[k], gd[k]),
                        Op::Sub => (gd[k], -gd[k]),
                        Op::Mul => (gd[k] * y, gd[k] * x),
                        _ => (gd[k] / y, -gd[k] * x / (y * y)),
                    };
                    fa[k] = p;
                    fb[k] = q;
                }
                let fold = |full: Vec<f64>, t: &Tensor| {
                    if t.numel() == n {
                        Tensor::new(t.shape(), full).expect("same shape")
                    } else {
                        reduce_to(&full, t.numel(), t.shape())
                    }
                };
                vec![
                    self.wants(ins[0]).then(|| fold(fa, a)),
                    self.wants(ins[1]).then(|| fold(fb, b)),
                ]
            }
            Op::MatMul(plan) => {
                let (a, b) = (val(0), val(1));
                let (n, k, m) = (plan.n, plan.k, plan.m);
                let ga = self.wants(ins[0]).then(|| {
                    // dA = dC · Bᵀ
                    let mut out = vec![0.0; a.numel()];
                    for bi in 0..plan.batch {
                        let bo = if plan.batched_rhs { &b.data()[bi * k * m..(bi + 1) * k * m] } else { b.data() };
                        gemm(
                            n,
                            m,
                            k,
                            &gd[bi * n * m..(bi + 1) * n * m],
                            m as isize,
                            1,
                            bo,
                            1,
                            m as isize,
                            &mut out[bi * n * k..(bi + 1) * n * k],
                            0.0,
                        );
                    }
                    Tensor::new(a.shape(), out).expect("shape of a")
                });
                let gb = self.wants(ins[1]).then(|| {
                    // dB = Aᵀ · dC, summed over the batch when B is shared
                    let mut out = vec![0.0; b.numel()];
                    for bi in 0..plan.batch {
                        let off = if plan.batched_rhs { bi * k * m } else { 0 };
                        let beta = if plan.batched_rhs || bi == 0 { 0.0 } else { 1.0 };
                        gemm(
                            k,
                            n,
                            m,
                            &a.data()[bi * n * k..(bi + 1) * n * k],
                            1,
                            k as isize,
                            &gd[bi * n * m..(bi + 1) * n * m],
                            m as isize,
                            1,
                            &mut out[off..off + k * m],
                            beta,
                        );
                    }
                    Tensor::new(b.shape(), out).expect("shape of b")
                });
                vec![ga, gb]
            }
            Op::Transpose => vec![Some(g.transpose().expect("rank >= 2"))],
            Op::Reshape => vec![Some(g.clone().reshape(val(0).shape()).expect("same numel"))],
            Op::Concat { widths } => {
                let total: usize = widths.iter().sum();
                let rows = gd.len() / total;
                let mut col = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (p, &w) in widths.iter().enumerate() {
                    if self.wants(ins[p]) {
                        let mut out = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            out.extend_from_slice(&gd[r * total + col..r * total + col + w]);
                        }
                        res.push(Some(Tensor::new(val(p).shape(), out).expect("part shape")));
                    } else {
                        res.push(None);
                    }
                    col += w;
                }
                res
            }
            Op::Slice { start, len } => {
                let a = val(0);
                let w = a.last_dim();
                let mut out = vec![0.0; a.numel()];
                for (r, chunk) in gd.chunks(*len).enumerate() {
                    out[r * w + start..r * w + start + len].copy_from_slice(chunk);
                }
                vec![Some(Tensor::new(a.shape(), out).expect("input shape"))]
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let w = y.last_dim();
                let mut out = vec![0.0; gd.len()];
                for ((o, yr), gr) in out.chunks_mut(w).zip(y.data().chunks(w)).zip(gd.chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(y.shape(), out).expect("shape"))]
            }
            Op::LayerNorm { xhat, inv_std } => {
                let gain = val(1);
                let d = gain.numel();
                let rows = gd.len() / d;
                let mut dx = vec![0.0; gd.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gain.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gain.data()[j];
                        dx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    self.wants(ins[0]).then(|| Tensor::new(val(0).shape(), dx).expect("x shape")),
                    self.wants(ins[1]).then(|| Tensor::new(&[d], dgain).expect("gain")),
                    self.wants(ins[2]).then(|| Tensor::new(&[d], dbias).expect("bias")),
                ]
            }
            Op::Gelu => {
                let fault = self.gelu_adjoint_fault.unwrap_or(1.0);
                let x = val(0);
                let out = x.data().iter().zip(gd).map(|(&x, &g)| g * gelu_grad_scalar(x) * fault).collect();
                vec![Some(Tensor::new(x.shape(), out).expect("shape"))]
            }
            Op::Sum => vec![Some(Tensor::full(val(0).shape(), gd[0]))],
            Op::Scale(s) => vec![Some(g.map(|x| x * s))],
            Op::Sqrt => {
                let y = &node.value;
                let out = y.data().iter().zip(gd).map(|(&y, &g)| g / (2.0 * y)).collect();
                vec![Some(Tensor::new(y.shape(), out).expect("shape"))]
            }
            Op::ClampMin(floor) => {
                let x = val(0);
                let out = x.data().iter().zip(gd).map(|(&x, &g)| if x > *floor { g } else { 0.0 }).collect();
                vec![Some(Tensor::new(x.shape(), out).expect("shape"))]
            }
            Op::Gather { ids } => {
                let t = val(0);
                let d = t.shape()[1];
                let mut out = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        out[id * d + j] += gd[r * d + j];
                    }
                }
                vec![Some(Tensor::new(t.shape(), out).expect("table shape"))]
            }
            Op::CrossEntropy { rows, probs, count } => {
                let t = val(0);
                let c = t.last_dim();
                let mut out = vec![0.0; t.numel()];
                if *count > 0 {
                    let s = gd[0] / *count as f64;
                    for (r, target) in rows.iter().enumerate() {
                        if let Some(y) = target {
                            for j in 0..c {
                                out[r * c + j] = s * probs[r * c + j];
                            }
                            out[r * c + y] -= s;
                        }
                    }
                }
                vec![Some(Tensor::new(t.shape(), out).expect("logit shape"))]
            }
        }
    }

    /// Gradients of named parameters, summed when a parameter was bound more than once.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(name) = &node.param else { continue };
            let g = self
                .grads
                .get(i)
                .and_then(Option::clone)
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
