//! Reverse-mode tape.
//!
//! Every primitive appends a node holding its forward value. Nodes that
//! depend on a gradient-requiring leaf also record the op and whatever
//! context the backward rule needs; everything else is stored as a constant.
//! `backward` walks the nodes in reverse insertion order, which is a valid
//! topological order because inputs always precede their consumers.
//!
//! Binary elementwise ops accept a right operand of identical shape or one
//! equal to the left shape without its leading (batch) dimension. No other
//! broadcasting exists.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Norm floor used by `l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;

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
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Abs(Var),
    Pow(Var, f64),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    L2Normalize(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Pow(..) => "pow",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Gather(..) => "gather",
            Op::L2Normalize(..) => "l2_normalize",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs repeats across the leading dimension of lhs
    Leading {
        outer: usize,
    },
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a gradient-requiring leaf. Leaves the loss does not
    /// depend on report all zeros; non-leaves and constant leaves report `None`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Record of primitive operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attach a human-readable name used in non-finite diagnostics.
    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    /// Leaf holding a copy of `t`; it takes part in differentiation when
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad;
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push_raw(
            value,
            if requires_grad {
                Op::Leaf
            } else {
                Op::Constant
            },
            requires_grad,
        )
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push_raw(t, Op::Constant, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        let op = if requires_grad { op } else { Op::Constant };
        self.push_raw(value, op, requires_grad)
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if !sa.is_empty() && &sa[1..] == sb {
            return Ok(Bcast::Leading { outer: sa[0] });
        }
        Err(Error::Shape {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let kind = self.bcast(name, a, b)?;
        let da = self.data(a);
        let db = self.data(b);
        let data: Vec<f64> = match kind {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Leading { .. } => {
                let inner = db.len();
                da.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, db[if inner == 0 { 0 } else { i % inner }]))
                    .collect()
            }
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, op, &[a, b]))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast("div", a, b)?;
        if self.data(b).contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.data(a).iter().find(|&&v| v.is_nan() || v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("nonpositive input {v}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Elementwise `x^c`. The derivative at `x = 0` is taken as 0 when `c < 1`.
    pub fn pow(&mut self, a: Var, c: f64) -> Result<Var> {
        if c.fract() != 0.0 {
            if let Some(v) = self.data(a).iter().find(|&&v| v < 0.0) {
                return Err(Error::Domain {
                    op: "pow",
                    msg: format!("negative base {v} with fractional exponent {c}"),
                });
            }
        }
        Ok(self.unary(a, |x| x.powf(c), Op::Pow(a, c)))
    }

    /// Sum over all elements, or over one axis (which is removed).
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("sum", a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("mean", a, axis, true)
    }

    fn reduce(
        &mut self,
        name: &'static str,
        a: Var,
        axis: Option<usize>,
        mean: bool,
    ) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let op = if mean {
            Op::Mean(a, axis)
        } else {
            Op::Sum(a, axis)
        };
        match axis {
            None => {
                let d = self.data(a);
                if mean && d.is_empty() {
                    return Err(Error::Domain {
                        op: name,
                        msg: "mean of empty tensor".into(),
                    });
                }
                let s: f64 = d.iter().sum();
                let v = if mean { s / d.len() as f64 } else { s };
                Ok(self.push(Vec::new(), vec![v], op, &[a]))
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::Shape {
                        op: name,
                        lhs: shape,
                        rhs: vec![ax],
                    });
                }
                let (outer, len, inner) = axis_split(&shape, ax);
                if mean && len == 0 {
                    return Err(Error::Domain {
                        op: name,
                        msg: "mean over empty axis".into(),
                    });
                }
                let d = self.data(a);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        for j in 0..inner {
                            out[o * inner + j] += d[base + j];
                        }
                    }
                }
                if mean {
                    let inv = len as f64;
                    out.iter_mut().for_each(|v| *v /= inv);
                }
                let mut oshape = shape.clone();
                oshape.remove(ax);
                Ok(self.push(oshape, out, op, &[a]))
            }
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(vec![m, n], data, Op::MatMul(a, b), &[a, b]))
    }

    /// Concatenate same-rank tensors along `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis];
                let d = self.data(*v);
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, data, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    /// `out.flat[k] = a.flat[index[k]]`, reshaped to `shape`. Indices may
    /// repeat (tiling) or be omitted (selection); backward scatter-adds.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: vec![index.len()],
                rhs: shape.to_vec(),
            });
        }
        let d = self.data(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= d.len()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: self.shape(a).to_vec(),
                rhs: vec![bad],
            });
        }
        let data = index.iter().map(|&i| d[i]).collect();
        Ok(self.push(shape.to_vec(), data, Op::Gather(a, index), &[a]))
    }

    /// Divide each last-axis vector by `max(||x||, NORM_EPS)`.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::Shape {
            op: "l2_normalize",
            lhs: vec![],
            rhs: vec![],
        })?;
        let d = self.data(a);
        let mut out = vec![0.0; d.len()];
        if cols > 0 {
            for (o, x) in out.chunks_mut(cols).zip(d.chunks(cols)) {
                let s = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                for (ov, xv) in o.iter_mut().zip(x) {
                    *ov = xv / s;
                }
            }
        }
        Ok(self.push(shape, out, Op::L2Normalize(a), &[a]))
    }

    /// Row-wise `logsumexp(logits) - logits[target]`; shape `[rows]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || s[1] == 0 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![t],
            });
        }
        let d = self.data(logits);
        let mut probs = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - lse).exp();
            }
            out[r] = lse - row[targets[r]];
        }
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(vec![rows], out, op, &[logits]))
    }

    /// First node (in evaluation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.is_finite() {
                None
            } else {
                Some(match &n.label {
                    Some(l) => format!("{l} (node {i}, op {})", n.op.name()),
                    None => format!("node {i} (op {}, shape {:?})", n.op.name(), n.value.shape()),
                })
            }
        })
    }

    /// Accumulate `d loss / d leaf` for every gradient-requiring leaf and
    /// clear the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) {
                out.push(Some(
                    grads[i]
                        .take()
                        .unwrap_or_else(|| vec![0.0; n.value.numel()]),
                ));
            } else {
                out.push(None);
            }
        }
        self.nodes.clear();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let ga = kernels::matmul_a_bt(g, self.data(*b), m, k, n);
                    accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb = kernels::matmul_at_b(self.data(*a), g, m, k, n);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = g.iter().map(|v| sign * v).collect();
                    self.accumulate_rhs(grads, *a, *b, &gb);
                }
            }
            Op::Mul(a, b) => {
                let da = self.data(*a);
                let db = self.data(*b);
                let inner = db.len().max(1);
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, gv)| gv * db[j % inner])
                        .collect();
                    accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = g.iter().zip(da).map(|(gv, av)| gv * av).collect();
                    self.accumulate_rhs(grads, *a, *b, &gb);
                }
            }
            Op::Div(a, b) => {
                let da = self.data(*a);
                let db = self.data(*b);
                let inner = db.len().max(1);
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, gv)| gv / db[j % inner])
                        .collect();
                    accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, gv)| {
                            let y = db[j % inner];
                            -gv * da[j] / (y * y)
                        })
                        .collect();
                    self.accumulate_rhs(grads, *a, *b, &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, *a, &ga);
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(gv, y)| gv * y).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = g.iter().zip(self.data(*a)).map(|(gv, x)| gv / x).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Abs(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, &x)| {
                        if x > 0.0 {
                            *gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Pow(a, c) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, &x)| {
                        if x == 0.0 && *c < 1.0 {
                            0.0
                        } else {
                            gv * c * x.powf(c - 1.0)
                        }
                    })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let shape = self.shape(*a);
                let numel = self.data(*a).len();
                let is_mean = matches!(node.op, Op::Mean(..));
                let ga: Vec<f64> = match axis {
                    None => {
                        let v = if is_mean { g[0] / numel as f64 } else { g[0] };
                        vec![v; numel]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(shape, *ax);
                        let scale = if is_mean { 1.0 / len as f64 } else { 1.0 };
                        let mut ga = vec![0.0; numel];
                        for o in 0..outer {
                            for k in 0..len {
                                for j in 0..inner {
                                    ga[(o * len + k) * inner + j] = g[o * inner + j] * scale;
                                }
                            }
                        }
                        ga
                    }
                };
                accumulate(grads, *a, &ga);
            }
            Op::Concat(inputs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if self.requires_grad(*v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[start..start + len * inner]);
                        }
                        accumulate(grads, *v, &gv);
                    }
                    offset += len;
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Gather(a, index) => {
                let mut ga = vec![0.0; self.data(*a).len()];
                for (gv, &ix) in g.iter().zip(index) {
                    ga[ix] += gv;
                }
                accumulate(grads, *a, &ga);
            }
            Op::L2Normalize(a) => {
                let x = self.data(*a);
                let cols = *self.shape(*a).last().unwrap_or(&1);
                let mut ga = vec![0.0; x.len()];
                if cols > 0 {
                    for ((gax, xr), gr) in
                        ga.chunks_mut(cols).zip(x.chunks(cols)).zip(g.chunks(cols))
                    {
                        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let s = n.max(NORM_EPS);
                        let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        // below the floor the map is linear
                        let coef = if n > NORM_EPS { xg / (n * n * n) } else { 0.0 };
                        for ((o, xv), gv) in gax.iter_mut().zip(xr).zip(gr) {
                            *o = gv / s - xv * coef;
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.shape(*logits)[1];
                let mut ga = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    ga[r * cols + t] -= 1.0;
                    for c in 0..cols {
                        ga[r * cols + c] *= g[r];
                    }
                }
                accumulate(grads, *logits, &ga);
            }
        }
    }

    fn accumulate_rhs(&self, grads: &mut [Option<Vec<f64>>], a: Var, b: Var, gb: &[f64]) {
        let nb = self.data(b).len();
        if self.data(a).len() == nb {
            accumulate(grads, b, gb);
        } else {
            let mut red = vec![0.0; nb];
            if nb > 0 {
                for chunk in gb.chunks(nb) {
                    for (r, v) in red.iter_mut().zip(chunk) {
                        *r += v;
                    }
                }
            }
            accumulate(grads, b, &red);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecvar(tape: &mut Tape, v: &[f64]) -> Var {
        tape.leaf(&Tensor::from_vec(v.to_vec()).with_grad())
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let b = t.constant(Tensor::new(vec![3, 1], vec![4.0, 5.0, 6.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        assert_eq!(t.data(c), &[4.0, 5.0]);
    }

    #[test]
    fn matmul_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let n = t.l2_normalize(a).unwrap();
        assert!((t.data(n)[0] - 0.6).abs() < 1e-12);
        assert!((t.data(n)[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_zero_vector_is_finite() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::zeros(&[2, 3]).with_grad());
        let n = t.l2_normalize(a).unwrap();
        assert!(t.value(n).is_finite());
        let s = t.sum(n, None).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(a).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identity_gather_is_noop() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let g = t.gather(a, vec![0, 1, 2], &[3]).unwrap();
        assert_eq!(t.data(g), t.data(a));
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, &[1.0, 2.0, 3.0]);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq, None).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
        assert!(t.is_empty(), "tape cleared after backward");
    }

    #[test]
    fn unrelated_leaf_gets_zero_grad() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, &[1.0, 2.0]);
        let y = vecvar(&mut t, &[5.0, 6.0]);
        let l = t.sum(x, None).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_is_error() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, &[1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn log_and_div_domain_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain { op: "log", .. })));
        let y = t.constant(Tensor::from_vec(vec![1.0, 1.0]));
        assert!(matches!(t.div(y, x), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn leading_broadcast_bias_grad_sums_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap());
        let b = vecvar(&mut t, &[1.0, -1.0]);
        let y = t.add(x, b).unwrap();
        let l = t.sum(y, None).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn permutation_gather_backward_is_inverse_scatter() {
        let perm = vec![2usize, 0, 3, 1];
        let mut t = Tape::new();
        let x = vecvar(&mut t, &[10.0, 20.0, 30.0, 40.0]);
        let p = t.gather(x, perm.clone(), &[4]).unwrap();
        let w = t.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let prod = t.mul(p, w).unwrap();
        let l = t.sum(prod, None).unwrap();
        let g = t.backward(l).unwrap();
        // grad[perm[k]] = w[k]
        let gx = g.get(x).unwrap();
        for (k, &src) in perm.iter().enumerate() {
            assert_eq!(gx[src], (k + 1) as f64);
        }
    }

    #[test]
    fn softmax_ce_uniform_is_log_classes() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::new(vec![2, 4], vec![0.3; 8]).unwrap());
        let ce = t.softmax_cross_entropy(l, &[0, 3]).unwrap();
        for v in t.data(ce) {
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }
    }
}
