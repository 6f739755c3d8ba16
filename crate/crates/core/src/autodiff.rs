//! Define-by-run reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive as it is applied. Operands always refer to
//! earlier nodes, so the node list is a topological order and [`Tape::backward`]
//! is a single reverse sweep. Tapes are cheap to build and are rebuilt for every
//! forward pass.
//!
//! ```
//! use vae2_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic function, shared by the autodiff primitive and the world model so
/// both produce bit-identical values.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `ln σ(x)` without overflow for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Dense row-major array of `f64`. Storage is shared on clone and copied on
/// the first write, so putting parameters on a tape does not copy them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                shapes: vec![shape, vec![data.len()]],
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data: Arc::new(data),
        }
    }

    /// Builds a `(rows, cols)` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    shapes: vec![vec![cols], vec![r.len()]],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Number of rows when viewed as `(len / last_dim, last_dim)`.
    pub fn outer_len(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.last_dim())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations understood by the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Matmul,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Neg,
    /// Sum of all elements, shape `[1]`.
    Sum,
    /// Mean of all elements, shape `[1]`.
    Mean,
    /// Subgradient 0 at exactly 0.
    Abs,
    /// Concatenation along the last axis.
    Concat,
    /// Adds a bias vector to every row.
    AddBias,
    Scale(f64),
    SliceLast { start: usize, len: usize },
    /// Gradient passes inside `[min, max]` (inclusive) and is zero outside.
    Clamp { min: f64, max: f64 },
    LogSigmoid,
    /// Mean over the last axis, keeping it with extent 1.
    MeanLastAxis,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Matmul => "matmul",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Neg => "neg",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Abs => "abs",
            Op::Concat => "concat",
            Op::AddBias => "add_bias",
            Op::Scale(_) => "scale",
            Op::SliceLast { .. } => "slice_last",
            Op::Clamp { .. } => "clamp",
            Op::LogSigmoid => "log_sigmoid",
            Op::MeanLastAxis => "mean_last_axis",
        }
    }

    fn arity(self) -> Option<usize> {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Matmul | Op::AddBias => Some(2),
            Op::Concat => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Op>,
    operands: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Record of primitive applications in evaluation order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for constants and interior nodes.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.0).and_then(Option::as_ref)
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.leaves.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: None,
            operands: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Applies `op` to `operands`, recording the node.
    pub fn apply(&mut self, op: Op, operands: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if operands.len() != n {
                return Err(Error::Contract(format!(
                    "{} takes {n} operands, got {}",
                    op.name(),
                    operands.len()
                )));
            }
        } else if operands.is_empty() {
            return Err(Error::Contract(format!("{} needs operands", op.name())));
        }
        let value = self.forward(op, operands)?;
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: Some(op),
            operands: operands.iter().map(|v| v.0).collect(),
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dim_err(&self, op: Op, operands: &[Var]) -> Error {
        Error::Dimension {
            op: op.name(),
            shapes: operands.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    fn forward(&self, op: Op, operands: &[Var]) -> Result<Tensor> {
        let x = self.value(operands[0]);
        let unary = |f: &dyn Fn(f64) -> f64| Tensor {
            shape: x.shape.clone(),
            data: Arc::new(x.data.iter().map(|&v| f(v)).collect()),
        };
        let out = match op {
            Op::Add | Op::Sub | Op::Mul => {
                let y = self.value(operands[1]);
                if x.shape != y.shape {
                    return Err(self.dim_err(op, operands));
                }
                let data = x.data.iter().zip(y.data.iter());
                let data: Vec<f64> = match op {
                    Op::Add => data.map(|(a, b)| a + b).collect(),
                    Op::Sub => data.map(|(a, b)| a - b).collect(),
                    _ => data.map(|(a, b)| a * b).collect(),
                };
                Tensor {
                    shape: x.shape.clone(),
                    data: Arc::new(data),
                }
            }
            Op::Matmul => {
                let y = self.value(operands[1]);
                if x.shape.len() != 2 || y.shape.len() != 2 || x.shape[1] != y.shape[0] {
                    return Err(self.dim_err(op, operands));
                }
                let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
                Tensor {
                    shape: vec![m, n],
                    data: Arc::new(matmul(&x.data, &y.data, m, k, n)),
                }
            }
            Op::Relu => unary(&|v| if v > 0.0 { v } else { 0.0 }),
            Op::Sigmoid => unary(&sigmoid),
            Op::Exp => unary(&f64::exp),
            Op::Log => {
                if let Some(bad) = x.data.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                unary(&f64::ln)
            }
            Op::Neg => unary(&|v| -v),
            Op::Sum => Tensor::scalar(x.data.iter().sum()),
            Op::Mean => Tensor::scalar(x.data.iter().sum::<f64>() / x.data.len() as f64),
            Op::Abs => unary(&f64::abs),
            Op::Concat => {
                let lead = &x.shape[..x.shape.len() - 1];
                let mut widths = Vec::with_capacity(operands.len());
                for v in operands {
                    let s = self.shape(*v);
                    if s.len() != x.shape.len() || &s[..s.len() - 1] != lead {
                        return Err(self.dim_err(op, operands));
                    }
                    widths.push(s[s.len() - 1]);
                }
                let total: usize = widths.iter().sum();
                let rows = x.outer_len();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (v, &w) in operands.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(*v).data[r * w..(r + 1) * w]);
                    }
                }
                let mut shape = lead.to_vec();
                shape.push(total);
                Tensor {
                    shape,
                    data: Arc::new(data),
                }
            }
            Op::AddBias => {
                let b = self.value(operands[1]);
                let c = x.last_dim();
                if b.data.len() != c || b.shape.len() > 2 || b.last_dim() != c {
                    return Err(self.dim_err(op, operands));
                }
                let mut data = x.data.to_vec();
                for row in data.chunks_mut(c) {
                    for (o, bv) in row.iter_mut().zip(b.data.iter()) {
                        *o += bv;
                    }
                }
                Tensor {
                    shape: x.shape.clone(),
                    data: Arc::new(data),
                }
            }
            Op::Scale(c) => unary(&|v| c * v),
            Op::SliceLast { start, len } => {
                let c = x.last_dim();
                if len == 0 || start + len > c {
                    return Err(self.dim_err(op, operands));
                }
                let data: Vec<f64> = x
                    .data
                    .chunks(c)
                    .flat_map(|row| row[start..start + len].iter().copied())
                    .collect();
                let mut shape = x.shape.clone();
                *shape.last_mut().unwrap() = len;
                Tensor {
                    shape,
                    data: Arc::new(data),
                }
            }
            Op::Clamp { min, max } => unary(&|v| v.clamp(min, max)),
            Op::LogSigmoid => unary(&log_sigmoid),
            Op::MeanLastAxis => {
                let c = x.last_dim();
                let data: Vec<f64> = x
                    .data
                    .chunks(c)
                    .map(|row| row.iter().sum::<f64>() / c as f64)
                    .collect();
                let mut shape = x.shape.clone();
                *shape.last_mut().unwrap() = 1;
                Tensor {
                    shape,
                    data: Arc::new(data),
                }
            }
        };
        Ok(out)
    }

    /// Reverse accumulation from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(op, node, &g, &mut grads);
        }

        let mut leaves = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let g = if node.op.is_none() && node.requires_grad {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: Arc::new(data),
                })
            } else {
                None
            };
            leaves.push(g);
        }
        Ok(Gradients { leaves })
    }

    fn propagate(&self, op: Op, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ops = &node.operands;
        let want = |k: usize| self.nodes[ops[k]].requires_grad;
        let x = &self.nodes[ops[0]].value;
        let y = &node.value;
        let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };

        match op {
            Op::Add => {
                for k in 0..2 {
                    if want(k) {
                        accumulate(grads, ops[k], g);
                    }
                }
            }
            Op::Sub => {
                if want(0) {
                    accumulate(grads, ops[0], g);
                }
                if want(1) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, ops[1], &neg);
                }
            }
            Op::Mul => {
                let b = &self.nodes[ops[1]].value;
                if want(0) {
                    accumulate(grads, ops[0], &elementwise(&|i| g[i] * b.data[i]));
                }
                if want(1) {
                    accumulate(grads, ops[1], &elementwise(&|i| g[i] * x.data[i]));
                }
            }
            Op::Matmul => {
                let b = &self.nodes[ops[1]].value;
                let (m, k, n) = (x.shape[0], x.shape[1], b.shape[1]);
                if want(0) {
                    accumulate(grads, ops[0], &matmul_nt(g, &b.data, m, n, k));
                }
                if want(1) {
                    accumulate(grads, ops[1], &matmul_tn(&x.data, g, m, k, n));
                }
            }
            Op::Relu => {
                accumulate(
                    grads,
                    ops[0],
                    &elementwise(&|i| if x.data[i] > 0.0 { g[i] } else { 0.0 }),
                );
            }
            Op::Sigmoid => {
                accumulate(
                    grads,
                    ops[0],
                    &elementwise(&|i| g[i] * y.data[i] * (1.0 - y.data[i])),
                );
            }
            Op::Exp => accumulate(grads, ops[0], &elementwise(&|i| g[i] * y.data[i])),
            Op::Log => accumulate(grads, ops[0], &elementwise(&|i| g[i] / x.data[i])),
            Op::Neg => accumulate(grads, ops[0], &elementwise(&|i| -g[i])),
            Op::Sum => accumulate(grads, ops[0], &vec![g[0]; x.len()]),
            Op::Mean => accumulate(grads, ops[0], &vec![g[0] / x.len() as f64; x.len()]),
            Op::Abs => {
                let d: Vec<f64> = x
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, ops[0], &d);
            }
            Op::Concat => {
                let total = y.last_dim();
                let rows = y.outer_len();
                let mut offset = 0;
                for &o in ops.iter() {
                    let w = self.nodes[o].value.last_dim();
                    if self.nodes[o].requires_grad {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, o, &d);
                    }
                    offset += w;
                }
            }
            Op::AddBias => {
                if want(0) {
                    accumulate(grads, ops[0], g);
                }
                if want(1) {
                    let c = x.last_dim();
                    let mut d = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (dv, gv) in d.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                    accumulate(grads, ops[1], &d);
                }
            }
            Op::Scale(c) => accumulate(grads, ops[0], &elementwise(&|i| c * g[i])),
            Op::SliceLast { start, len } => {
                let c = x.last_dim();
                let mut d = vec![0.0; x.len()];
                for (r, grow) in g.chunks(len).enumerate() {
                    d[r * c + start..r * c + start + len].copy_from_slice(grow);
                }
                accumulate(grads, ops[0], &d);
            }
            Op::Clamp { min, max } => {
                accumulate(
                    grads,
                    ops[0],
                    &elementwise(&|i| {
                        let v = x.data[i];
                        if (min..=max).contains(&v) {
                            g[i]
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::LogSigmoid => {
                accumulate(
                    grads,
                    ops[0],
                    &elementwise(&|i| g[i] * sigmoid(-x.data[i])),
                );
            }
            Op::MeanLastAxis => {
                let c = x.last_dim();
                let mut d = Vec::with_capacity(x.len());
                for &gv in g {
                    d.extend(std::iter::repeat(gv / c as f64).take(c));
                }
                accumulate(grads, ops[0], &d);
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul, &[a, b])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Abs, &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::Concat, parts)
    }
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.apply(Op::AddBias, &[x, bias])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::SliceLast { start, len }, &[a])
    }
    pub fn clamp(&mut self, a: Var, min: f64, max: f64) -> Result<Var> {
        self.apply(Op::Clamp { min, max }, &[a])
    }
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSigmoid, &[a])
    }
    pub fn mean_last_axis(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::MeanLastAxis, &[a])
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, d: &[f64]) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(d) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// `(m, k) x (k, n)`.
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g (m, n) x b^T` where `b` is `(k, n)`; result `(m, k)`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `a^T x g` where `a` is `(m, k)` and `g` is `(m, n)`; result `(k, n)`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate at which the maximum occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates whose difference was recomputed in extended precision.
    pub refined: usize,
}

/// Relative discrepancy used by every gradient check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares `analytic` against central differences of `value` at `point`.
pub fn compare_with_central_differences<F>(
    mut value: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }
    if analytic.len() != point.len() {
        return Err(Error::Dimension {
            op: "grad_check",
            shapes: vec![vec![point.len()], vec![analytic.len()]],
        });
    }
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let mut worst = (0.0, 0);
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = value(&x)?;
        x[i] = orig - step;
        let minus = value(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!("f is not finite near coordinate {i}")));
        }
        let fd = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], fd);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        analytic: analytic.to_vec(),
        numeric,
        refined: 0,
    })
}

/// Gradient check for a scalar function written in tape primitives.
///
/// `f` receives a fresh tape and the parameter leaf and returns the scalar root.
pub fn grad_check<F>(mut f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let root = f(&mut tape, x)?;
    let root_value = tape.value(root).item();
    if !root_value.is_finite() {
        return Err(Error::Evaluation(format!("f = {root_value}")));
    }
    let analytic = tape.backward(root)?.take(x).expect("leaf gradient").into_data();

    let shape = point.shape().to_vec();
    compare_with_central_differences(
        |flat| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(shape.clone(), flat.to_vec())?);
            let root = f(&mut tape, x)?;
            Ok(tape.value(root).item())
        },
        point.data(),
        &analytic,
        step,
    )
}
