//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! A [`Var`] wraps a tensor value plus the operation that produced it. Ops
//! whose inputs carry no gradient are recorded as plain constants, so code run
//! on constants keeps no intermediates alive and allocates like ordinary
//! inference code. [`grad`] walks the recorded ops once, in reverse
//! topological order, accumulating gradients keyed by node identity.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor, EPS};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Gemm { a: Var, b: Var, ta: bool, tb: bool, alpha: f32 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    MulCol { x: Var, col: Var },
    DivCol { x: Var, col: Var },
    SubCol { x: Var, col: Var },
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Sqrt(Var),
    Elu1(Var),
    Softmax(Var),
    LogSumExp(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    Gather { x: Var, idx: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Reshape(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

impl Op {
    fn parents(&self) -> Vec<&Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Gemm { a, b, .. } | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            AddRow { x, bias } => vec![x, bias],
            MulCol { x, col } | DivCol { x, col } | SubCol { x, col } => vec![x, col],
            LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Scale(x, _) | AddScalar(x) | Relu(x) | Exp(x) | Sqrt(x) | Elu1(x) | Softmax(x)
            | LogSumExp(x) | Transpose(x) | Sum(x) | SumRows(x) | SumCols(x) | Reshape(x) => {
                vec![x]
            }
            Gather { x, .. } | SliceRows { x, .. } | SliceCols { x, .. } => vec![x],
            ConcatRows(xs) | ConcatCols(xs) => xs.iter().collect(),
            CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

impl Var {
    fn record(value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| p.0.requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op,
        }))
    }

    /// Trainable leaf.
    pub fn param(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            op: Op::Leaf,
        }))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            op: Op::Leaf,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.value().clone())
    }

    /// `alpha * op(self) * op(other)` for 2-D operands.
    pub fn gemm(&self, ta: bool, other: &Var, tb: bool, alpha: f32) -> Result<Var> {
        let v = Tensor::gemm(self.value(), ta, other.value(), tb, alpha)?;
        Ok(Var::record(
            v,
            Op::Gemm {
                a: self.clone(),
                b: other.clone(),
                ta,
                tb,
                alpha,
            },
        ))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.gemm(false, other, false, 1.0)
    }

    /// `alpha * self * otherᵀ`.
    pub fn matmul_nt(&self, other: &Var, alpha: f32) -> Result<Var> {
        self.gemm(false, other, true, alpha)
    }

    /// `selfᵀ * other`.
    pub fn matmul_tn(&self, other: &Var) -> Result<Var> {
        self.gemm(true, other, false, 1.0)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value().add(other.value())?;
        Ok(Var::record(v, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.value().sub(other.value())?;
        Ok(Var::record(v, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.value().mul(other.value())?;
        Ok(Var::record(v, Op::Mul(self.clone(), other.clone())))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        let (r, c) = require_2d("add_row", self.value())?;
        if bias.value().numel() != c {
            return Err(shape_err("add_row", self.value(), bias.value()));
        }
        let b = bias.value().data();
        let mut out = self.value().to_vec();
        for i in 0..r {
            for (o, bv) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let v = Tensor::new(&[r, c], out)?;
        Ok(Var::record(
            v,
            Op::AddRow {
                x: self.clone(),
                bias: bias.clone(),
            },
        ))
    }

    fn col_op(&self, col: &Var, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (r, c) = require_2d(name, self.value())?;
        if col.value().numel() != r {
            return Err(shape_err(name, self.value(), col.value()));
        }
        let s = col.value().data();
        let x = self.value().data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(x[i * c..(i + 1) * c].iter().map(|&v| f(v, s[i])));
        }
        Tensor::new(&[r, c], out)
    }

    /// Multiplies row `i` by `col[i]`.
    pub fn mul_col(&self, col: &Var) -> Result<Var> {
        let v = self.col_op(col, "mul_col", |x, s| x * s)?;
        Ok(Var::record(
            v,
            Op::MulCol {
                x: self.clone(),
                col: col.clone(),
            },
        ))
    }

    /// Divides row `i` by `col[i]`.
    pub fn div_col(&self, col: &Var) -> Result<Var> {
        let v = self.col_op(col, "div_col", |x, s| x / s)?;
        Ok(Var::record(
            v,
            Op::DivCol {
                x: self.clone(),
                col: col.clone(),
            },
        ))
    }

    /// Subtracts `col[i]` from row `i`.
    pub fn sub_col(&self, col: &Var) -> Result<Var> {
        let v = self.col_op(col, "sub_col", |x, s| x - s)?;
        Ok(Var::record(
            v,
            Op::SubCol {
                x: self.clone(),
                col: col.clone(),
            },
        ))
    }

    pub fn scale(&self, c: f32) -> Var {
        Var::record(self.value().scale(c), Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f32) -> Var {
        Var::record(self.value().map(|x| x + c), Op::AddScalar(self.clone()))
    }

    pub fn relu(&self) -> Var {
        Var::record(self.value().map(|x| x.max(0.0)), Op::Relu(self.clone()))
    }

    pub fn exp(&self) -> Var {
        Var::record(self.value().map(f32::exp), Op::Exp(self.clone()))
    }

    pub fn sqrt(&self) -> Var {
        Var::record(self.value().map(f32::sqrt), Op::Sqrt(self.clone()))
    }

    /// `elu(x) + 1`, with `elu(x) = x` for `x > 0` and `eˣ − 1` otherwise.
    pub fn elu1(&self) -> Var {
        Var::record(
            self.value().map(|x| if x > 0.0 { x + 1.0 } else { x.exp() }),
            Op::Elu1(self.clone()),
        )
    }

    pub fn softmax_rows(&self, mask: Option<&Mask>) -> Result<Var> {
        let v = self.value().softmax_rows(mask)?;
        Ok(Var::record(v, Op::Softmax(self.clone())))
    }

    /// Row-wise log-sum-exp, shape `[rows, 1]`.
    pub fn logsumexp_rows(&self) -> Result<Var> {
        let (r, c) = require_2d("logsumexp_rows", self.value())?;
        let x = self.value().data();
        let out = (0..r)
            .map(|i| logsumexp(&x[i * c..(i + 1) * c]))
            .collect();
        Ok(Var::record(Tensor::new(&[r, 1], out)?, Op::LogSumExp(self.clone())))
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var) -> Result<Var> {
        let (r, c) = require_2d("layer_norm", self.value())?;
        if gamma.value().numel() != c || beta.value().numel() != c {
            return Err(shape_err("layer_norm", self.value(), gamma.value()));
        }
        let x = self.value().data();
        let (g, b) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(&[r, c], out)?;
        Ok(Var::record(
            v,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
        ))
    }

    /// Rows `idx` of a 2-D value, in order (embedding lookup, permutations).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var> {
        let v = self.value().gather_rows(idx)?;
        Ok(Var::record(
            v,
            Op::Gather {
                x: self.clone(),
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        let v = self.value().slice_rows(start, len)?;
        Ok(Var::record(v, Op::SliceRows { x: self.clone(), start }))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        let v = self.value().slice_cols(start, len)?;
        Ok(Var::record(v, Op::SliceCols { x: self.clone(), start }))
    }

    pub fn concat_rows(parts: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value().clone()).collect();
        let v = Tensor::concat_rows(&vals)?;
        Ok(Var::record(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(parts: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value().clone()).collect();
        let v = Tensor::concat_cols(&vals)?;
        Ok(Var::record(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn transpose(&self) -> Result<Var> {
        let v = self.value().transpose()?;
        Ok(Var::record(v, Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape)?;
        Ok(Var::record(v, Op::Reshape(self.clone())))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Var {
        Var::record(Tensor::scalar(self.value().sum()), Op::Sum(self.clone()))
    }

    /// Sum over columns, shape `[rows, 1]`.
    pub fn sum_rows(&self) -> Result<Var> {
        let (r, c) = require_2d("sum_rows", self.value())?;
        let x = self.value().data();
        let out = (0..r).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(Var::record(Tensor::new(&[r, 1], out)?, Op::SumRows(self.clone())))
    }

    /// Sum over rows, shape `[1, cols]`.
    pub fn sum_cols(&self) -> Result<Var> {
        let (r, c) = require_2d("sum_cols", self.value())?;
        let x = self.value().data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Ok(Var::record(Tensor::new(&[1, c], out)?, Op::SumCols(self.clone())))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var> {
        let (r, c) = require_2d("cross_entropy", self.value())?;
        if labels.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![r, c],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Param(format!("label {bad} out of {c} classes")));
        }
        let probs = self.value().softmax_rows(None)?;
        let x = self.value().data();
        let mut loss = 0.0f64;
        for (i, &l) in labels.iter().enumerate() {
            loss += (logsumexp(&x[i * c..(i + 1) * c]) - x[i * c + l]) as f64;
        }
        let v = Tensor::scalar((loss / r as f64) as f32);
        Ok(Var::record(
            v,
            Op::CrossEntropy {
                logits: self.clone(),
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

fn logsumexp(row: &[f32]) -> f32 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if m == f32::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln()
}

fn accumulate(grads: &mut HashMap<u64, Tensor>, v: &Var, g: Tensor) -> Result<()> {
    if !v.requires_grad() {
        return Ok(());
    }
    let g = if g.shape() != v.shape() { g.reshape(v.shape())? } else { g };
    match grads.remove(&v.id()) {
        Some(prev) => {
            grads.insert(v.id(), prev.add(&g)?);
        }
        None => {
            grads.insert(v.id(), g);
        }
    }
    Ok(())
}

/// Nodes reachable from `root` through grad-requiring edges, parents first.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in v.0.op.parents() {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Gradients of a scalar `loss` with respect to each of `wrt`.
pub fn grad(loss: &Var, wrt: &[&Var]) -> Result<Vec<Tensor>> {
    if loss.value().numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let order = topo_order(loss);
    let reachable: HashSet<u64> = order.iter().map(|v| v.id()).collect();
    for (index, w) in wrt.iter().enumerate() {
        if !w.requires_grad() || !reachable.contains(&w.id()) {
            return Err(Error::Disconnected { index });
        }
    }
    let keep: HashSet<u64> = wrt.iter().map(|w| w.id()).collect();
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(loss.id(), Tensor::full(loss.shape(), 1.0));
    for node in order.iter().rev() {
        let g = if keep.contains(&node.id()) {
            grads.get(&node.id()).cloned()
        } else {
            grads.remove(&node.id())
        };
        if let Some(g) = g {
            backward_step(node, &g, &mut grads)?;
        }
    }
    wrt.iter()
        .map(|w| {
            Ok(grads
                .remove(&w.id())
                .unwrap_or_else(|| Tensor::zeros(w.shape())))
        })
        .collect()
}

fn backward_step(node: &Var, g: &Tensor, grads: &mut HashMap<u64, Tensor>) -> Result<()> {
    let out = node.value();
    match &node.0.op {
        Op::Leaf => {}
        Op::Gemm { a, b, ta, tb, alpha } => {
            let (av, bv) = (a.value(), b.value());
            if a.requires_grad() {
                let da = if !ta {
                    Tensor::gemm(g, false, bv, !tb, *alpha)?
                } else {
                    Tensor::gemm(bv, *tb, g, true, *alpha)?
                };
                accumulate(grads, a, da)?;
            }
            if b.requires_grad() {
                let db = if !tb {
                    Tensor::gemm(av, !ta, g, false, *alpha)?
                } else {
                    Tensor::gemm(g, true, av, *ta, *alpha)?
                };
                accumulate(grads, b, db)?;
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, a, g.clone())?;
            accumulate(grads, b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, g.clone())?;
            if b.requires_grad() {
                accumulate(grads, b, g.scale(-1.0))?;
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                accumulate(grads, a, g.mul(b.value())?)?;
            }
            if b.requires_grad() {
                accumulate(grads, b, g.mul(a.value())?)?;
            }
        }
        Op::AddRow { x, bias } => {
            accumulate(grads, x, g.clone())?;
            if bias.requires_grad() {
                accumulate(grads, bias, column_sums(g))?;
            }
        }
        Op::MulCol { x, col } => {
            let (r, c) = (g.rows(), g.cols());
            let s = col.value().data();
            if x.requires_grad() {
                let gd = g.data();
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    dx.extend(gd[i * c..(i + 1) * c].iter().map(|v| v * s[i]));
                }
                accumulate(grads, x, Tensor::new(&[r, c], dx)?)?;
            }
            if col.requires_grad() {
                let ds = row_dots(g, x.value());
                accumulate(grads, col, ds)?;
            }
        }
        Op::DivCol { x, col } => {
            let (r, c) = (g.rows(), g.cols());
            let s = col.value().data();
            let gd = g.data();
            if x.requires_grad() {
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    dx.extend(gd[i * c..(i + 1) * c].iter().map(|v| v / s[i]));
                }
                accumulate(grads, x, Tensor::new(&[r, c], dx)?)?;
            }
            if col.requires_grad() {
                // d(x/s)/ds = -out/s
                let dots = row_dots(g, out);
                let ds: Vec<f32> = dots.data().iter().zip(s).map(|(d, s)| -d / s).collect();
                accumulate(grads, col, Tensor::new(&[r, 1], ds)?)?;
            }
        }
        Op::SubCol { x, col } => {
            accumulate(grads, x, g.clone())?;
            if col.requires_grad() {
                let r = g.rows();
                let c = g.cols();
                let gd = g.data();
                let ds = (0..r)
                    .map(|i| -gd[i * c..(i + 1) * c].iter().sum::<f32>())
                    .collect();
                accumulate(grads, col, Tensor::new(&[r, 1], ds)?)?;
            }
        }
        Op::Scale(x, c) => accumulate(grads, x, g.scale(*c))?,
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, x, g.clone())?,
        Op::Relu(x) => {
            let dx = g.zip_map(x.value(), "relu_bwd", |g, x| if x > 0.0 { g } else { 0.0 })?;
            accumulate(grads, x, dx)?;
        }
        Op::Exp(x) => accumulate(grads, x, g.mul(out)?)?,
        Op::Sqrt(x) => accumulate(grads, x, g.zip_map(out, "sqrt_bwd", |g, y| 0.5 * g / y)?)?,
        Op::Elu1(x) => {
            let dx = g.zip_map(x.value(), "elu_bwd", |g, x| if x > 0.0 { g } else { g * x.exp() })?;
            accumulate(grads, x, dx)?;
        }
        Op::Softmax(x) => {
            let (r, c) = (out.rows(), out.cols());
            let (y, gd) = (out.data(), g.data());
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let yr = &y[i * c..(i + 1) * c];
                let gr = &gd[i * c..(i + 1) * c];
                let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dx[i * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, x, Tensor::new(x.shape(), dx)?)?;
        }
        Op::LogSumExp(x) => {
            let (r, c) = (x.value().rows(), x.value().cols());
            let xd = x.value().data();
            let (l, gd) = (out.data(), g.data());
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    let p = if l[i] == f32::NEG_INFINITY {
                        0.0
                    } else {
                        (xd[i * c + j] - l[i]).exp()
                    };
                    dx[i * c + j] = p * gd[i];
                }
            }
            accumulate(grads, x, Tensor::new(&[r, c], dx)?)?;
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let (r, c) = (out.rows(), out.cols());
            let gd = g.data();
            let gam = gamma.value().data();
            if gamma.requires_grad() || beta.requires_grad() {
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dg[j] += gd[i * c + j] * xhat[i * c + j];
                        db[j] += gd[i * c + j];
                    }
                }
                accumulate(grads, gamma, Tensor::new(gamma.shape(), dg)?)?;
                accumulate(grads, beta, Tensor::new(beta.shape(), db)?)?;
            }
            if x.requires_grad() {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        let dh = gd[i * c + j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[i * c + j];
                    }
                    let n = c as f32;
                    for j in 0..c {
                        let dh = gd[i * c + j] * gam[j];
                        dx[i * c + j] =
                            inv_std[i] / n * (n * dh - sum_dh - xhat[i * c + j] * sum_dh_h);
                    }
                }
                accumulate(grads, x, Tensor::new(&[r, c], dx)?)?;
            }
        }
        Op::Gather { x, idx } => {
            let c = x.value().cols();
            let mut dx = vec![0.0; x.value().numel()];
            let gd = g.data();
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    dx[i * c + j] += gd[k * c + j];
                }
            }
            accumulate(grads, x, Tensor::new(x.shape(), dx)?)?;
        }
        Op::SliceRows { x, start } => {
            let c = x.value().cols();
            let mut dx = vec![0.0; x.value().numel()];
            dx[start * c..start * c + g.numel()].copy_from_slice(g.data());
            accumulate(grads, x, Tensor::new(x.shape(), dx)?)?;
        }
        Op::SliceCols { x, start } => {
            let (r, c) = (x.value().rows(), x.value().cols());
            let w = g.cols();
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
            }
            accumulate(grads, x, Tensor::new(&[r, c], dx)?)?;
        }
        Op::ConcatRows(parts) => {
            let mut row = 0;
            for p in parts {
                let pr = p.value().rows();
                if p.requires_grad() {
                    accumulate(grads, p, g.slice_rows(row, pr)?)?;
                }
                row += pr;
            }
        }
        Op::ConcatCols(parts) => {
            let mut col = 0;
            for p in parts {
                let pc = p.value().cols();
                if p.requires_grad() {
                    accumulate(grads, p, g.slice_cols(col, pc)?)?;
                }
                col += pc;
            }
        }
        Op::Transpose(x) => accumulate(grads, x, g.transpose()?)?,
        Op::Sum(x) => accumulate(grads, x, Tensor::full(x.shape(), g.item()))?,
        Op::SumRows(x) => {
            let (r, c) = (x.value().rows(), x.value().cols());
            let gd = g.data();
            let dx = (0..r * c).map(|k| gd[k / c]).collect();
            accumulate(grads, x, Tensor::new(&[r, c], dx)?)?;
        }
        Op::SumCols(x) => {
            let (r, c) = (x.value().rows(), x.value().cols());
            let gd = g.data();
            let dx = (0..r * c).map(|k| gd[k % c]).collect();
            accumulate(grads, x, Tensor::new(&[r, c], dx)?)?;
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let (r, c) = (probs.rows(), probs.cols());
            let scale = g.item() / r as f32;
            let mut dx = probs.to_vec();
            for (i, &l) in labels.iter().enumerate() {
                dx[i * c + l] -= 1.0;
            }
            for v in dx.iter_mut() {
                *v *= scale;
            }
            accumulate(grads, logits, Tensor::new(&[r, c], dx)?)?;
        }
    }
    Ok(())
}

fn column_sums(g: &Tensor) -> Tensor {
    let (r, c) = (g.rows(), g.cols());
    let gd = g.data();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(&gd[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![c], out)
}

fn row_dots(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let (ad, bd) = (a.data(), b.data());
    let out = (0..r)
        .map(|i| {
            ad[i * c..(i + 1) * c]
                .iter()
                .zip(&bd[i * c..(i + 1) * c])
                .map(|(x, y)| x * y)
                .sum()
        })
        .collect();
    Tensor::from_parts(vec![r, 1], out)
}

/// Central finite-difference gradient of `f` at `x`, evaluated in f64 on top
/// of the f32 forward. Intended for checks, not training.
pub fn finite_difference(x: &Tensor, h: f32, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut g = Vec::with_capacity(x.numel());
    let base = x.to_vec();
    for k in 0..base.len() {
        let mut plus = base.clone();
        plus[k] += h;
        let mut minus = base.clone();
        minus[k] -= h;
        let fp = f(&Tensor::new(x.shape(), plus)?)?;
        let fm = f(&Tensor::new(x.shape(), minus)?)?;
        g.push(((fp - fm) / (2.0 * h as f64)) as f32);
    }
    Tensor::new(x.shape(), g)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        diff += ((x - y) as f64).powi(2);
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    let denom = na.sqrt().max(nb.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}
