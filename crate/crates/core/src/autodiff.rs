//! Define-by-run reverse-mode differentiation over small dense arrays.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live
//! outside the tape as [`Tensor`]s and are copied in as leaves; after
//! [`Tape::backward`] their gradients are read back with [`Tape::grad`] or
//! pulled into a [`ParamStore`].
//!
//! Broadcasting is limited to leading dimensions: in a binary elementwise
//! op the smaller operand's shape must be a suffix of the larger one (a
//! scalar of shape `[]` is a suffix of everything).

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Added to row norms in [`Tape::row_l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// A dense row-major array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidInput(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    /// A tensor that takes part in gradient computation.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape(usize),
    Scale(usize, f64),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    LayerNorm { a: usize, inv_std: Vec<f64> },
    RowL2Normalize { a: usize, norms: Vec<f64> },
    Gather { a: usize, index: Vec<usize> },
    SumAll(usize),
    MeanAxis { a: usize, outer: usize, len: usize, inner: usize },
    MaxAxis { a: usize, argmax: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        Some(&n) => (numel(&shape[..shape.len() - 1]), n),
        None => (1, 1),
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Backward(format!("variable {} is not on this tape", v.id)));
        }
        Ok(&self.nodes[v.id])
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        self.leaf_grads.push(None);
        Var { tape: self.id, id: self.nodes.len() - 1 }
    }

    /// Records a copy of `t`; gradients are tracked if `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("constant", &[&shape, &[data.len()]]));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    /// Scalar value of a shape-`[]` (or single element) variable.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.id].value[0]
    }

    /// Gradient accumulated on a leaf by previous [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.leaf_grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let shape = if is_suffix(&nb.shape, &na.shape) {
            na.shape.clone()
        } else if is_suffix(&na.shape, &nb.shape) {
            nb.shape.clone()
        } else {
            return Err(Error::shape(op, &[&na.shape, &nb.shape]));
        };
        let n = numel(&shape);
        let (la, lb) = (na.value.len(), nb.value.len());
        let value = (0..n).map(|i| f(na.value[i % la], nb.value[i % lb])).collect();
        Ok((shape, value, na.needs_grad || nb.needs_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value, g) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(shape, value, Op::Add(a.id, b.id), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value, g) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(shape, value, Op::Sub(a.id, b.id), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value, g) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(shape, value, Op::Mul(a.id, b.id), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let na = self.node(a)?;
        let value = na.value.iter().map(|x| x * c).collect();
        let (shape, g) = (na.shape.clone(), na.needs_grad);
        Ok(self.push(shape, value, Op::Scale(a.id, c), g))
    }

    /// `(m, k) × (k, n) → (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::shape("matmul", &[&na.shape, &nb.shape]));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = na.value[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &nb.value[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
            }
        }
        let g = na.needs_grad || nb.needs_grad;
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.id, b: b.id, m, k, n }, g))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        if na.shape.len() != 2 {
            return Err(Error::shape("transpose", &[&na.shape]));
        }
        let (rows, cols) = (na.shape[0], na.shape[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = na.value[r * cols + c];
            }
        }
        let g = na.needs_grad;
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a: a.id, rows, cols }, g))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let na = self.node(a)?;
        if numel(&shape) != na.value.len() {
            return Err(Error::shape("reshape", &[&na.shape, &shape]));
        }
        let (value, g) = (na.value.clone(), na.needs_grad);
        Ok(self.push(shape, value, Op::Reshape(a.id), g))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let value = na.value.iter().map(|&x| x.max(0.0)).collect();
        let (shape, g) = (na.shape.clone(), na.needs_grad);
        Ok(self.push(shape, value, Op::Relu(a.id), g))
    }

    fn last_axis_input(&self, op: &'static str, a: Var) -> Result<&Node> {
        let na = self.node(a)?;
        if na.shape.is_empty() || na.shape[na.shape.len() - 1] == 0 {
            return Err(Error::shape(op, &[&na.shape]));
        }
        Ok(na)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let na = self.last_axis_input("softmax", a)?;
        let (rows, n) = last_axis(&na.shape);
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            out.extend(crate::math::softmax(&na.value[r * n..(r + 1) * n]));
        }
        let (shape, g) = (na.shape.clone(), na.needs_grad);
        Ok(self.push(shape, out, Op::Softmax(a.id), g))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let na = self.last_axis_input("log_softmax", a)?;
        let (rows, n) = last_axis(&na.shape);
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            out.extend(crate::math::log_softmax(&na.value[r * n..(r + 1) * n]));
        }
        let (shape, g) = (na.shape.clone(), na.needs_grad);
        Ok(self.push(shape, out, Op::LogSoftmax(a.id), g))
    }

    /// Log-sum-exp over the last axis; the axis is removed from the shape.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let na = self.last_axis_input("logsumexp", a)?;
        let (rows, n) = last_axis(&na.shape);
        let out = (0..rows).map(|r| crate::math::logsumexp(&na.value[r * n..(r + 1) * n])).collect();
        let shape = na.shape[..na.shape.len() - 1].to_vec();
        let g = na.needs_grad;
        Ok(self.push(shape, out, Op::LogSumExp(a.id), g))
    }

    /// Zero-mean unit-variance normalization of the last axis (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let na = self.last_axis_input("layer_norm", a)?;
        let (rows, n) = last_axis(&na.shape);
        let mut out = Vec::with_capacity(rows * n);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &na.value[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|x| (x - mean) * is));
            inv_std.push(is);
        }
        let (shape, g) = (na.shape.clone(), na.needs_grad);
        Ok(self.push(shape, out, Op::LayerNorm { a: a.id, inv_std }, g))
    }

    /// Divides each last-axis row by `‖row‖ + NORM_EPS`.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let na = self.last_axis_input("row_l2_normalize", a)?;
        let (rows, n) = last_axis(&na.shape);
        let mut out = Vec::with_capacity(rows * n);
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &na.value[r * n..(r + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(row.iter().map(|x| x / (norm + NORM_EPS)));
            norms.push(norm);
        }
        let (shape, g) = (na.shape.clone(), na.needs_grad);
        Ok(self.push(shape, out, Op::RowL2Normalize { a: a.id, norms }, g))
    }

    /// Selects rows of a 2-D array: `(n, d) → (index.len(), d)`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let na = self.node(a)?;
        if na.shape.len() != 2 {
            return Err(Error::shape("gather_rows", &[&na.shape]));
        }
        let (n, d) = (na.shape[0], na.shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let index: Vec<usize> = rows.iter().flat_map(|&r| (r * d)..(r * d + d)).collect();
        self.gather_flat(a, index, vec![rows.len(), d])
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: &[usize], shape: Vec<usize>) -> Result<Var> {
        self.gather_flat(a, index.to_vec(), shape)
    }

    fn gather_flat(&mut self, a: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let na = self.node(a)?;
        if numel(&shape) != index.len() {
            return Err(Error::shape("gather", &[&shape, &[index.len()]]));
        }
        let len = na.value.len();
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return Err(Error::IndexOutOfRange { index: bad, len });
        }
        let value = index.iter().map(|&i| na.value[i]).collect();
        let g = na.needs_grad;
        Ok(self.push(shape, value, Op::Gather { a: a.id, index }, g))
    }

    /// Sum of all entries, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let s = na.value.iter().sum();
        let g = na.needs_grad;
        Ok(self.push(vec![], vec![s], Op::SumAll(a.id), g))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let na = self.node(a)?;
        if axis >= na.shape.len() || na.shape[axis] == 0 {
            return Err(Error::shape("mean_axis", &[&na.shape, &[axis]]));
        }
        let (outer, len, inner) = axis_split(&na.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += na.value[(o * len + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|x| *x /= len as f64);
        let mut shape = na.shape.clone();
        shape.remove(axis);
        let g = na.needs_grad;
        Ok(self.push(shape, out, Op::MeanAxis { a: a.id, outer, len, inner }, g))
    }

    /// Maximum over `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let na = self.node(a)?;
        if axis >= na.shape.len() || na.shape[axis] == 0 {
            return Err(Error::shape("max_axis", &[&na.shape, &[axis]]));
        }
        let (outer, len, inner) = axis_split(&na.shape, axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let slot = o * inner + i;
                for k in 0..len {
                    let flat = (o * len + k) * inner + i;
                    if k == 0 || na.value[flat] > out[slot] {
                        out[slot] = na.value[flat];
                        argmax[slot] = flat;
                    }
                }
            }
        }
        let mut shape = na.shape.clone();
        shape.remove(axis);
        let g = na.needs_grad;
        Ok(self.push(shape, out, Op::MaxAxis { a: a.id, argmax }, g))
    }

    /// Back-propagates from the scalar `loss`, adding dLoss/dLeaf into the
    /// leaf gradient buffers. Repeated calls keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.node(loss)?;
        if !node.shape.is_empty() {
            return Err(Error::Backward(format!("loss must be a scalar, got shape {:?}", node.shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[target].needs_grad {
                    return;
                }
                let buf = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
                f(buf);
            };
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[id] {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                        slot => *slot = Some(g),
                    }
                    continue;
                }
                &Op::Add(a, b) => {
                    send(a, &mut |ga| accumulate_broadcast(ga, &g, 1.0));
                    send(b, &mut |gb| accumulate_broadcast(gb, &g, 1.0));
                }
                &Op::Sub(a, b) => {
                    send(a, &mut |ga| accumulate_broadcast(ga, &g, 1.0));
                    send(b, &mut |gb| accumulate_broadcast(gb, &g, -1.0));
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    send(a, &mut |ga| {
                        let (la, lb) = (ga.len(), vb.len());
                        g.iter().enumerate().for_each(|(i, gi)| ga[i % la] += gi * vb[i % lb]);
                    });
                    send(b, &mut |gb| {
                        let (la, lb) = (va.len(), gb.len());
                        g.iter().enumerate().for_each(|(i, gi)| gb[i % lb] += gi * va[i % la]);
                    });
                }
                &Op::MatMul { a, b, m, k, n } => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    // dA = G Bᵀ
                    send(a, &mut |ga| {
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &vb[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                    // dB = Aᵀ G
                    send(b, &mut |gb| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = va[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                gb[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(o, y)| *o += x * y);
                            }
                        }
                    });
                }
                &Op::Transpose { a, rows, cols } => send(a, &mut |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                }),
                &Op::Reshape(a) => send(a, &mut |ga| accumulate_broadcast(ga, &g, 1.0)),
                &Op::Scale(a, c) => send(a, &mut |ga| accumulate_broadcast(ga, &g, c)),
                &Op::Relu(a) => {
                    let va = &nodes[a].value;
                    send(a, &mut |ga| {
                        for i in 0..ga.len() {
                            if va[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    });
                }
                &Op::Softmax(a) => {
                    let y = &node.value;
                    let (rows, n) = last_axis(&node.shape);
                    send(a, &mut |ga| {
                        for r in 0..rows {
                            let s = r * n..(r + 1) * n;
                            let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                            for i in s {
                                ga[i] += y[i] * (g[i] - dot);
                            }
                        }
                    });
                }
                &Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let (rows, n) = last_axis(&node.shape);
                    send(a, &mut |ga| {
                        for r in 0..rows {
                            let s = r * n..(r + 1) * n;
                            let total: f64 = g[s.clone()].iter().sum();
                            for i in s {
                                let p = if y[i] == f64::NEG_INFINITY { 0.0 } else { y[i].exp() };
                                ga[i] += g[i] - p * total;
                            }
                        }
                    });
                }
                &Op::LogSumExp(a) => {
                    let x = &nodes[a].value;
                    let (rows, n) = last_axis(&nodes[a].shape);
                    let out = &node.value;
                    send(a, &mut |ga| {
                        for r in 0..rows {
                            if out[r] == f64::NEG_INFINITY {
                                continue;
                            }
                            for i in r * n..(r + 1) * n {
                                ga[i] += g[r] * (x[i] - out[r]).exp();
                            }
                        }
                    });
                }
                Op::LayerNorm { a, inv_std } => {
                    let y = &node.value;
                    let (rows, n) = last_axis(&node.shape);
                    send(*a, &mut |ga| {
                        for r in 0..rows {
                            let s = r * n..(r + 1) * n;
                            let mean_g = g[s.clone()].iter().sum::<f64>() / n as f64;
                            let mean_gy =
                                g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for i in s {
                                ga[i] += inv_std[r] * (g[i] - mean_g - y[i] * mean_gy);
                            }
                        }
                    });
                }
                Op::RowL2Normalize { a, norms } => {
                    let x = &nodes[*a].value;
                    let (rows, n) = last_axis(&node.shape);
                    send(*a, &mut |ga| {
                        for r in 0..rows {
                            let s = r * n..(r + 1) * n;
                            let norm = norms[r];
                            let denom = norm + NORM_EPS;
                            let dot: f64 = g[s.clone()].iter().zip(&x[s.clone()]).map(|(a, b)| a * b).sum();
                            let coef = if norm > 0.0 { dot / (norm * denom * denom) } else { 0.0 };
                            for i in s {
                                ga[i] += g[i] / denom - x[i] * coef;
                            }
                        }
                    });
                }
                Op::Gather { a, index } => send(*a, &mut |ga| {
                    for (gi, &src) in g.iter().zip(index) {
                        ga[src] += gi;
                    }
                }),
                &Op::SumAll(a) => send(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
                &Op::MeanAxis { a, outer, len, inner } => send(a, &mut |ga| {
                    let inv = 1.0 / len as f64;
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                ga[(o * len + k) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }),
                Op::MaxAxis { a, argmax } => send(*a, &mut |ga| {
                    for (gi, &src) in g.iter().zip(argmax) {
                        ga[src] += gi;
                    }
                }),
            }
        }
        Ok(())
    }
}

/// `dst[i % dst.len()] += c * src[i]`, reducing a broadcast gradient.
fn accumulate_broadcast(dst: &mut [f64], src: &[f64], c: f64) {
    let n = dst.len();
    if n == src.len() {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
    } else {
        src.iter().enumerate().for_each(|(i, s)| dst[i % n] += c * s);
    }
}

/// Named collection of parameter tensors, in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a leaf; the returned handles follow slot order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    /// Adds tape gradients of `vars` (from [`ParamStore::bind`]) into the tensors.
    pub fn pull_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let b = tape.constant(vec![3, 4], vec![1.0; 12]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        assert!(tape.value(c).iter().all(|&x| x == 3.0));
    }

    #[test]
    fn matmul_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn logsumexp_and_softmax_values() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let l = tape.logsumexp(x).unwrap();
        assert!((tape.item(l) - 2f64.ln()).abs() < 1e-15);
        let y = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        let s = tape.softmax(y).unwrap();
        for &p in tape.value(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_logsumexp() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::param(vec![2], vec![0.0, 0.0]).unwrap());
        let loss = tape.logsumexp(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::param(vec![3], vec![0.3, -1.2, 2.5]).unwrap());
        let s = tape.softmax(x).unwrap();
        let w = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = tape.mul(s, w).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::param(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
        let mut other = Tape::new();
        let y = other.leaf(&Tensor::scalar(1.0).with_requires_grad(true));
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn broadcast_leading_dims_only() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let bias = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = tape.add(a, bias).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let col = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(tape.add(a, col).is_err());
    }

    #[test]
    fn row_l2_normalize_unit_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let n = tape.row_l2_normalize(a).unwrap();
        let v = tape.value(n);
        assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
