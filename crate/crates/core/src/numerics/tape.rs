//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`]; nodes only ever refer to
//! earlier nodes, so append order is a topological order and
//! [`Tape::backward`] is a single reverse sweep that visits each node once.
//!
//! Besides the generic building blocks (matmul, softmax, elementwise maps)
//! the tape has a few fused ops used by the ranking models:
//!
//! * block ops (`block_matmul`, `block_add`, `block_mul`) apply a separate
//!   parameter to every token position of a `[.., K, n]` tensor, or one
//!   shared parameter when given a single var;
//! * `attention` is multi-head scaled dot-product attention with the
//!   probabilities saved for the backward pass;
//! * `segment_mean` and `embedding_lookup` cover the sparse input side.
//!
//! The tape also counts scalar multiplications performed by forward ops,
//! which the FLOPs estimator is checked against.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{gemm, gemm_into, MatRef};
use super::tensor::Tensor;
use crate::error::{HhftError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    MatMul(Var, Var),
    BlockMatMul { x: Var, ws: Vec<Var> },
    BlockAdd { x: Var, bs: Vec<Var> },
    BlockMul { x: Var, gs: Vec<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Normalize { x: Var, inv_std: Vec<f64> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SegmentMean { x: Var, segments: Vec<(usize, usize)> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Tensor },
    BceWithLogits { logits: Var, labels: Vec<f64> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::BlockMatMul { x, ws: ps }
            | Op::BlockAdd { x, bs: ps }
            | Op::BlockMul { x, gs: ps } => std::iter::once(*x).chain(ps.iter().copied()).collect(),
            Op::Normalize { x, .. }
            | Op::Slice { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::SegmentMean { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    multiplies: Cell<u64>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Takes the gradient out of the map, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Row layout shared by the block ops: `rows` rows of width `width`, where
/// row `r` uses parameter `r % count` (or parameter 0 when `count == 1`).
struct BlockLayout {
    rows: usize,
    width: usize,
    count: usize,
}

impl BlockLayout {
    fn param_index(&self, row: usize) -> usize {
        if self.count == 1 {
            0
        } else {
            row % self.count
        }
    }
}

fn block_layout(op: &'static str, x: &Tensor, count: usize) -> Result<BlockLayout> {
    if x.rank() == 0 || count == 0 {
        return Err(HhftError::shape(op, x.shape(), &[count]));
    }
    let width = x.last_dim();
    let rows = if width == 0 { 0 } else { x.len() / width };
    if count > 1 && (x.rank() < 2 || x.shape()[x.rank() - 2] != count) {
        return Err(HhftError::shape(op, x.shape(), &[count]));
    }
    Ok(BlockLayout { rows, width, count })
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(data: &mut [f64], width: usize) {
    if width == 0 {
        return;
    }
    for row in data.chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Attention probabilities `softmax(Q_h K_hᵀ · scale)` for every batch entry
/// and head, laid out `[B, heads, T, T]`.
///
/// `q` and `k` are `[B, T, heads·dh]`; head `h` owns columns
/// `h·dh .. (h+1)·dh`.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize, scale: f64) -> Result<Tensor> {
    if q.rank() != 3 || q.shape() != k.shape() || heads == 0 || !q.shape()[2].is_multiple_of(heads) {
        return Err(HhftError::shape("attention", q.shape(), k.shape()));
    }
    let (b, t, width) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = width / heads;
    let mut probs = Tensor::zeros(&[b, heads, t, t]);
    let p = probs.data_mut();
    for bi in 0..b {
        for h in 0..heads {
            let base = (bi * heads + h) * t * t;
            let off = bi * t * width + h * dh;
            gemm_into(
                t,
                dh,
                t,
                MatRef::strided(q.data(), off, width, 1),
                MatRef::strided(k.data(), off, width, 1).t(),
                p,
                base,
                t,
                false,
            );
            for s in &mut p[base..base + t * t] {
                *s *= scale;
            }
            softmax_rows(&mut p[base..base + t * t], t);
        }
    }
    Ok(probs)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Scalar multiplications (and divisions) performed by forward ops so far.
    pub fn multiply_count(&self) -> u64 {
        self.multiplies.get()
    }

    fn count(&self, n: usize) {
        self.multiplies.set(self.multiplies.get() + n as u64);
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Registers a differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Registers a leaf that is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[var.0].value)
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    /// Saved probabilities of every attention node, in recording order.
    pub fn attention_probs(&self) -> Vec<Tensor> {
        self.nodes
            .borrow()
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention { probs, .. } => Some(probs.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.value(x)).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// 2-D matrix product `[m×k]·[k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(&bv)?;
        self.count(av.shape()[0] * av.shape()[1] * bv.shape()[1]);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Multiplies each row of `x: [.., K, din]` by its block's `[din, dout]`
    /// matrix. With a single matrix every row shares it.
    pub fn block_matmul(&self, x: Var, ws: &[Var]) -> Result<Var> {
        let xv = self.value(x);
        let layout = block_layout("block_matmul", &xv, ws.len())?;
        let wvals: Vec<Rc<Tensor>> = ws.iter().map(|&w| self.value(w)).collect();
        let din = layout.width;
        let dout = wvals[0].shape().get(1).copied().unwrap_or(0);
        for w in &wvals {
            if w.rank() != 2 || w.shape()[0] != din || w.shape()[1] != dout {
                return Err(HhftError::shape("block_matmul", xv.shape(), w.shape()));
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut out = Tensor::zeros(&shape);
        let count = layout.count;
        let per_block = layout.rows / count;
        for (k, w) in wvals.iter().enumerate() {
            gemm_into(
                per_block,
                din,
                dout,
                MatRef::strided(xv.data(), k * din, count * din, 1),
                MatRef::row_major(w.data(), dout),
                out.data_mut(),
                k * dout,
                count * dout,
                false,
            );
        }
        self.count(layout.rows * din * dout);
        Ok(self.push(out, Op::BlockMatMul { x, ws: ws.to_vec() }))
    }

    /// Adds a per-block vector (or one shared vector) along the last axis.
    pub fn block_add(&self, x: Var, bs: &[Var]) -> Result<Var> {
        let xv = self.value(x);
        let layout = block_layout("block_add", &xv, bs.len())?;
        let bvals: Vec<Rc<Tensor>> = bs.iter().map(|&b| self.value(b)).collect();
        for b in &bvals {
            if b.shape() != [layout.width] {
                return Err(HhftError::shape("block_add", xv.shape(), b.shape()));
            }
        }
        let mut out = (*xv).clone();
        if layout.width > 0 {
            for (r, row) in out.data_mut().chunks_mut(layout.width).enumerate() {
                let b = bvals[layout.param_index(r)].data();
                row.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
            }
        }
        Ok(self.push(out, Op::BlockAdd { x, bs: bs.to_vec() }))
    }

    /// Multiplies elementwise by a per-block vector along the last axis.
    pub fn block_mul(&self, x: Var, gs: &[Var]) -> Result<Var> {
        let xv = self.value(x);
        let layout = block_layout("block_mul", &xv, gs.len())?;
        let gvals: Vec<Rc<Tensor>> = gs.iter().map(|&g| self.value(g)).collect();
        for g in &gvals {
            if g.shape() != [layout.width] {
                return Err(HhftError::shape("block_mul", xv.shape(), g.shape()));
            }
        }
        let mut out = (*xv).clone();
        if layout.width > 0 {
            for (r, row) in out.data_mut().chunks_mut(layout.width).enumerate() {
                let g = gvals[layout.param_index(r)].data();
                row.iter_mut().zip(g).for_each(|(o, gi)| *o *= gi);
            }
        }
        self.count(xv.len());
        Ok(self.push(out, Op::BlockMul { x, gs: gs.to_vec() }))
    }

    /// Bias add over the last axis.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        self.block_add(x, &[b])
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(HhftError::shape(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.count(out.len());
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.count(out.len());
        self.push(out, Op::Scale(x, c))
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.count(out.len());
        self.push(out, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let mut out = (*self.value(x)).clone();
        let width = out.last_dim();
        softmax_rows(out.data_mut(), width);
        self.count(out.len());
        self.push(out, Op::Softmax(x))
    }

    /// Zero-mean, unit-variance rows over the last axis (biased variance).
    pub fn normalize(&self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(HhftError::Contract(format!("layer norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let width = xv.last_dim();
        if width == 0 {
            return Err(HhftError::shape("normalize", xv.shape(), &[1]));
        }
        let mut out = (*xv).clone();
        let mut inv_std = Vec::with_capacity(out.len() / width);
        for row in out.data_mut().chunks_mut(width) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.count(2 * xv.len());
        Ok(self.push(out, Op::Normalize { x, inv_std }))
    }

    /// Layer normalization over the last axis with one shared gain/bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.block_layer_norm(x, &[gain], &[bias], eps)
    }

    /// Layer normalization with a separate gain/bias per block.
    pub fn block_layer_norm(&self, x: Var, gains: &[Var], biases: &[Var], eps: f64) -> Result<Var> {
        let n = self.normalize(x, eps)?;
        let scaled = self.block_mul(n, gains)?;
        self.block_add(scaled, biases)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&x| self.value(x)).collect();
        let first = vals
            .first()
            .ok_or_else(|| HhftError::Contract("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(HhftError::shape("concat", first.shape(), &[axis]));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in &vals {
            let mut s = v.shape().to_vec();
            if s.len() != shape.len() {
                return Err(HhftError::shape("concat", first.shape(), v.shape()));
            }
            shape[axis] += s[axis];
            s[axis] = first.shape()[axis];
            if s != first.shape() {
                return Err(HhftError::shape("concat", first.shape(), v.shape()));
            }
        }
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start + len > xv.shape()[axis] {
            return Err(HhftError::shape("slice", xv.shape(), &[axis, start, len]));
        }
        let (outer, dim, inner) = axis_split(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_over_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || xv.shape()[axis] == 0 {
            return Err(HhftError::shape("mean_over_axis", xv.shape(), &[axis]));
        }
        let (outer, dim, inner) = axis_split(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &xv.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        data.iter_mut().for_each(|v| *v /= dim as f64);
        self.count(data.len());
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }))
    }

    pub fn sum(&self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(HhftError::Contract("mean of empty tensor".into()));
        }
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(x)))
    }

    /// Gathers rows of `table: [V, e]`; `block` names the owner in errors.
    pub fn embedding_lookup(&self, table: Var, ids: &[usize], block: &str) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(HhftError::shape("embedding_lookup", tv.shape(), &[2]));
        }
        let (vocab, e) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= vocab {
                return Err(HhftError::Index {
                    block: block.to_string(),
                    id,
                    size: vocab,
                });
            }
            data.extend_from_slice(&tv.data()[id * e..(id + 1) * e]);
        }
        let out = Tensor::new(vec![ids.len(), e], data)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Mean of consecutive row ranges `(start, len)` of `x: [N, e]`; an empty
    /// range yields a zero row.
    pub fn segment_mean(&self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(HhftError::shape("segment_mean", xv.shape(), &[2]));
        }
        let (n, e) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Tensor::zeros(&[segments.len(), e]);
        for (s, &(start, len)) in segments.iter().enumerate() {
            if start + len > n {
                return Err(HhftError::shape("segment_mean", xv.shape(), &[start, len]));
            }
            if len == 0 {
                continue;
            }
            let dst = &mut out.data_mut()[s * e..(s + 1) * e];
            for r in start..start + len {
                dst.iter_mut()
                    .zip(&xv.data()[r * e..(r + 1) * e])
                    .for_each(|(a, b)| *a += b);
            }
            dst.iter_mut().for_each(|v| *v /= len as f64);
            self.count(e);
        }
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention over the token axis.
    ///
    /// `q`, `k`, `v` are `[B, T, heads·dh]`; each head attends with scale
    /// `1/√dh` and head outputs are concatenated back along the last axis.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if vv.shape() != qv.shape() {
            return Err(HhftError::shape("attention", qv.shape(), vv.shape()));
        }
        let (b, t, width) = match qv.shape() {
            [b, t, w] => (*b, *t, *w),
            s => return Err(HhftError::shape("attention", s, &[3])),
        };
        if heads == 0 || width % heads != 0 {
            return Err(HhftError::Contract(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        let dh = width / heads;
        let probs = attention_probs(&qv, &kv, heads, 1.0 / (dh as f64).sqrt())?;
        let mut out = Tensor::zeros(qv.shape());
        for bi in 0..b {
            for h in 0..heads {
                let base = (bi * heads + h) * t * t;
                let off = bi * t * width + h * dh;
                gemm_into(
                    t,
                    t,
                    dh,
                    MatRef::strided(probs.data(), base, t, 1),
                    MatRef::strided(vv.data(), off, width, 1),
                    out.data_mut(),
                    off,
                    width,
                    false,
                );
            }
        }
        // QKᵀ and PV contractions, the logit scaling and the softmax divide.
        self.count(b * heads * (2 * t * t * dh + 2 * t * t));
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Mean binary cross-entropy on logits, `softplus(z) − y·z`.
    pub fn bce_with_logits(&self, logits: Var, labels: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 || lv.len() != labels.len() || labels.is_empty() {
            return Err(HhftError::shape("bce_with_logits", lv.shape(), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(HhftError::Data(format!("label {bad} is not binary")));
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        let loss = total / labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every differentiable leaf gets an entry; leaves the loss does not
    /// depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| HhftError::Contract(format!("unknown var {}", loss.0)))?;
        if root.value.len() != 1 {
            return Err(HhftError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(HhftError::Contract(
                "loss does not depend on any differentiable tensor".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }

        for (i, node) in nodes.iter().enumerate() {
            let is_leaf = matches!(node.op, Op::Leaf);
            if is_leaf && node.requires_grad {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let wants = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };

    match &node.op {
        Op::Leaf => {}
        Op::Reshape(x) => {
            if wants(*x) {
                let gx = g.clone().reshape(val(*x).shape()).expect("reshape grad");
                accumulate(grads, *x, gx);
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if wants(*a) {
                let mut ga = Tensor::zeros(av.shape());
                gemm(
                    m,
                    n,
                    k,
                    MatRef::row_major(g.data(), n),
                    MatRef::row_major(bv.data(), n).t(),
                    ga.data_mut(),
                    k,
                    false,
                );
                accumulate(grads, *a, ga);
            }
            if wants(*b) {
                let mut gb = Tensor::zeros(bv.shape());
                gemm(
                    k,
                    m,
                    n,
                    MatRef::row_major(av.data(), k).t(),
                    MatRef::row_major(g.data(), n),
                    gb.data_mut(),
                    n,
                    false,
                );
                accumulate(grads, *b, gb);
            }
        }
        Op::BlockMatMul { x, ws } => {
            let xv = val(*x);
            let count = ws.len();
            let din = xv.last_dim();
            let dout = g.last_dim();
            let rows = if din == 0 { 0 } else { xv.len() / din };
            let per_block = rows / count;
            if wants(*x) {
                let mut gx = Tensor::zeros(xv.shape());
                for (k, w) in ws.iter().enumerate() {
                    gemm_into(
                        per_block,
                        dout,
                        din,
                        MatRef::strided(g.data(), k * dout, count * dout, 1),
                        MatRef::row_major(val(*w).data(), dout).t(),
                        gx.data_mut(),
                        k * din,
                        count * din,
                        false,
                    );
                }
                accumulate(grads, *x, gx);
            }
            for (k, w) in ws.iter().enumerate() {
                if !wants(*w) {
                    continue;
                }
                let mut gw = Tensor::zeros(&[din, dout]);
                gemm(
                    din,
                    per_block,
                    dout,
                    MatRef::strided(xv.data(), k * din, count * din, 1).t(),
                    MatRef::strided(g.data(), k * dout, count * dout, 1),
                    gw.data_mut(),
                    dout,
                    false,
                );
                accumulate(grads, *w, gw);
            }
        }
        Op::BlockAdd { x, bs } => {
            if wants(*x) {
                accumulate(grads, *x, g.clone());
            }
            let width = g.last_dim();
            let count = bs.len();
            let mut sums = vec![vec![0.0; width]; count];
            if width > 0 {
                for (r, row) in g.data().chunks(width).enumerate() {
                    let idx = if count == 1 { 0 } else { r % count };
                    sums[idx].iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
            }
            for (b, s) in bs.iter().zip(sums) {
                if wants(*b) {
                    accumulate(grads, *b, Tensor::vector(s));
                }
            }
        }
        Op::BlockMul { x, gs } => {
            let xv = val(*x);
            let width = g.last_dim();
            let count = gs.len();
            let idx = |r: usize| if count == 1 { 0 } else { r % count };
            if wants(*x) {
                let mut gx = g.clone();
                if width > 0 {
                    for (r, row) in gx.data_mut().chunks_mut(width).enumerate() {
                        let gain = val(gs[idx(r)]).data();
                        row.iter_mut().zip(gain).for_each(|(a, b)| *a *= b);
                    }
                }
                accumulate(grads, *x, gx);
            }
            let mut sums = vec![vec![0.0; width]; count];
            if width > 0 {
                for (r, (grow, xrow)) in g.data().chunks(width).zip(xv.data().chunks(width)).enumerate() {
                    sums[idx(r)]
                        .iter_mut()
                        .zip(grow.iter().zip(xrow))
                        .for_each(|(s, (a, b))| *s += a * b);
                }
            }
            for (gv, s) in gs.iter().zip(sums) {
                if wants(*gv) {
                    accumulate(grads, *gv, Tensor::vector(s));
                }
            }
        }
        Op::Add(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, g.clone());
            }
            if wants(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, g.clone());
            }
            if wants(*b) {
                accumulate(grads, *b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if wants(*a) {
                let data = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            if wants(*b) {
                let data = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, *b, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
        }
        Op::Scale(x, c) => {
            if wants(*x) {
                accumulate(grads, *x, g.map(|v| v * c));
            }
        }
        Op::Relu(x) => {
            if wants(*x) {
                let data = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
        }
        Op::Sigmoid(x) => {
            if wants(*x) {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
        }
        Op::Softmax(x) => {
            if wants(*x) {
                let width = g.last_dim();
                let mut gx = g.clone();
                if width > 0 {
                    for (grow, yrow) in gx.data_mut().chunks_mut(width).zip(node.value.data().chunks(width)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        grow.iter_mut().zip(yrow).for_each(|(gv, y)| *gv = y * (*gv - dot));
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::Normalize { x, inv_std } => {
            if wants(*x) {
                let width = g.last_dim();
                let mut gx = g.clone();
                for ((grow, yrow), inv) in gx
                    .data_mut()
                    .chunks_mut(width)
                    .zip(node.value.data().chunks(width))
                    .zip(inv_std)
                {
                    let n = width as f64;
                    let mean_g = grow.iter().sum::<f64>() / n;
                    let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    grow.iter_mut()
                        .zip(yrow)
                        .for_each(|(gv, y)| *gv = inv * (*gv - mean_g - y * mean_gy));
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, _, inner) = axis_split(g.shape(), *axis);
            let mut offset = 0;
            let total = g.shape()[*axis];
            for x in xs {
                let xv = val(*x);
                let len = xv.shape()[*axis];
                if wants(*x) {
                    let mut data = Vec::with_capacity(xv.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data).unwrap());
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            if wants(*x) {
                let xv = val(*x);
                let (outer, dim, inner) = axis_split(xv.shape(), *axis);
                let len = g.shape()[*axis];
                let mut gx = Tensor::zeros(xv.shape());
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::MeanAxis { x, axis } => {
            if wants(*x) {
                let xv = val(*x);
                let (outer, dim, inner) = axis_split(xv.shape(), *axis);
                let mut gx = Tensor::zeros(xv.shape());
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for d in 0..dim {
                        gx.data_mut()[(o * dim + d) * inner..(o * dim + d + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a = b / dim as f64);
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::Sum(x) => {
            if wants(*x) {
                accumulate(grads, *x, Tensor::full(val(*x).shape(), g.data()[0]));
            }
        }
        Op::Mean(x) => {
            if wants(*x) {
                let xv = val(*x);
                accumulate(grads, *x, Tensor::full(xv.shape(), g.data()[0] / xv.len() as f64));
            }
        }
        Op::Embedding { table, ids } => {
            if wants(*table) {
                let tv = val(*table);
                let e = tv.shape()[1];
                let mut gt = Tensor::zeros(tv.shape());
                for (row, &id) in ids.iter().enumerate() {
                    gt.data_mut()[id * e..(id + 1) * e]
                        .iter_mut()
                        .zip(&g.data()[row * e..(row + 1) * e])
                        .for_each(|(a, b)| *a += b);
                }
                accumulate(grads, *table, gt);
            }
        }
        Op::SegmentMean { x, segments } => {
            if wants(*x) {
                let xv = val(*x);
                let e = xv.shape()[1];
                let mut gx = Tensor::zeros(xv.shape());
                for (s, &(start, len)) in segments.iter().enumerate() {
                    if len == 0 {
                        continue;
                    }
                    let src = &g.data()[s * e..(s + 1) * e];
                    for r in start..start + len {
                        gx.data_mut()[r * e..(r + 1) * e]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b / len as f64);
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            attention_backward(nodes, *q, *k, *v, *heads, probs, g, grads);
        }
        Op::BceWithLogits { logits, labels } => {
            if wants(*logits) {
                let lv = val(*logits);
                let scale = g.data()[0] / labels.len() as f64;
                let data = lv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), data).unwrap());
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &Tensor,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) {
    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let (b, t, width) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Tensor::zeros(qv.shape());
    let mut gk = Tensor::zeros(kv.shape());
    let mut gv = Tensor::zeros(vv.shape());
    let mut dp = vec![0.0; t * t];
    for bi in 0..b {
        for h in 0..heads {
            let base = (bi * heads + h) * t * t;
            let off = bi * t * width + h * dh;
            let p = MatRef::strided(probs.data(), base, t, 1);
            let go = MatRef::strided(g.data(), off, width, 1);
            // dV = Pᵀ dO
            gemm_into(t, t, dh, p.t(), go, gv.data_mut(), off, width, false);
            // dP = dO Vᵀ
            gemm(t, dh, t, go, MatRef::strided(vv.data(), off, width, 1).t(), &mut dp, t, false);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the logit scale.
            let pr = &probs.data()[base..base + t * t];
            for i in 0..t {
                let row = &mut dp[i * t..(i + 1) * t];
                let prow = &pr[i * t..(i + 1) * t];
                let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                row.iter_mut()
                    .zip(prow)
                    .for_each(|(d, p)| *d = p * (*d - dot) * scale);
            }
            let ds = MatRef::row_major(&dp, t);
            gemm_into(t, t, dh, ds, MatRef::strided(kv.data(), off, width, 1), gq.data_mut(), off, width, false);
            gemm_into(t, t, dh, ds.t(), MatRef::strided(qv.data(), off, width, 1), gk.data_mut(), off, width, false);
        }
    }
    if nodes[q.0].requires_grad {
        accumulate(grads, q, gq);
    }
    if nodes[k.0].requires_grad {
        accumulate(grads, k, gk);
    }
    if nodes[v.0].requires_grad {
        accumulate(grads, v, gv);
    }
}
