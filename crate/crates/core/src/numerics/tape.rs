//! Wengert tape: records tensor operations during the forward pass and
//! replays them in reverse to accumulate gradients.
//!
//! Nodes are appended in evaluation order, so walking the node list backwards
//! is a reverse topological order and every node is visited exactly once.

use super::params::{ParamId, ParamStore};
use super::tensor::{broadcast_binary, reduce_to_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Log(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    SumAxis(Var),
    SumAll(Var),
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Gather { table: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// A free leaf that receives a gradient readable from [`Gradients`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Snapshot of a parameter; its gradient is accumulated into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Leaf { param: Some(id) }, true)
    }

    /// Looks a parameter up by name.
    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter {name}")))?;
        Ok(self.param(store, id))
    }

    fn unary_grad(&self, x: Var) -> bool {
        self.nodes[x.0].needs_grad
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = broadcast_binary(self.value(a), self.value(b), f)?;
        let ng = self.unary_grad(a) || self.unary_grad(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let ng = self.unary_grad(x);
        self.push(value, Op::Scale(x, c), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let ng = self.unary_grad(x);
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        let ng = self.unary_grad(x);
        self.push(value, Op::Log(x), ng)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::sqrt);
        let ng = self.unary_grad(x);
        self.push(value, Op::Sqrt(x), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.unary_grad(a) || self.unary_grad(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let ng = self.unary_grad(x);
        Ok(self.push(value, Op::Transpose(x), ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        let ng = self.unary_grad(x);
        Ok(self.push(value, Op::Softmax { x, axis }, ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, len, inner) = v.axis_extents(axis)?;
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| v.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (v.data()[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[at(k)] = v.data()[at(k)] - lse;
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let ng = self.unary_grad(x);
        Ok(self.push(value, Op::LogSoftmax { x, axis }, ng))
    }

    /// Sum along `axis`, keeping the axis with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).sum_axis(axis)?;
        let ng = self.unary_grad(x);
        Ok(self.push(value, Op::SumAxis(x), ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Scalar (shape `[1]`) sum of every entry.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.unary_grad(x);
        self.push(value, Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let ng = self.unary_grad(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::usage("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::usage(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::usage(format!(
                    "concat shape mismatch along axis {axis}: {base:?} vs {s:?}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let src = self.value(x).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = xs.iter().any(|&x| self.unary_grad(x));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { xs: xs.to_vec(), axis }, ng))
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, full, inner) = self.value(x).axis_extents(axis)?;
        if start + len > full || len == 0 {
            return Err(Error::usage(format!(
                "narrow [{start}, {}) out of range for axis length {full}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = len;
        let ng = self.unary_grad(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { x, axis, start }, ng))
    }

    /// Row lookup into a `vocab × d` table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::usage("gather needs a matrix table"));
        }
        let (rows, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::usage(format!("gather index {i} out of range {rows}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let ng = self.unary_grad(table);
        let value = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push(value, Op::Gather { table, indices: indices.to_vec() }, ng))
    }

    /// `Σ_t w_t · −log softmax(logits_t)[target_t]` over the rows of a
    /// `T × V` logit matrix, returned as a scalar.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let l = self.value(logits);
        if l.rank() != 2 || l.rows() != targets.len() || targets.len() != weights.len() {
            return Err(Error::usage(format!(
                "cross-entropy shape mismatch: logits {:?}, {} targets, {} weights",
                l.shape(),
                targets.len(),
                weights.len()
            )));
        }
        let v = l.cols();
        let mut total = 0.0;
        for (t, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            if y >= v {
                return Err(Error::usage(format!("target {y} outside vocabulary of {v}")));
            }
            let row = l.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += w * (lse - row[y]);
        }
        let ng = self.unary_grad(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec() };
        Ok(self.push(Tensor::scalar(total), op, ng))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Parameter leaves add their gradient into `store` (so repeated calls
    /// accumulate until [`ParamStore::zero_grad`]); free leaves are readable
    /// from the returned [`Gradients`].
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut visited = 0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(id) = param {
                        let p = store.get_mut(*id);
                        for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                            *acc += v;
                        }
                    }
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, reduce_to_shape(&g, self.shape(*a)));
                    self.accum(&mut grads, *b, reduce_to_shape(&g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, reduce_to_shape(&g, self.shape(*a)));
                    let gb = reduce_to_shape(&g, self.shape(*b)).map(|v| -v);
                    self.accum(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = broadcast_binary(&g, self.value(*b), |x, y| x * y)?;
                        self.accum(&mut grads, *a, reduce_to_shape(&ga, self.shape(*a)));
                    }
                    if self.needs_grad(*b) {
                        let gb = broadcast_binary(&g, self.value(*a), |x, y| x * y)?;
                        self.accum(&mut grads, *b, reduce_to_shape(&gb, self.shape(*b)));
                    }
                }
                Op::Div(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = broadcast_binary(&g, self.value(*b), |x, y| x / y)?;
                        self.accum(&mut grads, *a, reduce_to_shape(&ga, self.shape(*a)));
                    }
                    if self.needs_grad(*b) {
                        // d(a/b)/db = -(a/b)/b = -out/b
                        let t = broadcast_binary(&g, &node.value, |x, y| x * y)?;
                        let gb = broadcast_binary(&t, self.value(*b), |x, y| -x / y)?;
                        self.accum(&mut grads, *b, reduce_to_shape(&gb, self.shape(*b)));
                    }
                }
                Op::Scale(x, c) => self.accum(&mut grads, *x, g.map(|v| v * c)),
                Op::Tanh(x) => {
                    let gx = broadcast_binary(&g, &node.value, |dy, y| dy * (1.0 - y * y))?;
                    self.accum(&mut grads, *x, gx);
                }
                Op::Log(x) => {
                    let gx = broadcast_binary(&g, self.value(*x), |dy, v| dy / v)?;
                    self.accum(&mut grads, *x, gx);
                }
                Op::Sqrt(x) => {
                    let gx = broadcast_binary(&g, &node.value, |dy, y| dy * 0.5 / y)?;
                    self.accum(&mut grads, *x, gx);
                }
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = g.matmul(&self.value(*b).transpose()?)?;
                        self.accum(&mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = self.value(*a).transpose()?.matmul(&g)?;
                        self.accum(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(x) => self.accum(&mut grads, *x, g.transpose()?),
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let (outer, len, inner) = y.axis_extents(*axis)?;
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g.data()[at(k)] * y.data()[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] = y.data()[at(k)] * (g.data()[at(k)] - dot);
                            }
                        }
                    }
                    self.accum(&mut grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
                }
                Op::LogSoftmax { x, axis } => {
                    let y = &node.value;
                    let (outer, len, inner) = y.axis_extents(*axis)?;
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let total: f64 = (0..len).map(|k| g.data()[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] = g.data()[at(k)] - y.data()[at(k)].exp() * total;
                            }
                        }
                    }
                    self.accum(&mut grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
                }
                Op::SumAxis(x) => {
                    let full = Tensor::zeros(self.shape(*x));
                    let gx = broadcast_binary(&full, &g, |_, dy| dy)?;
                    self.accum(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let gx = Tensor::full(self.shape(*x), g.item());
                    self.accum(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.shape(*x))?;
                    self.accum(&mut grads, *x, gx);
                }
                Op::Concat { xs, axis } => {
                    let mut start = 0;
                    for &x in xs {
                        let len = self.shape(x)[*axis];
                        if self.needs_grad(x) {
                            let gx = slice_axis(&g, *axis, start, len, self.shape(x))?;
                            self.accum(&mut grads, x, gx);
                        }
                        start += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let xs = self.shape(*x);
                    let (outer, full, inner) = self.value(*x).axis_extents(*axis)?;
                    let len = g.shape()[*axis];
                    let mut gx = vec![0.0; outer * full * inner];
                    for o in 0..outer {
                        let to = (o * full + start) * inner;
                        let from = o * len * inner;
                        gx[to..to + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
                    }
                    self.accum(&mut grads, *x, Tensor::new(xs.to_vec(), gx)?);
                }
                Op::Gather { table, indices } => {
                    let shape = self.shape(*table).to_vec();
                    let d = shape[1];
                    let mut gt = Tensor::zeros(&shape);
                    for (r, &i) in indices.iter().enumerate() {
                        let dst = &mut gt.data_mut()[i * d..(i + 1) * d];
                        for (acc, v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *acc += v;
                        }
                    }
                    self.accum(&mut grads, *table, gt);
                }
                Op::CrossEntropy { logits, targets, weights } => {
                    let l = self.value(*logits);
                    let probs = l.softmax(1)?;
                    let v = l.cols();
                    let scale = g.item();
                    let mut gl = probs.into_data();
                    for (t, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        let row = &mut gl[t * v..(t + 1) * v];
                        row[y] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= w * scale);
                    }
                    self.accum(&mut grads, *logits, Tensor::new(l.shape().to_vec(), gl)?);
                }
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

fn slice_axis(g: &Tensor, axis: usize, start: usize, len: usize, shape: &[usize]) -> Result<Tensor> {
    let (outer, full, inner) = g.axis_extents(axis)?;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let from = (o * full + start) * inner;
        data.extend_from_slice(&g.data()[from..from + len * inner]);
    }
    Tensor::new(shape.to_vec(), data)
}
