use std::sync::atomic::{AtomicU64, Ordering};

use super::{AutodiffError, Tensor};

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Offset added to masked logits before normalization.
pub const MASK_OFFSET: f64 = -1e30;

/// Handle to a node of a [`Graph`].
///
/// Handles carry the generation of the graph that created them, so a handle
/// used after [`Graph::clear`] or on a different graph is rejected instead of
/// silently aliasing another node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    generation: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    MatMul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    ClampMin(usize, f64),
    Scale(usize, f64),
    Sum(usize),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    GatherRows(usize, Vec<usize>),
    Transpose(usize),
    Reshape(usize),
    MaskedSoftmax(usize),
    Detach,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::ClampMin(..) => "clamp_min",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows(..) => "gather_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::Detach => "detach",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph for reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is a topological order, so
/// [`Graph::backward`] is a single reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    check_finite: bool,
    generation: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
            generation: next_generation(),
        }
    }

    /// A graph that rejects any operation producing a non-finite value.
    pub fn with_check_finite() -> Self {
        Self {
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Frees every node. Handles created before the call become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.generation = next_generation();
    }

    fn idx(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(AutodiffError::StaleNode);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, AutodiffError> {
        if self.check_finite && !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor, AutodiffError> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool, AutodiffError> {
        Ok(self.nodes[self.idx(v)?].requires_grad)
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> Result<&'static str, AutodiffError> {
        Ok(self.nodes[self.idx(v)?].op.name())
    }

    /// Gradient slot of `v` after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Result<&Tensor, AutodiffError> {
        let i = self.idx(v)?;
        self.grads
            .get(i)
            .and_then(Option::as_ref)
            .ok_or(AutodiffError::NoGradient)
    }

    fn grad_flag(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    fn unary(&mut self, x: Var, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let value = self.nodes[i].value.map(f);
        let rg = self.nodes[i].requires_grad;
        self.push(value, op(i), rg)
    }

    fn broadcast_kind(&self, op: &'static str, a: usize, b: usize) -> Result<Broadcast, AutodiffError> {
        let sa = self.nodes[a].value.shape();
        let sb = self.nodes[b].value.shape();
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let nb = self.nodes[b].value.numel();
        if nb == 1 {
            return Ok(Broadcast::Scalar);
        }
        if sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sb[1] == sa[1] {
            return Ok(Broadcast::Row);
        }
        Err(AutodiffError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", sa, sb),
        })
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: fn(usize, usize, Broadcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let bc = self.broadcast_kind(name, ia, ib)?;
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let cols = va.cols();
        let data: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let y = match bc {
                    Broadcast::Same => vb.data()[k],
                    Broadcast::Row => vb.data()[k % cols],
                    Broadcast::Scalar => vb.data()[0],
                };
                f(x, y)
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.grad_flag(&[ia, ib]);
        self.push(value, make(ia, ib, bc), rg)
    }

    /// Elementwise sum. The right operand may be a `[1, cols]` row or a
    /// scalar, broadcast over the left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", va.shape(), vb.shape()),
            });
        }
        let value = matmul_raw(va, vb);
        let rg = self.grad_flag(&[ia, ib]);
        self.push(value, Op::MatMul(ia, ib), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Log, f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Abs, f64::abs)
    }

    /// `max(x, lo)` elementwise; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let value = self.nodes[i].value.map(|v| v.max(lo));
        let rg = self.nodes[i].requires_grad;
        self.push(value, Op::ClampMin(i, lo), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let value = self.nodes[i].value.map(|v| v * c);
        let rg = self.nodes[i].requires_grad;
        self.push(value, Op::Scale(i, c), rg)
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let total = self.nodes[i].value.data().iter().sum();
        let rg = self.nodes[i].requires_grad;
        self.push(Tensor::scalar(total), Op::Sum(i), rg)
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let idxs = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        if idxs.is_empty() || axis > 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                detail: format!("{} parts on axis {}", idxs.len(), axis),
            });
        }
        let shapes: Vec<&[usize]> = idxs.iter().map(|&i| self.nodes[i].value.shape()).collect();
        if shapes.iter().any(|s| s.len() != 2) {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                detail: "rank-2 inputs required".into(),
            });
        }
        let other = 1 - axis;
        if shapes.iter().any(|s| s[other] != shapes[0][other]) {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                detail: format!("{:?}", shapes),
            });
        }
        let value = if axis == 0 {
            let rows = shapes.iter().map(|s| s[0]).sum();
            let mut data = Vec::with_capacity(rows * shapes[0][1]);
            for &i in &idxs {
                data.extend_from_slice(self.nodes[i].value.data());
            }
            Tensor::new(vec![rows, shapes[0][1]], data)?
        } else {
            let rows = shapes[0][0];
            let cols: usize = shapes.iter().map(|s| s[1]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &i in &idxs {
                    data.extend_from_slice(self.nodes[i].value.row_slice(r));
                }
            }
            Tensor::new(vec![rows, cols], data)?
        };
        let rg = self.grad_flag(&idxs);
        self.push(value, Op::Concat(idxs, axis), rg)
    }

    /// Half-open range `start..end` of a rank-2 tensor along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        let shape = v.shape();
        if shape.len() != 2 || axis > 1 || start >= end || end > shape[axis] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                detail: format!("{:?} axis {} range {}..{}", shape, axis, start, end),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let value = if axis == 0 {
            Tensor::new(vec![end - start, cols], v.data()[start * cols..end * cols].to_vec())?
        } else {
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&v.row_slice(r)[start..end]);
            }
            Tensor::new(vec![rows, end - start], data)?
        };
        let rg = self.nodes[i].requires_grad;
        self.push(
            value,
            Op::Slice {
                input: i,
                axis,
                start,
            },
            rg,
        )
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if v.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("{:?}", v.shape()),
            });
        }
        let rows = v.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&r| r >= rows) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, len: rows });
        }
        let cols = v.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            data.extend_from_slice(v.row_slice(r));
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        let rg = self.nodes[i].requires_grad;
        self.push(value, Op::GatherRows(i, indices.to_vec()), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if v.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}", v.shape()),
            });
        }
        let value = transpose_raw(v);
        let rg = self.nodes[i].requires_grad;
        self.push(value, Op::Transpose(i), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let value = self.nodes[i].value.reshape(shape.to_vec())?;
        let rg = self.nodes[i].requires_grad;
        self.push(value, Op::Reshape(i), rg)
    }

    /// Row-wise softmax over a rank-2 tensor. Positions whose `mask` entry is
    /// `false` receive [`MASK_OFFSET`] before normalization and come out as
    /// exactly zero. `mask` has one entry per element, row-major.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if mask.len() != v.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("mask of {} for {} values", mask.len(), v.numel()),
            });
        }
        let cols = v.cols();
        let mut data = Vec::with_capacity(v.numel());
        for r in 0..v.rows() {
            let row_mask = &mask[r * cols..(r + 1) * cols];
            if !row_mask.iter().any(|&m| m) {
                return Err(AutodiffError::EmptyMask { row: r });
            }
            let shifted: Vec<f64> = v
                .row_slice(r)
                .iter()
                .zip(row_mask)
                .map(|(&s, &m)| if m { s } else { s + MASK_OFFSET })
                .collect();
            let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = shifted.iter().map(|&s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / z));
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.nodes[i].requires_grad;
        self.push(value, Op::MaskedSoftmax(i), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.value(x)?.numel();
        self.masked_softmax(x, &vec![true; n])
    }

    /// Same value as `x`, but gradient never flows back through this node.
    pub fn detach(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let value = self.nodes[i].value.clone();
        self.push(value, Op::Detach, false)
    }

    /// Reverse sweep from a scalar output.
    ///
    /// Every requires-grad node created before `output` gets a zeroed slot
    /// first; contributions are then summed in, so a node used twice receives
    /// both. Slots from a previous call are discarded.
    pub fn backward(&mut self, output: Var) -> Result<(), AutodiffError> {
        let out = self.idx(output)?;
        if !self.nodes[out].value.is_scalar() {
            return Err(AutodiffError::NonScalarOutput {
                shape: self.nodes[out].value.shape().to_vec(),
            });
        }
        self.grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(k, n)| (k <= out && n.requires_grad).then(|| Tensor::zeros(n.value.shape())))
            .collect();
        if let Some(g) = self.grads[out].as_mut() {
            g.data_mut()[0] = 1.0;
        } else {
            return Ok(());
        }
        for k in (0..=out).rev() {
            if !self.nodes[k].requires_grad {
                continue;
            }
            let Some(g) = self.grads[k].take() else { continue };
            self.propagate(k, &g)?;
            self.grads[k] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, contribution: Tensor) {
        if let Some(slot) = self.grads[target].as_mut() {
            slot.add_assign(&contribution);
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&mut self, k: usize, g: &Tensor) -> Result<(), AutodiffError> {
        let op = self.nodes[k].op.clone();
        match op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(self.nodes[k].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(a) {
                    self.accumulate(a, g.clone());
                }
                if self.wants(b) {
                    let red = reduce_broadcast(g, self.nodes[b].value.shape(), bc).map(|x| sign * x);
                    self.accumulate(b, red);
                }
            }
            Op::Mul(a, b, bc) => {
                if self.wants(a) {
                    let vb = &self.nodes[b].value;
                    let cols = g.cols();
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| {
                            gv * match bc {
                                Broadcast::Same => vb.data()[j],
                                Broadcast::Row => vb.data()[j % cols],
                                Broadcast::Scalar => vb.data()[0],
                            }
                        })
                        .collect();
                    let t = Tensor::new(g.shape().to_vec(), data)?;
                    self.accumulate(a, t);
                }
                if self.wants(b) {
                    let va = &self.nodes[a].value;
                    let prod: Vec<f64> = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    let prod = Tensor::new(g.shape().to_vec(), prod)?;
                    let red = reduce_broadcast(&prod, self.nodes[b].value.shape(), bc);
                    self.accumulate(b, red);
                }
            }
            Op::MatMul(a, b) => {
                if self.wants(a) {
                    let bt = transpose_raw(&self.nodes[b].value);
                    let t = matmul_raw(g, &bt);
                    self.accumulate(a, t);
                }
                if self.wants(b) {
                    let at = transpose_raw(&self.nodes[a].value);
                    let t = matmul_raw(&at, g);
                    self.accumulate(b, t);
                }
            }
            Op::Tanh(a) => {
                let t = zip_map(g, &self.nodes[k].value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(a, t);
            }
            Op::Sigmoid(a) => {
                let t = zip_map(g, &self.nodes[k].value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(a, t);
            }
            Op::Relu(a) => {
                let t = zip_map(g, &self.nodes[a].value, |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(a, t);
            }
            Op::Exp(a) => {
                let t = zip_map(g, &self.nodes[k].value, |gv, y| gv * y);
                self.accumulate(a, t);
            }
            Op::Log(a) => {
                let t = zip_map(g, &self.nodes[a].value, |gv, x| gv / x);
                self.accumulate(a, t);
            }
            Op::Abs(a) => {
                let t = zip_map(g, &self.nodes[a].value, |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(a, t);
            }
            Op::ClampMin(a, lo) => {
                let t = zip_map(g, &self.nodes[a].value, |gv, x| if x > lo { gv } else { 0.0 });
                self.accumulate(a, t);
            }
            Op::Scale(a, c) => {
                self.accumulate(a, g.map(|x| x * c));
            }
            Op::Sum(a) => {
                let t = Tensor::full(self.nodes[a].value.shape(), g.item());
                self.accumulate(a, t);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.nodes[p].value.shape().to_vec();
                    let extent = shape[axis];
                    if self.wants(p) {
                        let piece = slice_raw(g, axis, offset, offset + extent)?;
                        self.accumulate(p, piece);
                    }
                    offset += extent;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.nodes[input].value.shape().to_vec();
                let mut t = Tensor::zeros(&shape);
                let cols = shape[1];
                if axis == 0 {
                    t.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                } else {
                    let width = g.cols();
                    for r in 0..shape[0] {
                        t.data_mut()[r * cols + start..r * cols + start + width].copy_from_slice(g.row_slice(r));
                    }
                }
                self.accumulate(input, t);
            }
            Op::GatherRows(a, indices) => {
                let shape = self.nodes[a].value.shape().to_vec();
                let cols = shape[1];
                let mut t = Tensor::zeros(&shape);
                for (j, &r) in indices.iter().enumerate() {
                    let dst = &mut t.data_mut()[r * cols..(r + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(g.row_slice(j)) {
                        *d += s;
                    }
                }
                self.accumulate(a, t);
            }
            Op::Transpose(a) => {
                self.accumulate(a, transpose_raw(g));
            }
            Op::Reshape(a) => {
                let t = g.reshape(self.nodes[a].value.shape().to_vec())?;
                self.accumulate(a, t);
            }
            Op::MaskedSoftmax(a) => {
                let y = &self.nodes[k].value;
                let cols = y.cols();
                let mut data = Vec::with_capacity(y.numel());
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                debug_assert_eq!(data.len(), y.rows() * cols);
                let t = Tensor::new(y.shape().to_vec(), data)?;
                self.accumulate(a, t);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map of equal shapes")
}

fn reduce_broadcast(g: &Tensor, target: &[usize], bc: Broadcast) -> Tensor {
    match bc {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => {
            let mut t = Tensor::zeros(target);
            t.data_mut()[0] = g.data().iter().sum();
            t
        }
        Broadcast::Row => {
            let cols = g.cols();
            let mut t = Tensor::zeros(target);
            for r in 0..g.rows() {
                for (d, s) in t.data_mut().iter_mut().zip(g.row_slice(r)) {
                    *d += s;
                }
            }
            debug_assert_eq!(t.numel(), cols);
            t
        }
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![0.0; n * m];
    let ad = a.data();
    let bd = b.data();
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out).expect("matmul shape")
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose shape")
}

fn slice_raw(g: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor, AutodiffError> {
    let cols = g.cols();
    if axis == 0 {
        Tensor::new(vec![end - start, cols], g.data()[start * cols..end * cols].to_vec())
    } else {
        let mut data = Vec::with_capacity(g.rows() * (end - start));
        for r in 0..g.rows() {
            data.extend_from_slice(&g.row_slice(r)[start..end]);
        }
        Tensor::new(vec![g.rows(), end - start], data)
    }
}
