//! Define-by-run reverse-mode differentiation.
//!
//! Every value produced during a forward pass lives on a [`Tape`] and is
//! addressed by a [`Var`]. Nodes only ever reference smaller ids, so the
//! node list is already in topological order and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! Broadcasting is limited to a rank-0 scalar combined with a tensor of any
//! shape. Row-wise bias terms are built with `matmul(ones[B×1], b[1×H])`.

mod gradcheck;

pub use gradcheck::{finite_diff_check, finite_diff_check_on, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{axis_strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    fn forward(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Unary(Var, Activation),
    Softmax { input: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Reduce { input: Var, kind: Reduction, argmax: usize },
    GatherRows { table: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    corrupt_max_gradient: bool,
}

/// Gradients of one scalar loss with respect to tape nodes.
#[derive(Debug, Clone)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled to `shape` when absent.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bits_eq(&self, other: &GradientMap) -> bool {
        self.grads.len() == other.grads.len()
            && self.grads.iter().zip(&other.grads).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => a.bits_eq(b),
                (None, None) => true,
                _ => false,
            })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: doubles the max-reduction gradient so harnesses can
    /// confirm that they detect a broken backward rule.
    #[doc(hidden)]
    pub fn with_corrupted_max_gradient() -> Self {
        Self {
            nodes: Vec::new(),
            corrupt_max_gradient: true,
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Ids of the nodes `v` was computed from.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Unary(a, _) | Op::Reshape(a) => vec![*a],
            Op::Softmax { input, .. } | Op::Narrow { input, .. } | Op::Reduce { input, .. } => {
                vec![*input]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(id)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if va.is_scalar() {
            let x = va.item();
            vb.map(|y| f(x, y))
        } else if vb.is_scalar() {
            let y = vb.item();
            va.map(|x| f(x, y))
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.requires_grad(a);
        self.push(Op::Scale(a, factor), value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        let (&[m, k], &[k2, n]) = (va.shape(), vb.shape()) else {
            return Err(mismatch());
        };
        if k != k2 {
            return Err(mismatch());
        }
        let value = Tensor::new(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn elementwise(&mut self, kind: Activation, a: Var) -> Var {
        let value = self.value(a).map(|x| kind.forward(x));
        let rg = self.requires_grad(a);
        self.push(Op::Unary(a, kind), value, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.elementwise(Activation::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.elementwise(Activation::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.elementwise(Activation::Relu, a)
    }

    /// Softmax along `axis`, computed after subtracting the lane maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let (outer, len, inner) = axis_strides(va.shape(), axis)?;
        let x = va.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (x[at(i)] - max).exp();
                    y[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    y[at(i)] /= total;
                }
            }
        }
        let value = Tensor::new(va.shape().to_vec(), y)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Softmax { input: a, axis }, value, rg))
    }

    /// Stacks tensors along `axis`; every other extent must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Empty("concat"));
        };
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = axis_strides(&base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            rg,
        ))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let (outer, extent, inner) = axis_strides(va.shape(), axis)?;
        if len == 0 || start + len > extent {
            return Err(Error::ShapeMismatch {
                op: "narrow",
                lhs: va.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            data.extend_from_slice(&va.data()[from..from + len * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Narrow { input: a, axis, start }, value, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Full reduction to a scalar. Max ties resolve to the lowest flat index.
    pub fn reduce(&mut self, kind: Reduction, a: Var) -> Var {
        let x = self.value(a).data();
        let (value, argmax) = match kind {
            Reduction::Sum => (x.iter().sum(), 0),
            Reduction::Mean => (x.iter().sum::<f64>() / x.len() as f64, 0),
            Reduction::Max => {
                let mut best = 0;
                for (i, &v) in x.iter().enumerate() {
                    if v > x[best] {
                        best = i;
                    }
                }
                (x[best], best)
            }
        };
        let rg = self.requires_grad(a);
        self.push(
            Op::Reduce {
                input: a,
                kind,
                argmax,
            },
            Tensor::scalar(value),
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Mean, a)
    }

    pub fn max(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Max, a)
    }

    /// Rows `rows[i]` of a rank-2 `table`, stacked into `[rows.len() × cols]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let &[n, cols] = vt.shape() else {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: vt.shape().to_vec(),
                rhs: vec![],
            });
        };
        if rows.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::TokenOutOfVocab { token: r, vocab: n });
            }
            data.extend_from_slice(&vt.data()[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(vec![rows.len(), cols], data)?;
        let rg = self.requires_grad(table);
        Ok(self.push(
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits[B×C]` against one label per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let &[batch, classes] = vl.shape() else {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        };
        if labels.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let x = vl.data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let row = &x[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            for (c, &v) in row.iter().enumerate() {
                probs[b * classes + c] = (v - max).exp() / sum_exp;
            }
            total += max + sum_exp.ln() - row[label];
        }
        let value = Tensor::scalar(total / batch as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let shape = self.shape(loss);
        if !shape.is_empty() {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[id].value.shape().to_vec(), data)
                        .expect("gradient shape matches forward value")
                })
            })
            .collect();
        Ok(GradientMap { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    let scalar = self.value(v).is_scalar() && node.value.numel() > 1;
                    if let Some(slot) = self.slot(grads, v) {
                        if scalar {
                            slot[0] += s * g.iter().sum::<f64>();
                        } else {
                            slot.iter_mut().zip(g).for_each(|(acc, &gi)| *acc += s * gi);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let scalar = self.value(v).is_scalar() && node.value.numel() > 1;
                    let ov = self.value(other).data();
                    let at = |i: usize| if ov.len() == 1 { ov[0] } else { ov[i] };
                    if let Some(slot) = self.slot(grads, v) {
                        if scalar {
                            slot[0] += g.iter().enumerate().map(|(i, gi)| gi * at(i)).sum::<f64>();
                        } else {
                            for (i, acc) in slot.iter_mut().enumerate() {
                                *acc += g[i] * at(i);
                            }
                        }
                    }
                }
            }
            Op::Scale(a, factor) => {
                if let Some(slot) = self.slot(grads, *a) {
                    slot.iter_mut().zip(g).for_each(|(acc, &gi)| *acc += factor * gi);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if let Some(slot) = self.slot(grads, *a) {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb.data()[p * n..(p + 1) * n];
                            slot[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                if let Some(slot) = self.slot(grads, *b) {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = va.data()[i * k + p];
                            let srow = &mut slot[p * n..(p + 1) * n];
                            srow.iter_mut().zip(grow).for_each(|(acc, &gi)| *acc += aip * gi);
                        }
                    }
                }
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                if let Some(slot) = self.slot(grads, *a) {
                    for i in 0..slot.len() {
                        slot[i] += g[i] * kind.derivative(x[i], y[i]);
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) =
                    axis_strides(node.value.shape(), *axis).expect("axis validated in forward");
                if let Some(slot) = self.slot(grads, *input) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let weighted: f64 = (0..len).map(|i| y[at(i)] * g[at(i)]).sum();
                            for i in 0..len {
                                slot[at(i)] += y[at(i)] * (g[at(i)] - weighted);
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_strides(shape, *axis).expect("validated");
                let mut offset = 0;
                for &v in inputs {
                    let extent = self.shape(v)[*axis];
                    if let Some(slot) = self.slot(grads, v) {
                        let chunk = extent * inner;
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            slot[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&g[from..from + chunk])
                                .for_each(|(acc, &gi)| *acc += gi);
                        }
                    }
                    offset += extent;
                }
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input).to_vec();
                let (outer, extent, inner) = axis_strides(&in_shape, *axis).expect("validated");
                let chunk = node.value.shape()[*axis] * inner;
                if let Some(slot) = self.slot(grads, *input) {
                    for o in 0..outer {
                        let to = (o * extent + start) * inner;
                        slot[to..to + chunk]
                            .iter_mut()
                            .zip(&g[o * chunk..(o + 1) * chunk])
                            .for_each(|(acc, &gi)| *acc += gi);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(slot) = self.slot(grads, *a) {
                    slot.iter_mut().zip(g).for_each(|(acc, &gi)| *acc += gi);
                }
            }
            Op::Reduce {
                input,
                kind,
                argmax,
            } => {
                let corrupt = self.corrupt_max_gradient;
                if let Some(slot) = self.slot(grads, *input) {
                    let n = slot.len() as f64;
                    match kind {
                        Reduction::Sum => slot.iter_mut().for_each(|acc| *acc += g[0]),
                        Reduction::Mean => slot.iter_mut().for_each(|acc| *acc += g[0] / n),
                        Reduction::Max => {
                            slot[*argmax] += if corrupt { 2.0 * g[0] } else { g[0] };
                        }
                    }
                }
            }
            Op::GatherRows { table, rows } => {
                let cols = self.shape(*table)[1];
                if let Some(slot) = self.slot(grads, *table) {
                    for (i, &r) in rows.iter().enumerate() {
                        slot[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&g[i * cols..(i + 1) * cols])
                            .for_each(|(acc, &gi)| *acc += gi);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                if let Some(slot) = self.slot(grads, *logits) {
                    for (b, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let target = if c == label { 1.0 } else { 0.0 };
                            slot[b * classes + c] += scale * (probs[b * classes + c] - target);
                        }
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(acc, &bv)| *acc += aip * bv);
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(values: &[f64]) -> Tensor {
        Tensor::vector(values.to_vec())
    }

    #[test]
    fn add_elementwise_and_scalar_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec1(&[1.0, 2.0]));
        let b = tape.constant(vec1(&[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        let zero = tape.constant(Tensor::scalar(0.0));
        let same = tape.add(a, zero).unwrap();
        assert!(tape.value(same).bits_eq(tape.value(a)));
    }

    #[test]
    fn add_rejects_non_scalar_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec1(&[1.0, 2.0]));
        let b = tape.leaf(vec1(&[1.0, 2.0, 3.0]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn grad_of_sum_of_add_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap());
        let b = tape.leaf(Tensor::full(&[2, 2], 7.0));
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec1(&[1.0, 2.0, 3.0]));
        let s = tape.leaf(Tensor::scalar(2.0));
        let p = tape.mul(a, s).unwrap();
        let total = tape.sum(p);
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(s).unwrap().item(), 6.0);
        assert_eq!(grads.get(a).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
        let b = tape.leaf(Tensor::matrix(&[&[3.0], &[4.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 1]);
        assert_eq!(tape.value(c).item(), 11.0);

        let m = Tensor::matrix(&[&[1.5, -2.0, 0.25], &[3.0, 0.0, 1.0]]).unwrap();
        let eye = Tensor::matrix(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        let mv = tape.leaf(m.clone());
        let iv = tape.constant(eye);
        let out = tape.matmul(mv, iv).unwrap();
        assert_eq!(tape.value(out), &m);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn activations_at_zero() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        let t = tape.tanh(z);
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(t).item(), 0.0);
        assert_eq!(tape.value(s).item(), 0.5);
        let grads = tape.backward(t).unwrap();
        assert_eq!(grads.get(z).unwrap().item(), 1.0);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec1(&[0.0, 0.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let c = tape.leaf(vec1(&[-123.4, -123.4, -123.4]));
        let s = tape.softmax(c, 0).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let big = tape.leaf(vec1(&[1000.0, 0.0]));
        let s = tape.softmax(big, 0).unwrap();
        let v = tape.value(s).data();
        assert_eq!(v[0], 1.0);
        assert!(v[1] >= 0.0 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_along_each_axis_of_a_matrix() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 4.0]]).unwrap());
        let rows = tape.softmax(a, 1).unwrap();
        let cols = tape.softmax(a, 0).unwrap();
        let r = tape.value(rows);
        assert!((r.data()[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let c = tape.value(cols);
        for j in 0..3 {
            assert!((c.get(&[0, j]) + c.get(&[1, j]) - 1.0).abs() < 1e-12);
        }
        assert!(matches!(tape.softmax(a, 2), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn concat_cases() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec1(&[1.0]));
        let b = tape.leaf(vec1(&[2.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0]);

        let single = tape.concat(&[a], 0).unwrap();
        assert!(tape.value(single).bits_eq(tape.value(a)));

        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0]);

        let m = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(tape.concat(&[a, m], 0).is_err());
        assert!(tape.concat(&[], 0).is_err());
    }

    #[test]
    fn concat_along_columns_interleaves_rows() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(&[&[1.0], &[2.0]]).unwrap());
        let b = tape.leaf(Tensor::matrix(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let back = tape.narrow(c, 1, 1, 2).unwrap();
        assert!(tape.value(back).bits_eq(tape.value(b)));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec1(&[1.0, 3.0, 2.0]));
        let m = tape.max(a);
        assert_eq!(tape.value(m).item(), 3.0);
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 0.0]);

        let b = tape.leaf(vec1(&[2.0, 4.0]));
        let mean = tape.mean(b);
        assert_eq!(tape.value(mean).item(), 3.0);

        let tie = tape.leaf(vec1(&[5.0, 5.0]));
        let m = tape.max(tie);
        assert_eq!(tape.value(m).item(), 5.0);
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(tie).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_square_and_detached() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);

        let y = tape.leaf(Tensor::scalar(3.0));
        let d = tape.detach(y);
        let loss = tape.mul(d, d).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get_or_zeros(y, &[]).item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec1(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let uniform = tape.leaf(Tensor::zeros(&[1, 2]));
        let l = tape.cross_entropy(uniform, &[1]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let sat = tape.leaf(Tensor::matrix(&[&[20.0, -20.0]]).unwrap());
        let l = tape.cross_entropy(sat, &[0]).unwrap();
        assert!(tape.value(l).item() < 1e-15);

        assert!(matches!(
            tape.cross_entropy(sat, &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn gather_rejects_out_of_range_row() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.gather_rows(t, &[0, 2]),
            Err(Error::TokenOutOfVocab { token: 2, vocab: 2 })
        ));
    }

    #[test]
    fn node_inputs_are_strictly_older() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2, 2]));
        let b = tape.tanh(a);
        let c = tape.matmul(a, b).unwrap();
        let d = tape.concat(&[a, c], 0).unwrap();
        let e = tape.sum(d);
        for id in 0..tape.len() {
            for input in tape.inputs(Var(id)) {
                assert!(input.id() < id);
            }
        }
        assert_eq!(e.id(), tape.len() - 1);
    }

    #[test]
    fn corrupted_max_fixture_doubles_gradient() {
        let mut tape = Tape::with_corrupted_max_gradient();
        let a = tape.leaf(vec1(&[1.0, 3.0]));
        let m = tape.max(a);
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 2.0]);
    }
}
