//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable call appends one node holding its output value and
//! whatever the backward pass needs. [`Tape::backward`] walks the nodes in
//! reverse, then clears the tape: variables from a consumed tape are rejected,
//! which is also how double-backward is refused.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::ops::activation::{self, axis_split};
use crate::ops::conv::{self, ConvSpec};
use crate::ops::{dense, norm};
use crate::scalar::Scalar;
use crate::tensor::{ensure_finite, Tensor};

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

enum Op<T> {
    Leaf,
    Conv { x: usize, w: usize, b: Option<usize>, spec: ConvSpec },
    ConvT { x: usize, w: usize, b: Option<usize>, spec: ConvSpec },
    Linear { x: usize, w: usize, b: Option<usize> },
    MatMul { a: usize, b: usize, transpose_b: bool },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, g: usize, b: usize, xhat: Tensor<T>, inv_std: Vec<T> },
    BatchNorm { x: usize, g: usize, b: usize, xhat: Tensor<T>, inv_std: Vec<T>, train: bool },
    Gelu { x: usize },
    Prelu { x: usize, slope: usize },
    Sigmoid { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: T },
    Sum { x: usize },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    Slice { x: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Dice { pred: usize, target: Tensor<T>, eps: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { spec, .. } if spec.groups > 1 => "depthwise_conv3d",
            Op::Conv { .. } => "conv3d",
            Op::ConvT { .. } => "transposed_conv3d",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Gelu { .. } => "gelu",
            Op::Prelu { .. } => "prelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Dice { .. } => "dice_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    generation: u64,
    fault: Option<(String, T)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    generation: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a requires-grad leaf. Leaves the loss does not reach get zeros.
    pub fn get(&self, var: Var) -> Result<&Tensor<T>> {
        if var.generation != self.generation {
            return Err(Error::Usage("variable does not belong to this backward pass".into()));
        }
        self.grads
            .get(var.id)
            .and_then(|g| g.as_ref())
            .ok_or_else(|| Error::Usage(format!("variable {} is not a requires-grad leaf", var.id)))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: NEXT_GENERATION.fetch_add(1, Ordering::Relaxed),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scale the gradient produced by every op named `op` by `factor`.
    ///
    /// Negative-control fixture for gradient checking; never set in normal use.
    pub fn inject_gradient_fault(&mut self, op: &str, factor: T) {
        self.fault = Some((op.to_string(), factor));
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(Error::Usage(
                "variable from a cleared or different tape (double backward is unsupported)".into(),
            ));
        }
        Ok(&self.nodes[v.id])
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Result<Var> {
        ensure_finite(op.name(), &value)?;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, false, Op::Leaf)
    }

    fn any_grad(&self, ids: &[Var]) -> Result<bool> {
        let mut any = false;
        for &v in ids {
            any |= self.node(v)?.requires_grad;
        }
        Ok(any)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let bias = b.map(|b| self.value(b)).transpose()?;
        let y = conv::conv3d(self.value(x)?, spec, self.value(w)?, bias)?;
        let rg = self.any_grad(&[x, w])? || b.map(|b| self.any_grad(&[b])).transpose()?.unwrap_or(false);
        self.push(
            y,
            rg,
            Op::Conv {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                spec: *spec,
            },
        )
    }

    /// Depthwise convolution with `kernel == stride == r`; extents must be divisible by `r`.
    pub fn depthwise_aggregate(&mut self, x: Var, w: Var, b: Option<Var>, r: usize) -> Result<Var> {
        let shape = self.value(x)?.shape().to_vec();
        let dims = crate::tensor::dims5("depthwise_conv3d", &shape)?;
        if r == 0 || dims[2..].iter().any(|&e| e % r != 0) {
            return Err(Error::Config(format!(
                "depthwise aggregation factor {r} does not divide extents {:?}",
                &dims[2..]
            )));
        }
        self.conv3d(x, w, b, &ConvSpec::depthwise_aggregate(dims[1], r))
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let bias = b.map(|b| self.value(b)).transpose()?;
        let y = conv::conv_transpose3d(self.value(x)?, spec, self.value(w)?, bias)?;
        let rg = self.any_grad(&[x, w])? || b.map(|b| self.any_grad(&[b])).transpose()?.unwrap_or(false);
        self.push(
            y,
            rg,
            Op::ConvT {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                spec: *spec,
            },
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = b.map(|b| self.value(b)).transpose()?;
        let y = dense::linear(self.value(x)?, self.value(w)?, bias)?;
        let rg = self.any_grad(&[x, w])? || b.map(|b| self.any_grad(&[b])).transpose()?.unwrap_or(false);
        self.push(
            y,
            rg,
            Op::Linear {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let y = dense::matmul(self.value(a)?, self.value(b)?, transpose_b)?;
        let rg = self.any_grad(&[a, b])?;
        self.push(
            y,
            rg,
            Op::MatMul {
                a: a.id,
                b: b.id,
                transpose_b,
            },
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = activation::softmax(self.value(x)?, axis)?;
        let rg = self.any_grad(&[x])?;
        self.push(y, rg, Op::Softmax { x: x.id, axis })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let out = norm::layer_norm(self.value(x)?, self.value(gamma)?, self.value(beta)?)?;
        let rg = self.any_grad(&[x, gamma, beta])?;
        self.push(
            out.y,
            rg,
            Op::LayerNorm {
                x: x.id,
                g: gamma.id,
                b: beta.id,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
        )
    }

    /// Batch norm with batch statistics; returns the per-channel `(mean, biased var)`
    /// so the caller can update running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<T>, Vec<T>)> {
        let out = norm::batch_norm_train(self.value(x)?, self.value(gamma)?, self.value(beta)?)?;
        let rg = self.any_grad(&[x, gamma, beta])?;
        let (mean, var) = (out.batch_mean, out.batch_var);
        let v = self.push(
            out.y,
            rg,
            Op::BatchNorm {
                x: x.id,
                g: gamma.id,
                b: beta.id,
                xhat: out.xhat,
                inv_std: out.inv_std,
                train: true,
            },
        )?;
        Ok((v, mean, var))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let c = self.value(gamma)?.numel();
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm", "running statistics length mismatch"));
        }
        let out = norm::batch_norm_with_stats(self.value(x)?, mean, var, self.value(gamma)?, self.value(beta)?)?;
        let rg = self.any_grad(&[x, gamma, beta])?;
        self.push(
            out.y,
            rg,
            Op::BatchNorm {
                x: x.id,
                g: gamma.id,
                b: beta.id,
                xhat: out.xhat,
                inv_std: out.inv_std,
                train: false,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = activation::gelu(self.value(x)?);
        let rg = self.any_grad(&[x])?;
        self.push(y, rg, Op::Gelu { x: x.id })
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let y = activation::prelu(self.value(x)?, self.value(slope)?)?;
        let rg = self.any_grad(&[x, slope])?;
        self.push(
            y,
            rg,
            Op::Prelu {
                x: x.id,
                slope: slope.id,
            },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = activation::sigmoid(self.value(x)?);
        let rg = self.any_grad(&[x])?;
        self.push(y, rg, Op::Sigmoid { x: x.id })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a)?.shape(), self.value(b)?.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::new(va.shape(), data)?;
        let rg = self.any_grad(&[a, b])?;
        self.push(y, rg, Op::Add { a: a.id, b: b.id })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::new(va.shape(), data)?;
        let rg = self.any_grad(&[a, b])?;
        self.push(y, rg, Op::Mul { a: a.id, b: b.id })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let y = self.value(x)?.map(|v| v * factor);
        let rg = self.any_grad(&[x])?;
        self.push(y, rg, Op::Scale { x: x.id, factor })
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x)?.sum());
        let rg = self.any_grad(&[x])?;
        self.push(y, rg, Op::Sum { x: x.id })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x)?.clone().reshape(shape)?;
        let rg = self.any_grad(&[x])?;
        self.push(y, rg, Op::Reshape { x: x.id })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = self.value(x)?.permute(axes)?;
        let rg = self.any_grad(&[x])?;
        self.push(
            y,
            rg,
            Op::Permute {
                x: x.id,
                axes: axes.to_vec(),
            },
        )
    }

    /// `x[..., start..start + len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x)?;
        let (outer, full, inner) = axis_split("slice", v.shape(), axis)?;
        if len == 0 || start + len > full {
            return Err(shape_err(
                "slice",
                format!("range {start}..{} out of axis extent {full}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let y = Tensor::new(&shape, data)?;
        let rg = self.any_grad(&[x])?;
        self.push(y, rg, Op::Slice { x: x.id, axis, start })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base_shape = self.value(*first)?.shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p)?.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible || axis >= s.len() {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base_shape:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split("concat", &base_shape, axis)?;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p)?;
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let y = Tensor::new(&shape, data)?;
        let rg = self.any_grad(parts)?;
        self.push(
            y,
            rg,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    /// Soft Dice loss `1 - mean_i dice_i` over the class axis 1 of `pred`.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        let p = self.value(pred)?;
        if p.shape() != target.shape() {
            return Err(shape_err(
                "dice_loss",
                format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let terms = crate::loss::dice_terms(p, target, eps)?;
        let y = Tensor::scalar(terms.loss());
        let rg = self.any_grad(&[pred])?;
        self.push(
            y,
            rg,
            Op::Dice {
                pred: pred.id,
                target: target.clone(),
                eps,
            },
        )
    }

    /// Back-propagate from a one-element `loss`, consuming the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let numel = self.node(loss)?.value.numel();
        if numel != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.id].value.shape()
            )));
        }
        let generation = self.generation;
        let mut nodes = std::mem::take(&mut self.nodes);
        self.generation = NEXT_GENERATION.fetch_add(1, Ordering::Relaxed);
        let fault = self.fault.clone();

        let mut leaf_grads: Vec<Option<Tensor<T>>> = nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf if n.requires_grad => Some(Tensor::zeros(n.value.shape())),
                _ => None,
            })
            .collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        nodes.truncate(loss.id + 1);
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(g) = grads[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            let scale = match &fault {
                Some((name, f)) if name == node.op.name() => Some(*f),
                _ => None,
            };
            let emit = |idx: usize, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                let t = match scale {
                    Some(f) => t.map(|v| v * f),
                    None => t,
                };
                accumulate(grads, idx, t);
            };
            let need = |idx: usize| nodes[idx].requires_grad;
            match &node.op {
                Op::Leaf => {
                    if let Some(slot) = leaf_grads[id].as_mut() {
                        slot.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
                    }
                }
                Op::Conv { x, w, b, spec } => {
                    let r = conv::conv3d_backward(&nodes[*x].value, spec, &nodes[*w].value, &g, need(*x))?;
                    if let Some(gx) = r.input {
                        emit(*x, gx, &mut grads);
                    }
                    if need(*w) {
                        emit(*w, r.weight, &mut grads);
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        emit(b, r.bias, &mut grads);
                    }
                }
                Op::ConvT { x, w, b, spec } => {
                    let r = conv::conv_transpose3d_backward(&nodes[*x].value, spec, &nodes[*w].value, &g, need(*x))?;
                    if let Some(gx) = r.input {
                        emit(*x, gx, &mut grads);
                    }
                    if need(*w) {
                        emit(*w, r.weight, &mut grads);
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        emit(b, r.bias, &mut grads);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = dense::linear_backward(&nodes[*x].value, &nodes[*w].value, &g)?;
                    if need(*x) {
                        emit(*x, gx, &mut grads);
                    }
                    if need(*w) {
                        emit(*w, gw, &mut grads);
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        emit(b, gb, &mut grads);
                    }
                }
                Op::MatMul { a, b, transpose_b } => {
                    let (ga, gb) = dense::matmul_backward(&nodes[*a].value, &nodes[*b].value, *transpose_b, &g)?;
                    if need(*a) {
                        emit(*a, ga, &mut grads);
                    }
                    if need(*b) {
                        emit(*b, gb, &mut grads);
                    }
                }
                Op::Softmax { x, axis } => {
                    let gx = activation::softmax_backward(&node.value, *axis, &g)?;
                    emit(*x, gx, &mut grads);
                }
                Op::LayerNorm { x, g: gm, b, xhat, inv_std } => {
                    let (gx, gg, gb) = norm::layer_norm_backward(xhat, inv_std, &nodes[*gm].value, &g)?;
                    if need(*x) {
                        emit(*x, gx, &mut grads);
                    }
                    if need(*gm) {
                        emit(*gm, gg, &mut grads);
                    }
                    if need(*b) {
                        emit(*b, gb, &mut grads);
                    }
                }
                Op::BatchNorm { x, g: gm, b, xhat, inv_std, train } => {
                    let (gx, gg, gb) = if *train {
                        norm::batch_norm_train_backward(xhat, inv_std, &nodes[*gm].value, &g)?
                    } else {
                        norm::batch_norm_eval_backward(xhat, inv_std, &nodes[*gm].value, &g)?
                    };
                    if need(*x) {
                        emit(*x, gx, &mut grads);
                    }
                    if need(*gm) {
                        emit(*gm, gg, &mut grads);
                    }
                    if need(*b) {
                        emit(*b, gb, &mut grads);
                    }
                }
                Op::Gelu { x } => {
                    let xv = &nodes[*x].value;
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &d)| d * activation::gelu_grad_scalar(v))
                        .collect();
                    emit(*x, Tensor::new(xv.shape(), data)?, &mut grads);
                }
                Op::Prelu { x, slope } => {
                    let (gx, gs) = activation::prelu_backward(&nodes[*x].value, &nodes[*slope].value, &g)?;
                    if need(*x) {
                        emit(*x, gx, &mut grads);
                    }
                    if need(*slope) {
                        emit(*slope, gs, &mut grads);
                    }
                }
                Op::Sigmoid { x } => {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &d)| d * s * (T::one() - s))
                        .collect();
                    emit(*x, Tensor::new(node.value.shape(), data)?, &mut grads);
                }
                Op::Add { a, b } => {
                    if need(*a) {
                        emit(*a, g.clone(), &mut grads);
                    }
                    if need(*b) {
                        emit(*b, g, &mut grads);
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if need(*a) {
                        let d = g.data().iter().zip(vb.data()).map(|(&d, &v)| d * v).collect();
                        emit(*a, Tensor::new(va.shape(), d)?, &mut grads);
                    }
                    if need(*b) {
                        let d = g.data().iter().zip(va.data()).map(|(&d, &v)| d * v).collect();
                        emit(*b, Tensor::new(vb.shape(), d)?, &mut grads);
                    }
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    emit(*x, g.map(|v| v * f), &mut grads);
                }
                Op::Sum { x } => {
                    let s = g.data()[0];
                    emit(*x, Tensor::full(nodes[*x].value.shape(), s), &mut grads);
                }
                Op::Reshape { x } => {
                    let shape = nodes[*x].value.shape().to_vec();
                    emit(*x, g.reshape(&shape)?, &mut grads);
                }
                Op::Permute { x, axes } => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    emit(*x, g.permute(&inverse)?, &mut grads);
                }
                Op::Slice { x, axis, start } => {
                    let src = nodes[*x].value.shape().to_vec();
                    let (outer, full, inner) = axis_split("slice", &src, *axis)?;
                    let len = g.shape()[*axis];
                    let mut gx = vec![T::zero(); nodes[*x].value.numel()];
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        gx[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    emit(*x, Tensor::new(&src, gx)?, &mut grads);
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = axis_split("concat", g.shape(), *axis)?;
                    let mut offset = 0;
                    for &p in parts {
                        let shape = nodes[p].value.shape().to_vec();
                        let len = shape[*axis];
                        if need(p) {
                            let mut gp = Vec::with_capacity(nodes[p].value.numel());
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                gp.extend_from_slice(&g.data()[base..base + len * inner]);
                            }
                            emit(p, Tensor::new(&shape, gp)?, &mut grads);
                        }
                        offset += len;
                    }
                }
                Op::Dice { pred, target, eps } => {
                    let terms = crate::loss::dice_terms(&nodes[*pred].value, target, *eps)?;
                    let gp = terms.gradient(&nodes[*pred].value, target, g.data()[0])?;
                    emit(*pred, gp, &mut grads);
                }
            }
        }
        Ok(Gradients {
            generation,
            grads: leaf_grads,
        })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], idx: usize, t: Tensor<T>) {
    match grads[idx].as_mut() {
        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b),
        None => grads[idx] = Some(t),
    }
}
