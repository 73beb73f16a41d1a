use std::ops::Range;

use super::kernels::{self, ConvShape, LstmCache};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` inside the cross-entropy ops.
pub const CLAMP: f64 = 1e-7;

enum Op<S> {
    Leaf,
    Conv1d {
        input: Var,
        kernels: Var,
        bias: Var,
        geom: ConvShape,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    Softmax {
        input: Var,
        width: usize,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryOp,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        input: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
        wa: usize,
        wb: usize,
    },
    Lstm {
        input: Var,
        w_in: Var,
        w_rec: Var,
        bias: Var,
        dim: usize,
        units: usize,
        reverse: bool,
        cache: Option<LstmCache<S>>,
    },
    Bce {
        pred: Var,
        target: Vec<S>,
        range: Range<usize>,
    },
    Cce {
        pred: Var,
        target: Vec<S>,
        range: Range<usize>,
        classes: usize,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: S,
    },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv1d {
                input,
                kernels,
                bias,
                ..
            } => vec![*input, *kernels, *bias],
            Op::Dense {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::Lstm {
                input,
                w_in,
                w_rec,
                bias,
                ..
            } => vec![*input, *w_in, *w_rec, *bias],
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } | Op::Concat { a, b, .. } => {
                vec![*a, *b]
            }
            Op::MaxPool { input, .. }
            | Op::Act { input, .. }
            | Op::Softmax { input, .. }
            | Op::Transpose { input, .. }
            | Op::Reshape { input }
            | Op::Sum { input }
            | Op::Scale { input, .. } => vec![*input],
            Op::Bce { pred, .. } | Op::Cce { pred, .. } => vec![*pred],
        }
    }
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Define-by-run record of tensor operations.
///
/// A recording tape keeps every intermediate needed for [`Tape::backward`].
/// An inference tape (see [`Tape::inference`]) keeps no backward caches and
/// lets callers [`release`](Tape::release) dead intermediates.
pub struct Tape<S = f64> {
    nodes: Vec<Node<S>>,
    recording: bool,
    branches: u64,
}

impl<S: Float> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Float> Gradients<S> {
    /// Gradient of the loss with respect to `var`, if `var` requires grad.
    pub fn get(&self, var: Var) -> Option<&[S]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<S: Float> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            branches: 0,
        }
    }

    /// A tape that never differentiates; parameters are treated as constants.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
            branches: 0,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Hash of every piecewise choice made so far: which ReLU inputs were
    /// positive, which max-pool positions won, which probabilities hit the
    /// cross-entropy clamp. Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn mix_branches(&mut self, choices: impl Iterator<Item = u64>) {
        for c in choices {
            self.branches = (self.branches ^ c).wrapping_mul(0x100_0000_01b3);
        }
        self.branches = self
            .branches
            .rotate_left(17)
            .wrapping_add(0x9e37_79b9_7f4a_7c15);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Places a tensor on the tape. Its `requires_grad` flag is honoured on
    /// recording tapes.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let requires_grad = self.recording && tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: tensor.into_data(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a trainable tensor on the tape.
    pub fn param(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.requiring_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn value(&self, var: Var) -> &[S] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn tensor(&self, var: Var) -> Tensor<S> {
        let node = &self.nodes[var.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    /// The single value of a scalar node.
    pub fn scalar(&self, var: Var) -> Result<S> {
        let v = self.value(var);
        if v.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a scalar, found shape {:?}",
                self.shape(var)
            )));
        }
        Ok(v[0])
    }

    /// Frees the storage of an intermediate on an inference tape. No effect
    /// on recording tapes, where every value may be needed by backward.
    pub fn release(&mut self, var: Var) {
        if !self.recording {
            self.nodes[var.0].value = Vec::new();
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>) -> Var {
        let requires_grad =
            self.recording && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { strip(op) };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn live(&self, var: Var) -> Result<&[S]> {
        let node = &self.nodes[var.0];
        if node.value.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "node {} was released and cannot be read",
                var.0
            )));
        }
        Ok(&node.value)
    }

    /// Stride-1 convolution with zero "same" padding.
    /// `input: [T, Cin]`, `kernels: [K, Cin, Cout]`, `bias: [Cout]` → `[T, Cout]`.
    pub fn conv1d_same(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (len, cin) = as_matrix(self.shape(input), "conv1d input")?;
        let ks = self.shape(kernels);
        if ks.len() != 3 {
            return Err(Error::Shape(format!(
                "conv1d kernels must be [K, Cin, Cout], got {ks:?}"
            )));
        }
        let (kernel, kcin, cout) = (ks[0], ks[1], ks[2]);
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv1d kernel size {kernel} is even"
            )));
        }
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv1d input has {cin} channels, kernels expect {kcin}"
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::Shape(format!(
                "conv1d bias shape {:?}, expected [{cout}]",
                self.shape(bias)
            )));
        }
        let geom = ConvShape {
            len,
            kernel,
            cin,
            cout,
        };
        let out = kernels::conv1d_forward(
            self.live(input)?,
            self.live(kernels)?,
            self.live(bias)?,
            geom,
        );
        Ok(self.push(
            vec![len, cout],
            out,
            Op::Conv1d {
                input,
                kernels,
                bias,
                geom,
            },
        ))
    }

    /// Max pooling along time. Ties resolve to the first maximal position.
    pub fn maxpool1d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (len, ch) = as_matrix(self.shape(input), "maxpool input")?;
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "maxpool window and stride must be positive".into(),
            ));
        }
        if len < window {
            return Err(Error::Shape(format!(
                "maxpool input length {len} is shorter than window {window}"
            )));
        }
        let out_len = (len - window) / stride + 1;
        let x = self.live(input)?;
        let mut out = vec![S::zero(); out_len * ch];
        let mut argmax = vec![0usize; out_len * ch];
        for j in 0..out_len {
            for c in 0..ch {
                let mut best = j * stride * ch + c;
                for w in 1..window {
                    let idx = (j * stride + w) * ch + c;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out[j * ch + c] = x[best];
                argmax[j * ch + c] = best;
            }
        }
        self.mix_branches(argmax.iter().map(|&a| a as u64));
        Ok(self.push(vec![out_len, ch], out, Op::MaxPool { input, argmax }))
    }

    /// Affine map over the last axis: `input[..., Din] · weight[Din, Dout] + bias[Dout]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let din = *in_shape.last().expect("shapes are non-empty");
        let ws = self.shape(weight);
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::Shape(format!(
                "dense weight {ws:?} does not accept input {in_shape:?}"
            )));
        }
        let dout = ws[1];
        if self.shape(bias) != [dout] {
            return Err(Error::Shape(format!(
                "dense bias {:?}, expected [{dout}]",
                self.shape(bias)
            )));
        }
        let rows = self.value(input).len() / din;
        let mut out = kernels::matmul(self.live(input)?, self.live(weight)?, rows, din, dout);
        let b = self.live(bias)?;
        for row in out.chunks_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let mut shape = in_shape;
        *shape.last_mut().expect("non-empty") = dout;
        Ok(self.push(
            shape,
            out,
            Op::Dense {
                input,
                weight,
                bias,
                rows,
                din,
                dout,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let x = self.live(input)?;
        let out: Vec<S> = match kind {
            Activation::Relu => x.iter().map(|&v| v.max(S::zero())).collect(),
            Activation::Tanh => x.iter().map(|&v| v.tanh()).collect(),
            Activation::Sigmoid => x.iter().map(|&v| kernels::sigmoid(v)).collect(),
        };
        if kind == Activation::Relu {
            let active: Vec<u64> = out.iter().map(|&v| (v > S::zero()) as u64).collect();
            self.mix_branches(active.into_iter());
        }
        let shape = self.shape(input).to_vec();
        Ok(self.push(shape, out, Op::Act { input, kind }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// Softmax over the last axis, stabilised by subtracting the slice maximum.
    pub fn softmax_lastdim(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let width = *shape.last().expect("non-empty");
        let mut out = self.live(input)?.to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(shape, out, Op::Softmax { input, width }))
    }

    /// Elementwise add/mul. A smaller operand whose shape is a trailing
    /// suffix of the other's is repeated along the leading axes.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryOp) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb)?;
        let (va, vb) = (self.live(a)?, self.live(b)?);
        let (na, nb) = (va.len(), vb.len());
        let numel = na.max(nb);
        let out: Vec<S> = (0..numel)
            .map(|i| {
                let (x, y) = (va[i % na], vb[i % nb]);
                match kind {
                    BinaryOp::Add => x + y,
                    BinaryOp::Mul => x * y,
                }
            })
            .collect();
        Ok(self.push(shape, out, Op::Binary { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    /// `[m, k] · [k, n] → [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.shape(a), "matmul lhs")?;
        let (k2, n) = as_matrix(self.shape(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents {k} and {k2} differ"
            )));
        }
        let out = kernels::matmul(self.live(a)?, self.live(b)?, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(input), "transpose")?;
        let out = transpose(self.live(input)?, rows, cols);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { input, rows, cols }))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(input)
            )));
        }
        let out = self.live(input)?.to_vec();
        Ok(self.push(shape, out, Op::Reshape { input }))
    }

    /// Concatenates two `[T, _]` tensors along the last axis.
    pub fn concat_lastdim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, wa) = as_matrix(self.shape(a), "concat lhs")?;
        let (tb, wb) = as_matrix(self.shape(b), "concat rhs")?;
        if ta != tb {
            return Err(Error::Shape(format!("concat lengths {ta} and {tb} differ")));
        }
        let (va, vb) = (self.live(a)?, self.live(b)?);
        let mut out = Vec::with_capacity(ta * (wa + wb));
        for t in 0..ta {
            out.extend_from_slice(&va[t * wa..(t + 1) * wa]);
            out.extend_from_slice(&vb[t * wb..(t + 1) * wb]);
        }
        Ok(self.push(vec![ta, wa + wb], out, Op::Concat { a, b, wa, wb }))
    }

    /// One LSTM direction over a `[T, D]` sequence with zero initial state.
    ///
    /// `w_in: [D, 4U]`, `w_rec: [U, 4U]`, `bias: [4U]`, gate blocks ordered
    /// (input, forget, cell, output). With `reverse` the recurrence runs from
    /// the last step to the first. Output is `[T, U]` in time order.
    pub fn lstm(
        &mut self,
        input: Var,
        w_in: Var,
        w_rec: Var,
        bias: Var,
        reverse: bool,
    ) -> Result<Var> {
        let (len, dim) = as_matrix(self.shape(input), "lstm input")?;
        let (wd, g4) = as_matrix(self.shape(w_in), "lstm input weights")?;
        if wd != dim {
            return Err(Error::Shape(format!(
                "lstm input width {dim} does not match input weights {:?}",
                self.shape(w_in)
            )));
        }
        if g4 % 4 != 0 {
            return Err(Error::Shape(format!(
                "lstm gate width {g4} is not a multiple of 4"
            )));
        }
        let units = g4 / 4;
        if self.shape(w_rec) != [units, g4] || self.shape(bias) != [g4] {
            return Err(Error::Shape(format!(
                "lstm recurrent weights {:?} / bias {:?} inconsistent with {units} units",
                self.shape(w_rec),
                self.shape(bias)
            )));
        }
        let (hidden, cache) = kernels::lstm_forward(
            self.live(input)?,
            self.live(w_in)?,
            self.live(w_rec)?,
            self.live(bias)?,
            len,
            dim,
            units,
            reverse,
        );
        Ok(self.push(
            vec![len, units],
            hidden,
            Op::Lstm {
                input,
                w_in,
                w_rec,
                bias,
                dim,
                units,
                reverse,
                cache: Some(cache),
            },
        ))
    }

    /// Mean binary cross-entropy of `pred: [T, 1]` (or `[T]`) against a
    /// binary target over the positions in `range`.
    pub fn bce_mean(&mut self, pred: Var, target: &[S], range: Range<usize>) -> Result<Var> {
        let p = self.live(pred)?;
        check_loss_range(p.len(), target.len(), &range, "bce")?;
        let (lo, hi) = clamp_bounds::<S>();
        let mut total = S::zero();
        let clamped: Vec<u64> = range.clone().map(|i| clamp_side(p[i], lo, hi)).collect();
        for i in range.clone() {
            let q = p[i].max(lo).min(hi);
            let y = target[i];
            total -= y * q.ln() + (S::one() - y) * (S::one() - q).ln();
        }
        let loss = total / S::from_f64(range.len() as f64);
        self.mix_branches(clamped.into_iter());
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                pred,
                target: target.to_vec(),
                range,
            },
        ))
    }

    /// Mean categorical cross-entropy of `pred: [T, C]` against a one-hot
    /// (or all-zero) target over the rows in `range`.
    pub fn cce_mean(&mut self, pred: Var, target: &[S], range: Range<usize>) -> Result<Var> {
        let (len, classes) = as_matrix(self.shape(pred), "cce prediction")?;
        if target.len() != len * classes {
            return Err(Error::Shape(format!(
                "cce target holds {} values, prediction is [{len}, {classes}]",
                target.len()
            )));
        }
        check_loss_range(len, len, &range, "cce")?;
        let p = self.live(pred)?;
        let (lo, hi) = clamp_bounds::<S>();
        let mut total = S::zero();
        let clamped: Vec<u64> = p[range.start * classes..range.end * classes]
            .iter()
            .map(|&v| clamp_side(v, lo, hi))
            .collect();
        for t in range.clone() {
            for c in 0..classes {
                let y = target[t * classes + c];
                if y != S::zero() {
                    total -= y * p[t * classes + c].max(lo).min(hi).ln();
                }
            }
        }
        let loss = total / S::from_f64(range.len() as f64);
        self.mix_branches(clamped.into_iter());
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Cce {
                pred,
                target: target.to_vec(),
                range,
                classes,
            },
        ))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.live(input)?.iter().copied().sum();
        Ok(self.push(vec![1], vec![total], Op::Sum { input }))
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Result<Var> {
        let out = self.live(input)?.iter().map(|&v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        Ok(self.push(shape, out, Op::Scale { input, factor }))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every node that requires grad receives a gradient; parameters that did
    /// not influence `loss` receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![S::zero(); node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], var: Var, delta: Vec<S>) {
        if !self.wants(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernels,
                bias,
                geom,
            } => {
                if self.wants(*input) {
                    let d = kernels::conv1d_backward_input(g, val(*kernels), *geom);
                    self.accumulate(grads, *input, d);
                }
                if self.wants(*kernels) {
                    let d = kernels::conv1d_backward_kernels(val(*input), g, *geom);
                    self.accumulate(grads, *kernels, d);
                }
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, kernels::column_sums(g, geom.cout));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![S::zero(); val(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                self.accumulate(grads, *input, d);
            }
            Op::Dense {
                input,
                weight,
                bias,
                rows,
                din,
                dout,
            } => {
                if self.wants(*input) {
                    let d = kernels::matmul_a_bt(g, val(*weight), *rows, *dout, *din);
                    self.accumulate(grads, *input, d);
                }
                if self.wants(*weight) {
                    let d = kernels::matmul_at_b(val(*input), g, *rows, *din, *dout);
                    self.accumulate(grads, *weight, d);
                }
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, kernels::column_sums(g, *dout));
                }
            }
            Op::Act { input, kind } => {
                let one = S::one();
                let d: Vec<S> = match kind {
                    Activation::Relu => val(*input)
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| if x > S::zero() { gv } else { S::zero() })
                        .collect(),
                    Activation::Tanh => node
                        .value
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| gv * (one - y * y))
                        .collect(),
                    Activation::Sigmoid => node
                        .value
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| gv * y * (one - y))
                        .collect(),
                };
                self.accumulate(grads, *input, d);
            }
            Op::Softmax { input, width } => {
                let mut d = vec![S::zero(); g.len()];
                for ((d_row, y_row), g_row) in d
                    .chunks_mut(*width)
                    .zip(node.value.chunks(*width))
                    .zip(g.chunks(*width))
                {
                    let inner = kernels::dot(y_row, g_row);
                    for ((dv, &y), &gv) in d_row.iter_mut().zip(y_row).zip(g_row) {
                        *dv = y * (gv - inner);
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::Binary { a, b, kind } => {
                let (va, vb) = (val(*a), val(*b));
                let (na, nb) = (va.len(), vb.len());
                if self.wants(*a) {
                    let mut d = vec![S::zero(); na];
                    for (i, &gv) in g.iter().enumerate() {
                        d[i % na] += match kind {
                            BinaryOp::Add => gv,
                            BinaryOp::Mul => gv * vb[i % nb],
                        };
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let mut d = vec![S::zero(); nb];
                    for (i, &gv) in g.iter().enumerate() {
                        d[i % nb] += match kind {
                            BinaryOp::Add => gv,
                            BinaryOp::Mul => gv * va[i % na],
                        };
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    let d = kernels::matmul_a_bt(g, val(*b), *m, *n, *k);
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = kernels::matmul_at_b(val(*a), g, *m, *k, *n);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Transpose { input, rows, cols } => {
                self.accumulate(grads, *input, transpose(g, *cols, *rows));
            }
            Op::Reshape { input } => self.accumulate(grads, *input, g.to_vec()),
            Op::Concat { a, b, wa, wb } => {
                let w = wa + wb;
                let rows = g.len() / w;
                let mut da = Vec::with_capacity(rows * wa);
                let mut db = Vec::with_capacity(rows * wb);
                for row in g.chunks(w) {
                    da.extend_from_slice(&row[..*wa]);
                    db.extend_from_slice(&row[*wa..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Lstm {
                input,
                w_in,
                w_rec,
                bias,
                dim,
                units,
                reverse,
                cache,
            } => {
                let cache = cache.as_ref().expect("recording tapes keep lstm caches");
                let len = val(*input).len() / dim;
                let (d_in, d_w_in, d_w_rec, d_bias) = kernels::lstm_backward(
                    val(*input),
                    val(*w_in),
                    val(*w_rec),
                    &node.value,
                    cache,
                    g,
                    len,
                    *dim,
                    *units,
                    *reverse,
                );
                self.accumulate(grads, *input, d_in);
                self.accumulate(grads, *w_in, d_w_in);
                self.accumulate(grads, *w_rec, d_w_rec);
                self.accumulate(grads, *bias, d_bias);
            }
            Op::Bce {
                pred,
                target,
                range,
            } => {
                let p = val(*pred);
                let (lo, hi) = clamp_bounds::<S>();
                let scale = g[0] / S::from_f64(range.len() as f64);
                let mut d = vec![S::zero(); p.len()];
                for i in range.clone() {
                    let (q, y) = (p[i], target[i]);
                    if q >= lo && q <= hi {
                        d[i] = scale * ((S::one() - y) / (S::one() - q) - y / q);
                    }
                }
                self.accumulate(grads, *pred, d);
            }
            Op::Cce {
                pred,
                target,
                range,
                classes,
            } => {
                let p = val(*pred);
                let (lo, hi) = clamp_bounds::<S>();
                let scale = g[0] / S::from_f64(range.len() as f64);
                let mut d = vec![S::zero(); p.len()];
                for t in range.clone() {
                    for c in 0..*classes {
                        let i = t * classes + c;
                        let (q, y) = (p[i], target[i]);
                        if y != S::zero() && q >= lo && q <= hi {
                            d[i] = -scale * y / q;
                        }
                    }
                }
                self.accumulate(grads, *pred, d);
            }
            Op::Sum { input } => {
                let n = val(*input).len();
                self.accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, g.iter().map(|&v| v * *factor).collect());
            }
        }
    }
}

/// Drops backward-only caches from ops that will never be differentiated.
fn strip<S>(op: Op<S>) -> Op<S> {
    match op {
        Op::Lstm {
            input,
            w_in,
            w_rec,
            bias,
            dim,
            units,
            reverse,
            ..
        } => Op::Lstm {
            input,
            w_in,
            w_rec,
            bias,
            dim,
            units,
            reverse,
            cache: None,
        },
        Op::MaxPool { input, .. } => Op::MaxPool {
            input,
            argmax: Vec::new(),
        },
        Op::Bce { pred, range, .. } => Op::Bce {
            pred,
            target: Vec::new(),
            range,
        },
        Op::Cce {
            pred,
            range,
            classes,
            ..
        } => Op::Cce {
            pred,
            target: Vec::new(),
            range,
            classes,
        },
        other => other,
    }
}

fn clamp_side<S: Float>(v: S, lo: S, hi: S) -> u64 {
    if v < lo {
        1
    } else if v > hi {
        2
    } else {
        0
    }
}

fn clamp_bounds<S: Float>() -> (S, S) {
    (S::from_f64(CLAMP), S::one() - S::from_f64(CLAMP))
}

fn check_loss_range(len: usize, target_len: usize, range: &Range<usize>, what: &str) -> Result<()> {
    if target_len != len {
        return Err(Error::Shape(format!(
            "{what} target length {target_len} differs from prediction length {len}"
        )));
    }
    if range.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{what} loss over an empty valid range"
        )));
    }
    if range.end > len {
        return Err(Error::Shape(format!(
            "{what} valid range {range:?} exceeds prediction length {len}"
        )));
    }
    Ok(())
}

fn as_matrix(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape(format!("{what} must be 2-D, got {shape:?}"))),
    }
}

fn transpose<S: Float>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let strip = |s: &[usize]| -> Vec<usize> {
        let first = s.iter().position(|&d| d != 1).unwrap_or(s.len());
        s[first..].to_vec()
    };
    let (na, nb): (usize, usize) = (a.iter().product(), b.iter().product());
    let (big, small) = if na >= nb { (a, b) } else { (b, a) };
    let small = strip(small);
    if big.ends_with(&small) {
        Ok(big.to_vec())
    } else {
        Err(Error::Shape(format!(
            "shapes {a:?} and {b:?} do not broadcast"
        )))
    }
}
