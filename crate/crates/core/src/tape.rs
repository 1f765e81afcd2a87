//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so ids are topologically sorted
//! and a single reverse sweep accumulates every gradient. All forward values
//! stay on the tape until it is dropped, which is what lets Grad-CAM read the
//! gradient at an interior activation.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d { input: Var, kernel: Var, bias: Var, cols: Tensor<T> },
    Relu(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Linear { input: Var, weight: Var, bias: Var },
    SoftmaxCe { logits: Var, label: usize, probs: Vec<T> },
    Select { input: Var, index: usize },
    Sum(Var),
    Scale(Var, T),
    Add(Var, Var),
    Resize(Var),
    ChannelCombine { input: Var, weights: Vec<T> },
    MaskedRatio { input: Var, mask: Vec<T>, floor: T },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf (parameters, or inputs under a gradient check).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at `v` by the last [`Tape::backward`], if `v`
    /// was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (out, cols) =
            ops::conv3d_forward(self.value(input), self.value(kernel), self.value(bias))?;
        let needs = self.needs(&[input, kernel, bias]);
        Ok(self.push(Op::Conv3d { input, kernel, bias, cols }, out, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let needs = self.needs(&[x]);
        self.push(Op::Relu(x), out, needs)
    }

    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool3d(self.value(x))?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::MaxPool { input: x, argmax }, out, needs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = ops::global_avg_pool(self.value(x));
        let needs = self.needs(&[x]);
        self.push(Op::GlobalAvgPool(x), out, needs)
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(Op::Linear { input, weight, bias }, out, needs))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), label)?;
        let needs = self.needs(&[logits]);
        Ok(self.push(Op::SoftmaxCe { logits, label, probs }, Tensor::scalar(loss), needs))
    }

    /// Picks one element of a vector as a scalar node (a single logit).
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if index >= v.len() {
            return Err(Error::invalid(format!("index {index} out of range for {} values", v.len())));
        }
        let out = Tensor::scalar(v.data()[index]);
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Select { input: x, index }, out, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(&[x]);
        self.push(Op::Sum(x), out, needs)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(&[x]);
        self.push(Op::Scale(x, factor), out, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, needs))
    }

    pub fn trilinear_resize(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let out = ops::trilinear_resize(self.value(x), target)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Resize(x), out, needs))
    }

    /// `(1/C) Σ_c w_c · x_c` with `weights` held constant.
    pub fn channel_combine(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let out = ops::channel_combine(self.value(x), &weights)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::ChannelCombine { input: x, weights }, out, needs))
    }

    /// `Σ x·mask / max(Σ x, floor)` as a scalar node.
    pub fn masked_ratio(&mut self, x: Var, mask: Vec<T>, floor: T) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape(format!(
                "mask has {} voxels, map has {}",
                mask.len(),
                self.value(x).len()
            )));
        }
        let out = Tensor::scalar(ops::masked_ratio(self.value(x).data(), &mask, floor));
        let needs = self.needs(&[x]);
        Ok(self.push(Op::MaskedRatio { input: x, mask, floor }, out, needs))
    }

    /// Reverse sweep from a scalar node; clears previous gradients first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_until(loss, Var(0))
    }

    /// Like [`Tape::backward`] but does not propagate past `lowest`: its
    /// gradient is populated, its inputs' are not. Enough to read the
    /// gradient at an interior node without sweeping everything upstream.
    pub fn backward_until(&mut self, loss: Var, lowest: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.zero_grad();
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for id in (lowest.0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            if id > lowest.0 && self.nodes[id].needs_grad {
                self.propagate(id, &g);
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&mut self, id: usize, g: &Tensor<T>) {
        let node = &self.nodes[id];
        let mut out: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { input, kernel, bias, cols } => {
                let need_input = self.nodes[input.0].needs_grad;
                let (dx, dk, db) = ops::conv3d_backward(g, cols, self.value(*kernel), need_input);
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                out.push((*kernel, dk));
                out.push((*bias, db));
            }
            Op::Relu(x) => out.push((*x, ops::relu_backward(self.value(*x), g))),
            Op::MaxPool { input, argmax } => {
                out.push((*input, ops::maxpool3d_backward(self.value(*input).shape(), argmax, g)))
            }
            Op::GlobalAvgPool(x) => {
                out.push((*x, ops::global_avg_pool_backward(self.value(*x).shape(), g)))
            }
            Op::Linear { input, weight, bias } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*input), self.value(*weight), g);
                out.push((*input, dx));
                out.push((*weight, dw));
                out.push((*bias, db));
            }
            Op::SoftmaxCe { logits, label, probs } => {
                let up = g.item();
                let mut d: Vec<T> = probs.iter().map(|&p| p * up).collect();
                d[*label] -= up;
                out.push((*logits, Tensor::from_parts(vec![d.len()], d)));
            }
            Op::Select { input, index } => {
                let mut d = Tensor::zeros(self.value(*input).shape());
                d.data_mut()[*index] = g.item();
                out.push((*input, d));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.value(*x).shape(), g.item()))),
            Op::Scale(x, f) => out.push((*x, g.map(|v| v * *f))),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Resize(x) => {
                out.push((*x, ops::trilinear_resize_backward(self.value(*x).shape(), g)))
            }
            Op::ChannelCombine { input, weights } => out.push((
                *input,
                ops::channel_combine_backward(self.value(*input).shape(), weights, g),
            )),
            Op::MaskedRatio { input, mask, floor } => {
                let x = self.value(*input);
                let d = ops::masked_ratio_backward(x.data(), mask, *floor, g.item());
                out.push((*input, Tensor::from_parts(x.shape().to_vec(), d)));
            }
        }
        for (v, d) in out {
            self.accumulate(v, d);
        }
    }
}
