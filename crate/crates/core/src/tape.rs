//! Reverse-mode differentiation over a linear operation record.
//!
//! Every primitive appends a node holding its output value and enough
//! context to run its backward rule. Node inputs always have smaller
//! indices than the node itself, so a reverse sweep over the node list is a
//! valid topological order.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::error::{PimmsError, Result};
use crate::ops::{self, Padding, Window, PAD_ARGMAX};
use crate::tensor::Tensor;

/// Log-probabilities are clamped at this floor.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        window: Window,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Softmax(Var),
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    GlobalAvgPool(Var),
    Mix {
        inputs: Vec<Var>,
        columns: Vec<Var>,
        row: usize,
    },
    MeanVar(Vec<Var>),
    Dice {
        pred: Var,
        target: Vec<f64>,
        eps: f64,
    },
    CrossEntropy {
        columns: Vec<Var>,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
///
/// A tape supports exactly one call to [`Tape::backward`]; build a new tape
/// for the next forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, what: &'static str) -> Result<Var> {
        if self.grads.is_some() {
            return Err(PimmsError::Tape(
                "cannot record onto a tape that has already run backward".into(),
            ));
        }
        value.check_finite(what)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            op => op_inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Record a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "leaf")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Record a named trainable parameter. Its gradient is returned by
    /// [`Tape::param_grads`].
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        let v = self.leaf(value.clone())?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let [h, w, c_in] = *x.shape() else {
            return Err(PimmsError::shape(format!(
                "conv2d input must be H×W×C, got {:?}",
                x.shape()
            )));
        };
        let [kh, kw, kc_in, c_out] = *k.shape() else {
            return Err(PimmsError::shape(format!(
                "conv2d kernel must be k×k×Cin×Cout, got {:?}",
                k.shape()
            )));
        };
        if kc_in != c_in {
            return Err(PimmsError::shape(format!(
                "conv2d kernel expects {kc_in} input channels, input has {c_in}"
            )));
        }
        if b.shape() != [c_out] {
            return Err(PimmsError::shape(format!(
                "conv2d bias {:?} does not match {c_out} output channels",
                b.shape()
            )));
        }
        let window = Window::new(h, w, kh, kw, stride, padding).ok_or_else(|| {
            PimmsError::shape(format!(
                "conv2d kernel {kh}×{kw} does not fit input {h}×{w} ({padding:?})"
            ))
        })?;
        x.check_finite("conv2d input")?;
        let out = ops::conv2d_forward(&window, x.data(), c_in, k.data(), b.data(), c_out);
        let value = Tensor::new(vec![window.out_h, window.out_w, c_out], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                window,
            },
            "conv2d output",
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push(value, Op::Relu(input), "relu output")
    }

    /// 2×2 max pooling with stride 1 and zero-same padding; the spatial
    /// extent is preserved.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [h, w, c] = *x.shape() else {
            return Err(PimmsError::shape(format!(
                "maxpool2d input must be H×W×C, got {:?}",
                x.shape()
            )));
        };
        if h < 2 || w < 2 {
            return Err(PimmsError::shape(format!(
                "maxpool2d needs at least 2×2 input, got {h}×{w}"
            )));
        }
        let window = Window::new(h, w, 2, 2, 1, Padding::ZeroSame).expect("2×2 window");
        let (out, argmax) = ops::maxpool_forward(&window, x.data(), c);
        let value = Tensor::new(vec![window.out_h, window.out_w, c], out)?;
        self.push(value, Op::MaxPool { input, argmax }, "maxpool output")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let width = *x.shape().last().expect("non-empty shape");
        let value = Tensor::new(x.shape().to_vec(), ops::softmax_rows(x.data(), width))?;
        self.push(value, Op::Softmax(input), "softmax output")
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        let [f, o] = *w.shape() else {
            return Err(PimmsError::shape(format!(
                "dense weights must be F×O, got {:?}",
                w.shape()
            )));
        };
        if x.len() != f || b.shape() != [o] {
            return Err(PimmsError::shape(format!(
                "dense: input {:?}, weights {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let mut out = b.data().to_vec();
        for (fi, &xv) in x.data().iter().enumerate() {
            for (acc, &wv) in out.iter_mut().zip(&w.data()[fi * o..(fi + 1) * o]) {
                *acc += xv * wv;
            }
        }
        let value = Tensor::new(vec![o], out)?;
        self.push(
            value,
            Op::Dense {
                input,
                weights,
                bias,
            },
            "dense output",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(PimmsError::shape(format!(
                "add: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), "add output")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(PimmsError::shape(format!(
                "mul: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b), "mul output")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor), "scale output")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), "sum output")
    }

    /// Mean over the spatial extent of an `H × W × C` tensor, giving `C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [h, w, c] = *x.shape() else {
            return Err(PimmsError::shape(format!(
                "global_avg_pool input must be H×W×C, got {:?}",
                x.shape()
            )));
        };
        let mut out = vec![0.0; c];
        for px in x.data().chunks_exact(c) {
            for (acc, &v) in out.iter_mut().zip(px) {
                *acc += v;
            }
        }
        let n = (h * w) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let value = Tensor::new(vec![c], out)?;
        self.push(value, Op::GlobalAvgPool(input), "global_avg_pool output")
    }

    /// `Σ_n columns[n][row] · inputs[n]`, summed in the order given.
    pub fn mix(&mut self, inputs: &[Var], columns: &[Var], row: usize) -> Result<Var> {
        if inputs.is_empty() || inputs.len() != columns.len() {
            return Err(PimmsError::shape(format!(
                "mix: {} inputs, {} score columns",
                inputs.len(),
                columns.len()
            )));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut out = vec![0.0; self.value(inputs[0]).len()];
        for (&x, &col) in inputs.iter().zip(columns) {
            let xv = self.value(x);
            if xv.shape() != shape.as_slice() {
                return Err(PimmsError::shape(format!(
                    "mix: input shapes {:?} vs {shape:?}",
                    xv.shape()
                )));
            }
            let weights = self.value(col);
            if row >= weights.len() {
                return Err(PimmsError::shape(format!(
                    "mix: row {row} outside score column of length {}",
                    weights.len()
                )));
            }
            let s = weights.data()[row];
            for (acc, &v) in out.iter_mut().zip(xv.data()) {
                *acc += s * v;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Mix {
                inputs: inputs.to_vec(),
                columns: columns.to_vec(),
                row,
            },
            "mix output",
        )
    }

    /// Per-element mean and population variance across `inputs`,
    /// concatenated along the channel axis: `H × W × K` inputs give
    /// `H × W × 2K`.
    pub fn mean_var(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(PimmsError::invalid("mean_var over an empty set"));
        };
        let shape = self.value(first).shape().to_vec();
        let [h, w, k] = *shape.as_slice() else {
            return Err(PimmsError::shape(format!(
                "mean_var inputs must be H×W×K, got {shape:?}"
            )));
        };
        for &v in inputs {
            if self.value(v).shape() != shape.as_slice() {
                return Err(PimmsError::shape(format!(
                    "mean_var: {:?} vs {shape:?}",
                    self.value(v).shape()
                )));
            }
        }
        let values: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v).data()).collect();
        let out = mean_var_forward(&values, h * w, k);
        let value = Tensor::new(vec![h, w, 2 * k], out)?;
        self.push(value, Op::MeanVar(inputs.to_vec()), "mean_var output")
    }

    /// Soft Dice loss of channel 1 of an `H × W × 2` probability map against
    /// a binary mask.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let p = self.value(pred);
        let [h, w, 2] = *p.shape() else {
            return Err(PimmsError::shape(format!(
                "dice_loss prediction must be H×W×2, got {:?}",
                p.shape()
            )));
        };
        if target.spatial()? != (h, w) || target.len() != h * w {
            return Err(PimmsError::shape(format!(
                "dice_loss target {:?} vs prediction {:?}",
                target.shape(),
                p.shape()
            )));
        }
        if target.data().iter().any(|&g| g != 0.0 && g != 1.0) {
            return Err(PimmsError::invalid("dice_loss target must be binary"));
        }
        let lesion = p.data().iter().skip(1).step_by(2).copied();
        let loss = ops::dice_loss_value(lesion, target.data(), eps);
        self.push(
            Tensor::scalar(loss),
            Op::Dice {
                pred,
                target: target.data().to_vec(),
                eps,
            },
            "dice loss",
        )
    }

    /// Mean over columns of `-ln max(p[label], LOG_CLAMP)`.
    pub fn cross_entropy(&mut self, columns: &[Var], labels: &[usize]) -> Result<Var> {
        if columns.is_empty() || columns.len() != labels.len() {
            return Err(PimmsError::shape(format!(
                "cross_entropy: {} score columns, {} labels",
                columns.len(),
                labels.len()
            )));
        }
        let mut total = 0.0;
        for (&c, &label) in columns.iter().zip(labels) {
            let p = self.value(c);
            if label >= p.len() {
                return Err(PimmsError::shape(format!(
                    "label {label} outside score column of length {}",
                    p.len()
                )));
            }
            total -= p.data()[label].max(LOG_CLAMP).ln();
        }
        let loss = total / columns.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                columns: columns.to_vec(),
                labels: labels.to_vec(),
            },
            "cross entropy",
        )
    }

    /// Fingerprint of every non-smooth branch taken during the forward pass:
    /// ReLU signs, pooling argmaxes and log clamps. Two forward passes with
    /// the same fingerprint lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for &v in self.nodes[x.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::CrossEntropy { columns, labels } => {
                    i.hash(&mut h);
                    for (c, &l) in columns.iter().zip(labels) {
                        (self.nodes[c.0].value.data()[l] > LOG_CLAMP).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagate from a scalar `loss`. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(PimmsError::Tape(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(PimmsError::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the loss with respect to `v`, after [`Tape::backward`].
    /// Values that do not require a gradient, or are unreachable from the
    /// loss, get `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.as_ref()?[v.0].as_ref()?;
        Some(Tensor::new(self.value(v).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradients of all named parameters; unreachable ones are zero.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, d) in existing.iter_mut().zip(delta) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                window,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let c_in = x.channels();
                let c_out = k.shape()[3];
                let want_params = self.requires_grad(*kernel) || self.requires_grad(*bias);
                let gr = ops::conv2d_backward(
                    window,
                    x.data(),
                    c_in,
                    k.data(),
                    c_out,
                    g,
                    self.requires_grad(*input),
                    want_params,
                );
                if let Some(gi) = gr.input {
                    acc(*input, gi);
                }
                if let Some(gk) = gr.kernel {
                    acc(*kernel, gk);
                }
                if let Some(gb) = gr.bias {
                    acc(*bias, gb);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(*x, d);
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    if a != PAD_ARGMAX {
                        d[a as usize] += gv;
                    }
                }
                acc(*input, d);
            }
            Op::Softmax(x) => {
                let width = *node.value.shape().last().expect("shape");
                acc(*x, ops::softmax_rows_backward(node.value.data(), g, width));
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*weights);
                let o = w.shape()[1];
                if self.requires_grad(*input) {
                    let d = (0..x.len())
                        .map(|f| {
                            w.data()[f * o..(f + 1) * o]
                                .iter()
                                .zip(g)
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    acc(*input, d);
                }
                if self.requires_grad(*weights) {
                    let mut d = vec![0.0; w.len()];
                    for (f, &xv) in x.iter().enumerate() {
                        for (dst, &gv) in d[f * o..(f + 1) * o].iter_mut().zip(g) {
                            *dst = xv * gv;
                        }
                    }
                    acc(*weights, d);
                }
                acc(*bias, g.to_vec());
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, y.iter().zip(g).map(|(p, q)| p * q).collect());
                acc(*b, x.iter().zip(g).map(|(p, q)| p * q).collect());
            }
            Op::Scale(a, factor) => {
                acc(*a, g.iter().map(|v| v * factor).collect());
            }
            Op::Sum(a) => {
                acc(*a, vec![g[0]; self.value(*a).len()]);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let c = xv.channels();
                let n = (xv.len() / c) as f64;
                let d = (0..xv.len()).map(|i| g[i % c] / n).collect();
                acc(*x, d);
            }
            Op::Mix {
                inputs,
                columns,
                row,
            } => {
                for (&x, &col) in inputs.iter().zip(columns) {
                    let s = self.value(col).data()[*row];
                    acc(x, g.iter().map(|v| s * v).collect());
                    if self.requires_grad(col) {
                        let xv = self.value(x).data();
                        let mut d = vec![0.0; self.value(col).len()];
                        d[*row] = xv.iter().zip(g).map(|(a, b)| a * b).sum();
                        acc(col, d);
                    }
                }
            }
            Op::MeanVar(inputs) => {
                let k = self.value(inputs[0]).channels();
                let n = inputs.len() as f64;
                let stats = node.value.data();
                for &x in inputs {
                    let xv = self.value(x).data();
                    let d = xv
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| {
                            let (p, c) = (j / k, j % k);
                            let g_mean = g[p * 2 * k + c];
                            let g_var = g[p * 2 * k + k + c];
                            let mean = stats[p * 2 * k + c];
                            g_mean / n + g_var * 2.0 * (v - mean) / n
                        })
                        .collect();
                    acc(x, d);
                }
            }
            Op::Dice { pred, target, eps } => {
                let p = self.value(*pred).data();
                let lesion = p.iter().skip(1).step_by(2).copied();
                let (num, den) = ops::dice_terms(lesion, target, *eps);
                let mut d = vec![0.0; p.len()];
                for (j, &gv) in target.iter().enumerate() {
                    let pv = p[2 * j + 1];
                    d[2 * j + 1] = -g[0] * (2.0 * gv * den - num * 2.0 * pv) / (den * den);
                }
                acc(*pred, d);
            }
            Op::CrossEntropy { columns, labels } => {
                let n = columns.len() as f64;
                for (&c, &label) in columns.iter().zip(labels) {
                    let p = self.value(c).data();
                    let mut d = vec![0.0; p.len()];
                    if p[label] > LOG_CLAMP {
                        d[label] = -g[0] / (n * p[label]);
                    }
                    acc(c, d);
                }
            }
        }
    }
}

pub(crate) fn mean_var_forward(values: &[&[f64]], pixels: usize, k: usize) -> Vec<f64> {
    let n = values.len() as f64;
    let mut out = vec![0.0; pixels * 2 * k];
    for p in 0..pixels {
        for c in 0..k {
            let j = p * k + c;
            let mean = values.iter().map(|v| v[j]).sum::<f64>() / n;
            let var = values
                .iter()
                .map(|v| {
                    let d = v[j] - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            out[p * 2 * k + c] = mean;
            out[p * 2 * k + k + c] = var;
        }
    }
    out
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d {
            input,
            kernel,
            bias,
            ..
        } => vec![*input, *kernel, *bias],
        Op::Relu(x) | Op::Softmax(x) | Op::Sum(x) | Op::GlobalAvgPool(x) | Op::Scale(x, _) => {
            vec![*x]
        }
        Op::MaxPool { input, .. } => vec![*input],
        Op::Dense {
            input,
            weights,
            bias,
        } => vec![*input, *weights, *bias],
        Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Mix {
            inputs, columns, ..
        } => inputs.iter().chain(columns).copied().collect(),
        Op::MeanVar(inputs) => inputs.clone(),
        Op::Dice { pred, .. } => vec![*pred],
        Op::CrossEntropy { columns, .. } => columns.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_conv_is_multiply_add() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1], &[2.0])).unwrap();
        let k = tape.constant(t(&[1, 1, 1, 1], &[3.0])).unwrap();
        let b = tape.constant(t(&[1], &[1.0])).unwrap();
        let y = tape.conv2d(x, k, b, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
    }

    #[test]
    fn identity_kernel_leaves_input_unchanged() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = tape.constant(t(&[3, 4, 1], &data)).unwrap();
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = tape.constant(t(&[3, 3, 1, 1], &kd)).unwrap();
        let b = tape.constant(t(&[1], &[0.0])).unwrap();
        let y = tape.conv2d(x, k, b, 1, Padding::ZeroSame).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_non_finite_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 3, 2])).unwrap();
        let k = tape.constant(Tensor::zeros(&[3, 3, 1, 1])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        assert!(matches!(
            tape.conv2d(x, k, b, 1, Padding::Valid),
            Err(PimmsError::Shape(_))
        ));
        assert!(matches!(
            tape.constant(t(&[1, 1, 1], &[f64::NAN])),
            Err(PimmsError::NonFinite(_))
        ));
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, -3.0, -0.5])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[4, 4, 2], 0.7)).unwrap();
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 4, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));

        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 4.0);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 1])).unwrap();
        assert!(tape.maxpool2d(x).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[1000.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.5, -2.0, 0.25])).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let w = tape.constant(eye).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 0.25]);

        let w = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let b = tape.constant(t(&[2], &[4.0, -1.0])).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, -1.0]);

        let w = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(tape.dense(x, w, b).is_err());
    }

    #[test]
    fn backward_of_sum_and_zero_scaling() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -2.0])).unwrap();
        let z = tape.scale(x, 0.0).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(PimmsError::Tape(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(PimmsError::Tape(_))));
        assert!(tape.relu(x).is_err());
    }

    #[test]
    fn unreachable_values_have_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let y = tape.leaf(t(&[2], &[3.0, 4.0])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(y).is_none());
        let c = Tape::new();
        assert!(c.grad(x).is_none());
    }

    #[test]
    fn param_grads_default_to_zero() {
        let mut tape = Tape::new();
        let a = tape.param("a", &t(&[2], &[1.0, 2.0])).unwrap();
        tape.param("b", &t(&[1], &[5.0])).unwrap();
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        let g = tape.param_grads();
        assert_eq!(g["a"].data(), &[1.0, 1.0]);
        assert_eq!(g["b"].data(), &[0.0]);
    }

    #[test]
    fn mean_var_of_two() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1, 2], &[1.0, 4.0])).unwrap();
        let b = tape.constant(t(&[1, 1, 2], &[3.0, -2.0])).unwrap();
        let y = tape.mean_var(&[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 1.0, 1.0, 9.0]);
    }

    #[test]
    fn cross_entropy_checks_label_count() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[3], &[0.2, 0.3, 0.5])).unwrap();
        assert!(tape.cross_entropy(&[c], &[0, 1]).is_err());
        assert!(tape.cross_entropy(&[c], &[3]).is_err());
    }
}
