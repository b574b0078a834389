//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Every operator call appends one node holding its output and whatever it needs for the
//! backward pass. [`GradTape::backward`] walks the nodes in strict reverse order of
//! recording, so a node's gradient is complete before it is propagated to its inputs.

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvGeom, NormStats, Padding};
use crate::ops::NORM_EPS;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        input: Var,
        kernel: Tensor,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Normalize {
        input: Var,
        scale: Var,
        shift: Var,
        stats: NormStats,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Vec<Var>),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        clamped: Vec<bool>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::Depthwise { input, .. } | Op::MaxPool { input, .. } | Op::Affine { input, .. } => vec![*input],
            Op::Relu(a) | Op::Sigmoid(a) | Op::Tanh(a) | Op::Square(a) | Op::Sum(a) => vec![*a],
            Op::Normalize {
                input, scale, shift, ..
            } => vec![*input, *scale, *shift],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(v) | Op::Mean(v) => v.clone(),
            Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded record of executed operations.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`GradTape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; exact zeros when `var` does not reach the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0]),
        }
    }
}

/// Cross-entropy probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-12;

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient. Non-finite values are rejected.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.expect_finite("tape input")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input).shape(), self.value(weight).shape(), stride, padding)?;
        let bias_data = match bias {
            Some(b) => {
                let bs = self.value(b).shape();
                if bs != Shape::new(1, geom.o, 1, 1) {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        left: self.value(weight).shape(),
                        right: bs,
                    });
                }
                Some(self.value(b).data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(weight).data(), bias_data);
        Ok(self.push(
            Tensor::from_raw(geom.out_shape(), out),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Same-padded 3x3 depthwise correlation with a fixed (non-trainable) kernel.
    pub fn depthwise_conv3x3(&mut self, input: Var, kernel: &Tensor) -> Result<Var> {
        let shape = self.value(input).shape();
        kernels::check_depthwise_kernel(shape, kernel)?;
        let out = kernels::depthwise_forward(shape, self.value(input).data(), kernel.data());
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Depthwise {
                input,
                kernel: kernel.clone(),
            },
        ))
    }

    pub fn max_pool2x2(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        if s.height() < 2 || s.width() < 2 {
            return Err(invalid(format!("max_pool2x2 needs spatial dims >= 2, got {s}")));
        }
        let (shape, out, argmax) = kernels::max_pool2x2_forward(s, self.value(input).data());
        Ok(self.push(Tensor::from_raw(shape, out), Op::MaxPool { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(0.0));
        self.push(out, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(input))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let out = self.value(input).map(f64::tanh);
        self.push(out, Op::Tanh(input))
    }

    pub fn normalize(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let expect = Shape::new(1, shape.channels(), 1, 1);
        for p in [scale, shift] {
            if self.value(p).shape() != expect {
                return Err(Error::ShapeMismatch {
                    op: "normalize_channels",
                    left: shape,
                    right: self.value(p).shape(),
                });
            }
        }
        let (out, stats) = kernels::normalize_forward(
            shape,
            self.value(input).data(),
            self.value(scale).data(),
            self.value(shift).data(),
            NORM_EPS,
        );
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Normalize {
                input,
                scale,
                shift,
                stats,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    /// `scale * x + offset`, elementwise.
    pub fn affine(&mut self, input: Var, scale: f64, offset: f64) -> Var {
        let out = self.value(input).map(|v| scale * v + offset);
        self.push(out, Op::Affine { input, scale })
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = crate::ops::concat_channels(&parts)?;
        Ok(self.push(out, Op::Concat(inputs.to_vec())))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    /// Elementwise mean of same-shaped values.
    pub fn mean_of(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| invalid("mean of zero tensors"))?;
        let shape = self.value(first).shape();
        let mut acc = vec![0.0; shape.numel()];
        for v in inputs {
            let t = self.value(*v);
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "mean_of",
                    left: shape,
                    right: t.shape(),
                });
            }
            for (a, x) in acc.iter_mut().zip(t.data()) {
                *a += x;
            }
        }
        let k = inputs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        Ok(self.push(Tensor::from_raw(shape, acc), Op::Mean(inputs.to_vec())))
    }

    /// Fully connected layer over each flattened batch item.
    ///
    /// `weight` is `(out, in, 1, 1)` with `in = c * h * w`; `bias` is `(1, out, 1, 1)`. Output is `(n, out, 1, 1)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        let per_item = xs.channels() * xs.plane();
        let [out_dim, in_dim, one_a, one_b] = ws.0;
        if in_dim != per_item || one_a != 1 || one_b != 1 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xs,
                right: ws,
            });
        }
        if self.value(bias).shape() != Shape::new(1, out_dim, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: ws,
                right: self.value(bias).shape(),
            });
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let n = xs.batch();
        let mut out = Vec::with_capacity(n * out_dim);
        for item in x.chunks(per_item) {
            for o in 0..out_dim {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                out.push(b[o] + row.iter().zip(item).map(|(a, c)| a * c).sum::<f64>());
            }
        }
        Ok(self.push(
            Tensor::from_raw(Shape::new(n, out_dim, 1, 1), out),
            Op::Linear { input, weight, bias },
        ))
    }

    /// Mean over the batch of `-ln(clamp(softmax(logits)[label]))`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape();
        let k = s.channels();
        if s.plane() != 1 || s.batch() != labels.len() {
            return Err(invalid(format!(
                "softmax_cross_entropy wants (n, k, 1, 1) logits with n labels, got {s} and {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), k);
        let mut loss = 0.0;
        let mut clamped = Vec::with_capacity(labels.len());
        for (i, &l) in labels.iter().enumerate() {
            let p = probs[i * k + l];
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            clamped.push(pc != p);
            loss -= pc.ln();
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
                clamped,
            },
        ))
    }

    /// Propagates d(loss)/d(node) to every recorded value. The tape can be used only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let ls = self.value(loss).shape();
        if !ls.is_scalar() {
            return Err(Error::NonScalarLoss(ls));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_raw(n.value.shape(), g)))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                acc(*input, &mut |gi| kernels::conv2d_grad_input(geom, g, w, gi));
                acc(*weight, &mut |gw| kernels::conv2d_grad_weight(geom, g, x, gw));
                if let Some(b) = bias {
                    acc(*b, &mut |gb| kernels::conv2d_grad_bias(geom, g, gb));
                }
            }
            Op::Depthwise { input, kernel } => {
                let shape = self.value(*input).shape();
                acc(*input, &mut |gi| kernels::depthwise_grad_input(shape, g, kernel.data(), gi));
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |gi| {
                for (go, &src) in g.iter().zip(argmax) {
                    gi[src] += go;
                }
            }),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |gi| {
                    for ((gi, go), xv) in gi.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *gi += go;
                        }
                    }
                })
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |gi| {
                    for ((gi, go), yv) in gi.iter_mut().zip(g).zip(y) {
                        *gi += go * yv * (1.0 - yv);
                    }
                })
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |gi| {
                    for ((gi, go), yv) in gi.iter_mut().zip(g).zip(y) {
                        *gi += go * (1.0 - yv * yv);
                    }
                })
            }
            Op::Normalize {
                input,
                scale,
                shift,
                stats,
            } => {
                let shape = self.value(*input).shape();
                let (gx, gs, gb) = kernels::normalize_backward(shape, g, stats, self.value(*scale).data());
                acc(*input, &mut |gi| add_into(gi, &gx));
                acc(*scale, &mut |gi| add_into(gi, &gs));
                acc(*shift, &mut |gi| add_into(gi, &gb));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |gi| add_into(gi, g));
                acc(*b, &mut |gi| add_into(gi, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |gi| add_into(gi, g));
                acc(*b, &mut |gi| gi.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |gi| {
                    for i in 0..gi.len() {
                        gi[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gi| {
                    for i in 0..gi.len() {
                        gi[i] += g[i] * av[i];
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |gi| {
                    for i in 0..gi.len() {
                        gi[i] += 2.0 * x[i] * g[i];
                    }
                })
            }
            Op::Affine { input, scale } => acc(*input, &mut |gi| {
                gi.iter_mut().zip(g).for_each(|(x, y)| *x += scale * y)
            }),
            Op::Concat(inputs) => {
                let [n, total, h, w] = node.value.shape().0;
                let plane = h * w;
                let mut offset = 0;
                for v in inputs {
                    let c = self.value(*v).shape().channels();
                    if wants(*v) {
                        acc(*v, &mut |gi| {
                            for b in 0..n {
                                let src = &g[(b * total + offset) * plane..(b * total + offset + c) * plane];
                                add_into(&mut gi[b * c * plane..(b + 1) * c * plane], src);
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                acc(*a, &mut |gi| gi.iter_mut().for_each(|x| *x += s))
            }
            Op::Mean(inputs) => {
                let k = 1.0 / inputs.len() as f64;
                for v in inputs {
                    acc(*v, &mut |gi| gi.iter_mut().zip(g).for_each(|(x, y)| *x += k * y));
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let [out_dim, in_dim, _, _] = self.value(*weight).shape().0;
                acc(*input, &mut |gi| {
                    for (b, gi_item) in gi.chunks_mut(in_dim).enumerate() {
                        for o in 0..out_dim {
                            let go = g[b * out_dim + o];
                            let row = &w[o * in_dim..(o + 1) * in_dim];
                            gi_item.iter_mut().zip(row).for_each(|(a, r)| *a += go * r);
                        }
                    }
                });
                acc(*weight, &mut |gw| {
                    for (b, item) in x.chunks(in_dim).enumerate() {
                        for o in 0..out_dim {
                            let go = g[b * out_dim + o];
                            gw[o * in_dim..(o + 1) * in_dim]
                                .iter_mut()
                                .zip(item)
                                .for_each(|(a, xv)| *a += go * xv);
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for row in g.chunks(out_dim) {
                        add_into(gb, row);
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
                clamped,
            } => {
                let k = self.value(*logits).shape().channels();
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |gi| {
                    for (i, &l) in labels.iter().enumerate() {
                        if clamped[i] {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gi[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
