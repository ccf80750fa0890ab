use std::cell::RefCell;
use std::collections::HashMap;

use super::conv;
use super::norm;
use super::{Real, Shape, TensorBuf};
use crate::error::{Error, Result};

/// Handle to a node in a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Hadamard,
}

/// Epsilon inside the cross-entropy log.
pub const CE_EPSILON: f64 = 1e-8;

enum Op<R> {
    Leaf,
    Pointwise {
        x: TensorId,
        kind: Pointwise,
    },
    Elementwise {
        a: TensorId,
        b: TensorId,
        kind: Elementwise,
    },
    ChannelSoftmax {
        x: TensorId,
    },
    ChannelConcat {
        a: TensorId,
        b: TensorId,
    },
    ChannelSlice {
        x: TensorId,
        from: usize,
    },
    Scale {
        x: TensorId,
        k: R,
    },
    Sum {
        x: TensorId,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
    },
    TransposedConv2d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
    },
    MaxPool {
        x: TensorId,
        argmax: Vec<u32>,
    },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<R>,
        inv_std: Vec<R>,
    },
    BatchNormInfer {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<R>,
        var: Vec<R>,
    },
    WeightedCrossEntropy {
        probs: TensorId,
        labels: Vec<u8>,
        weights: Vec<R>,
    },
}

impl<R> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Pointwise { kind: Pointwise::Relu, .. } => "relu",
            Op::Pointwise { kind: Pointwise::Sigmoid, .. } => "sigmoid",
            Op::Pointwise { kind: Pointwise::Tanh, .. } => "tanh",
            Op::Elementwise { kind: Elementwise::Add, .. } => "add",
            Op::Elementwise { kind: Elementwise::Hadamard, .. } => "hadamard",
            Op::ChannelSoftmax { .. } => "channel_softmax",
            Op::ChannelConcat { .. } => "channel_concat",
            Op::ChannelSlice { .. } => "channel_slice",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Conv2d { .. } => "conv2d",
            Op::TransposedConv2d { .. } => "transposed_conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::BatchNormTrain { .. } => "batchnorm_train",
            Op::BatchNormInfer { .. } => "batchnorm_infer",
            Op::WeightedCrossEntropy { .. } => "weighted_cross_entropy",
        }
    }
}

/// Names of every differentiable operation the tape can record, in a fixed
/// order. The gradient-check suite asserts coverage against this list.
pub const OP_NAMES: &[&str] = &[
    "conv2d",
    "transposed_conv2d",
    "maxpool2d",
    "relu",
    "sigmoid",
    "tanh",
    "channel_softmax",
    "channel_concat",
    "channel_slice",
    "add",
    "hadamard",
    "batchnorm_train",
    "batchnorm_infer",
    "scale",
    "sum",
    "weighted_cross_entropy",
];

struct Node<R> {
    shape: Shape,
    values: Vec<R>,
    grad: RefCell<Option<Vec<R>>>,
    op: Op<R>,
}

/// A reverse-mode computation graph. Operations append nodes eagerly
/// (define-by-run); [`Tape::backward`] walks the nodes in reverse and
/// accumulates gradients into every node on a path to the loss.
///
/// A tape is confined to one thread. Build one per forward pass.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    keyed: HashMap<u64, TensorId>,
    keyed_order: Vec<(u64, TensorId)>,
    ran_backward: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            keyed: HashMap::new(),
            keyed_order: Vec::new(),
            ran_backward: false,
        }
    }

    fn push(&mut self, shape: Shape, values: Vec<R>, op: Op<R>) -> TensorId {
        debug_assert_eq!(values.len(), shape.len());
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node {
            shape,
            values,
            grad: RefCell::new(None),
            op,
        });
        id
    }

    fn node(&self, id: TensorId) -> &Node<R> {
        &self.nodes[id.0 as usize]
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.node(id).shape
    }

    pub fn values(&self, id: TensorId) -> &[R] {
        &self.node(id).values
    }

    /// Gradient of the last `backward` target w.r.t. this node, if reached.
    pub fn grad(&self, id: TensorId) -> Option<Vec<R>> {
        self.node(id).grad.borrow().clone()
    }

    pub fn to_buf(&self, id: TensorId) -> TensorBuf<R> {
        TensorBuf {
            shape: self.shape(id),
            values: self.values(id).to_vec(),
        }
    }

    /// Value of a scalar-shaped node.
    pub fn scalar(&self, id: TensorId) -> Result<R> {
        if !self.shape(id).is_scalar() {
            return Err(Error::contract(format!(
                "expected scalar tensor, got shape {}",
                self.shape(id)
            )));
        }
        Ok(self.values(id)[0])
    }

    pub fn op_name(&self, id: TensorId) -> &'static str {
        self.node(id).op.name()
    }

    // ---- leaves ------------------------------------------------------------

    /// Non-learnable leaf (network input, injected constant).
    pub fn input(&mut self, buf: &TensorBuf<R>) -> TensorId {
        self.push(buf.shape, buf.values.clone(), Op::Leaf)
    }

    pub fn input_owned(&mut self, shape: Shape, values: Vec<R>) -> Result<TensorId> {
        if values.len() != shape.len() {
            return Err(Error::shape(format!(
                "leaf value count {} does not match shape {}",
                values.len(),
                shape
            )));
        }
        Ok(self.push(shape, values, Op::Leaf))
    }

    pub fn zeros(&mut self, shape: Shape) -> TensorId {
        self.push(shape, vec![R::zero(); shape.len()], Op::Leaf)
    }

    /// Leaf memoized by an external key. Repeated registration of the same key
    /// (a shared weight used in both rounds) returns the same node, so its
    /// gradient accumulates across every use.
    pub fn leaf_keyed(
        &mut self,
        key: u64,
        make: impl FnOnce() -> (Shape, Vec<R>),
    ) -> TensorId {
        if let Some(&id) = self.keyed.get(&key) {
            return id;
        }
        let (shape, values) = make();
        let id = self.push(shape, values, Op::Leaf);
        self.keyed.insert(key, id);
        self.keyed_order.push((key, id));
        id
    }

    /// Keyed leaves in registration order with their gradients (if any).
    pub fn keyed_grads(&self) -> impl Iterator<Item = (u64, Option<Vec<R>>)> + '_ {
        self.keyed_order
            .iter()
            .map(move |&(key, id)| (key, self.grad(id)))
    }

    // ---- pointwise / elementwise -------------------------------------------

    pub fn pointwise(&mut self, x: TensorId, kind: Pointwise) -> TensorId {
        let xs = self.shape(x);
        let out = self
            .values(x)
            .iter()
            .map(|&v| apply_pointwise(v, kind))
            .collect();
        self.push(xs, out, Op::Pointwise { x, kind })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.pointwise(x, Pointwise::Relu)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.pointwise(x, Pointwise::Sigmoid)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.pointwise(x, Pointwise::Tanh)
    }

    pub fn elementwise(&mut self, a: TensorId, b: TensorId, kind: Elementwise) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape(format!(
                "elementwise operands differ: {} vs {}",
                sa, sb
            )));
        }
        let out = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&u, &v)| match kind {
                Elementwise::Add => u + v,
                Elementwise::Hadamard => u * v,
            })
            .collect();
        Ok(self.push(sa, out, Op::Elementwise { a, b, kind }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, Elementwise::Hadamard)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: TensorId, k: R) -> TensorId {
        let xs = self.shape(x);
        let out = self.values(x).iter().map(|&v| v * k).collect();
        self.push(xs, out, Op::Scale { x, k })
    }

    /// Sum of all elements, as a (1,1,1,1) tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let mut acc = 0.0f64;
        for &v in self.values(x) {
            acc += v.to_f64();
        }
        self.push(Shape::scalar(), vec![R::from_f64(acc)], Op::Sum { x })
    }

    // ---- channel ops ---------------------------------------------------------

    /// Per-pixel softmax across the channel axis (max-subtracted).
    pub fn channel_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.c < 2 {
            return Err(Error::shape(format!(
                "channel_softmax needs >= 2 channels, got shape {}",
                s
            )));
        }
        let xv = self.values(x);
        let mut out = vec![R::zero(); xv.len()];
        let plane = s.plane();
        for n in 0..s.n {
            let base = n * s.c * plane;
            for p in 0..plane {
                let mut max = R::neg_infinity();
                for c in 0..s.c {
                    let v = xv[base + c * plane + p];
                    if v > max {
                        max = v;
                    }
                }
                let mut denom = R::zero();
                for c in 0..s.c {
                    let e = (xv[base + c * plane + p] - max).exp();
                    out[base + c * plane + p] = e;
                    denom = denom + e;
                }
                for c in 0..s.c {
                    out[base + c * plane + p] = out[base + c * plane + p] / denom;
                }
            }
        }
        Ok(self.push(s, out, Op::ChannelSoftmax { x }))
    }

    /// Stack `a`'s channels before `b`'s. Spatial and batch dims must match.
    pub fn channel_concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::shape(format!(
                "channel_concat needs matching batch/spatial dims: {} vs {}",
                sa, sb
            )));
        }
        let s = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w)?;
        let plane = sa.plane();
        let mut out = vec![R::zero(); s.len()];
        let (av, bv) = (self.values(a), self.values(b));
        for n in 0..s.n {
            let dst = n * s.c * plane;
            out[dst..dst + sa.c * plane]
                .copy_from_slice(&av[n * sa.c * plane..(n + 1) * sa.c * plane]);
            out[dst + sa.c * plane..dst + s.c * plane]
                .copy_from_slice(&bv[n * sb.c * plane..(n + 1) * sb.c * plane]);
        }
        Ok(self.push(s, out, Op::ChannelConcat { a, b }))
    }

    /// Channels `[from, to)` of `x`.
    pub fn channel_slice(&mut self, x: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if from >= to || to > sx.c {
            return Err(Error::shape(format!(
                "channel_slice [{},{}) out of range for {} channels",
                from, to, sx.c
            )));
        }
        let s = Shape::new(sx.n, to - from, sx.h, sx.w)?;
        let plane = sx.plane();
        let mut out = vec![R::zero(); s.len()];
        let xv = self.values(x);
        for n in 0..s.n {
            let src = (n * sx.c + from) * plane;
            let dst = n * s.c * plane;
            out[dst..dst + s.c * plane].copy_from_slice(&xv[src..src + s.c * plane]);
        }
        Ok(self.push(s, out, Op::ChannelSlice { x, from }))
    }

    // ---- structured ops ------------------------------------------------------

    /// 3x3 cross-correlation with zero padding 1 (spatial size preserved).
    /// `w` has shape (cout, cin, 3, 3); optional bias has shape (cout,1,1,1).
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h != 3 || ws.w != 3 {
            return Err(Error::shape(format!(
                "conv2d kernels are fixed at 3x3, got {}x{}",
                ws.h, ws.w
            )));
        }
        if ws.c != xs.c {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {} channels, weight expects {}",
                xs.c, ws.c
            )));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.len() != ws.n {
                return Err(Error::shape(format!(
                    "conv2d bias has {} elements, expected {}",
                    bs.len(),
                    ws.n
                )));
            }
        }
        let out_shape = Shape::new(xs.n, ws.n, xs.h, xs.w)?;
        let bias = b.map(|b| self.values(b).to_vec());
        let out = conv::conv2d_forward(
            self.values(x),
            xs,
            self.values(w),
            ws.n,
            bias.as_deref(),
        );
        Ok(self.push(out_shape, out, Op::Conv2d { x, w, b }))
    }

    /// Stride-2 2x2 transposed convolution (spatial dims double).
    /// `w` has shape (cin, cout, 2, 2); optional bias has shape (cout,1,1,1).
    pub fn transposed_conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
    ) -> Result<TensorId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h != 2 || ws.w != 2 {
            return Err(Error::shape(format!(
                "transposed_conv2d kernels are fixed at 2x2, got {}x{}",
                ws.h, ws.w
            )));
        }
        if ws.n != xs.c {
            return Err(Error::shape(format!(
                "transposed_conv2d channel mismatch: input has {} channels, weight expects {}",
                xs.c, ws.n
            )));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.len() != ws.c {
                return Err(Error::shape(format!(
                    "transposed_conv2d bias has {} elements, expected {}",
                    bs.len(),
                    ws.c
                )));
            }
        }
        let out_shape = Shape::new(xs.n, ws.c, xs.h * 2, xs.w * 2)?;
        let bias = b.map(|b| self.values(b).to_vec());
        let out = conv::transposed_conv2d_forward(
            self.values(x),
            xs,
            self.values(w),
            ws.c,
            bias.as_deref(),
        );
        Ok(self.push(out_shape, out, Op::TransposedConv2d { x, w, b }))
    }

    /// 2x2/stride-2 max pooling. Gradient flows to the first (row-major)
    /// maximum of each window.
    pub fn maxpool2d(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2d needs even spatial dims, got {}x{}",
                xs.h, xs.w
            )));
        }
        let out_shape = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2)?;
        let (out, argmax) = conv::maxpool2d_forward(self.values(x), xs);
        Ok(self.push(out_shape, out, Op::MaxPool { x, argmax }))
    }

    /// Batch normalization over (n, h, w) per channel, training statistics.
    /// Returns the output plus the batch mean and (biased) variance per
    /// channel so the caller can maintain running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(TensorId, Vec<R>, Vec<R>)> {
        let xs = self.shape(x);
        self.check_bn_params(xs, gamma, beta)?;
        if xs.n * xs.plane() < 2 {
            return Err(Error::contract(format!(
                "batchnorm training needs n*h*w >= 2 per channel, got shape {}",
                xs
            )));
        }
        let (out, mean, var, inv_std) =
            norm::batchnorm_train_forward(self.values(x), xs, self.values(gamma), self.values(beta));
        let id = self.push(
            xs,
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
        );
        Ok((id, mean, var))
    }

    /// Batch normalization using frozen running statistics (inference mode).
    pub fn batchnorm_infer(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[R],
        var: &[R],
    ) -> Result<TensorId> {
        let xs = self.shape(x);
        self.check_bn_params(xs, gamma, beta)?;
        if mean.len() != xs.c || var.len() != xs.c {
            return Err(Error::shape(format!(
                "running stats have {}/{} entries, expected {} channels",
                mean.len(),
                var.len(),
                xs.c
            )));
        }
        let out = norm::batchnorm_infer_forward(
            self.values(x),
            xs,
            self.values(gamma),
            self.values(beta),
            mean,
            var,
        );
        Ok(self.push(
            xs,
            out,
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                var: var.to_vec(),
            },
        ))
    }

    fn check_bn_params(&self, xs: Shape, gamma: TensorId, beta: TensorId) -> Result<()> {
        let gs = self.shape(gamma);
        let bs = self.shape(beta);
        if gs.len() != xs.c || bs.len() != xs.c {
            return Err(Error::shape(format!(
                "batchnorm gamma/beta have {}/{} elements, expected {} channels",
                gs.len(),
                bs.len(),
                xs.c
            )));
        }
        Ok(())
    }

    /// Class-weighted softmax cross-entropy against per-pixel integer labels:
    /// `-(1/N) * sum_px weights[label] * ln(probs[label] + 1e-8)` with
    /// `N = n*h*w`. `probs` is expected to already sum to 1 per pixel.
    pub fn weighted_cross_entropy(
        &mut self,
        probs: TensorId,
        labels: &[u8],
        weights: &[R],
    ) -> Result<TensorId> {
        let s = self.shape(probs);
        if labels.len() != s.n * s.plane() {
            return Err(Error::shape(format!(
                "label count {} does not match {} pixels",
                labels.len(),
                s.n * s.plane()
            )));
        }
        if weights.len() != s.c {
            return Err(Error::shape(format!(
                "{} class weights for {} channels",
                weights.len(),
                s.c
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= s.c) {
            return Err(Error::data(format!(
                "label {} out of range for {} classes",
                bad, s.c
            )));
        }
        let pv = self.values(probs);
        let plane = s.plane();
        let inv_n = 1.0 / (s.n * plane) as f64;
        let mut acc = 0.0f64;
        for n in 0..s.n {
            let base = n * s.c * plane;
            for p in 0..plane {
                let l = labels[n * plane + p] as usize;
                let prob = pv[base + l * plane + p].to_f64();
                acc -= weights[l].to_f64() * (prob + CE_EPSILON).ln();
            }
        }
        let value = R::from_f64(acc * inv_n);
        Ok(self.push(
            Shape::scalar(),
            vec![value],
            Op::WeightedCrossEntropy {
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Populates the gradient of every
    /// node the loss depends on; gradients accumulate (`+=`) into nodes used
    /// by multiple consumers, including keyed leaves reused across rounds.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.shape(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward target must be scalar-shaped (1,1,1,1), got {}",
                self.shape(loss)
            )));
        }
        if self.ran_backward {
            return Err(Error::contract(
                "backward was already run on this tape".to_string(),
            ));
        }
        self.ran_backward = true;
        *self.nodes[loss.0 as usize].grad.borrow_mut() = Some(vec![R::one()]);

        for i in (0..=loss.0 as usize).rev() {
            // Nodes recorded after the loss cannot influence it.
            let g_out = {
                let g = self.nodes[i].grad.borrow();
                match g.as_ref() {
                    Some(_) => g,
                    None => continue,
                }
            };
            let g_out = g_out.as_ref().expect("checked above");
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Pointwise { x, kind } => {
                    let xv = self.values(*x);
                    let yv = &node.values;
                    self.accumulate(*x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g_out[j] * pointwise_derivative(xv[j], yv[j], *kind);
                        }
                    });
                }
                Op::Elementwise { a, b, kind } => match kind {
                    Elementwise::Add => {
                        self.accumulate(*a, |ga| {
                            for j in 0..ga.len() {
                                ga[j] += g_out[j];
                            }
                        });
                        self.accumulate(*b, |gb| {
                            for j in 0..gb.len() {
                                gb[j] += g_out[j];
                            }
                        });
                    }
                    Elementwise::Hadamard => {
                        let (av, bv) = (self.values(*a), self.values(*b));
                        self.accumulate(*a, |ga| {
                            for j in 0..ga.len() {
                                ga[j] += g_out[j] * bv[j];
                            }
                        });
                        self.accumulate(*b, |gb| {
                            for j in 0..gb.len() {
                                gb[j] += g_out[j] * av[j];
                            }
                        });
                    }
                },
                Op::ChannelSoftmax { x } => {
                    let s = node.shape;
                    let yv = &node.values;
                    let plane = s.plane();
                    self.accumulate(*x, |gx| {
                        for n in 0..s.n {
                            let base = n * s.c * plane;
                            for p in 0..plane {
                                let mut dot = R::zero();
                                for c in 0..s.c {
                                    let k = base + c * plane + p;
                                    dot = dot + g_out[k] * yv[k];
                                }
                                for c in 0..s.c {
                                    let k = base + c * plane + p;
                                    gx[k] += yv[k] * (g_out[k] - dot);
                                }
                            }
                        }
                    });
                }
                Op::ChannelConcat { a, b } => {
                    let s = node.shape;
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let plane = s.plane();
                    self.accumulate(*a, |ga| {
                        for n in 0..s.n {
                            let src = n * s.c * plane;
                            let dst = n * sa.c * plane;
                            for j in 0..sa.c * plane {
                                ga[dst + j] += g_out[src + j];
                            }
                        }
                    });
                    self.accumulate(*b, |gb| {
                        for n in 0..s.n {
                            let src = n * s.c * plane + sa.c * plane;
                            let dst = n * sb.c * plane;
                            for j in 0..sb.c * plane {
                                gb[dst + j] += g_out[src + j];
                            }
                        }
                    });
                }
                Op::ChannelSlice { x, from } => {
                    let s = node.shape;
                    let sx = self.shape(*x);
                    let plane = s.plane();
                    self.accumulate(*x, |gx| {
                        for n in 0..s.n {
                            let dst = (n * sx.c + from) * plane;
                            let src = n * s.c * plane;
                            for j in 0..s.c * plane {
                                gx[dst + j] += g_out[src + j];
                            }
                        }
                    });
                }
                Op::Scale { x, k } => {
                    let k = *k;
                    self.accumulate(*x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g_out[j] * k;
                        }
                    });
                }
                Op::Sum { x } => {
                    let g = g_out[0];
                    self.accumulate(*x, |gx| {
                        for v in gx.iter_mut() {
                            *v += g;
                        }
                    });
                }
                Op::Conv2d { x, w, b } => {
                    let xs = self.shape(*x);
                    let ws = self.shape(*w);
                    let xv = self.values(*x);
                    let wv = self.values(*w);
                    self.accumulate(*w, |gw| {
                        conv::conv2d_backward_weight(xv, xs, g_out, ws.n, gw);
                    });
                    self.accumulate(*x, |gx| {
                        conv::conv2d_backward_input(wv, ws, g_out, xs, gx);
                    });
                    if let Some(b) = b {
                        self.accumulate(*b, |gb| {
                            conv::channel_bias_backward(g_out, xs.n, ws.n, xs.plane(), gb);
                        });
                    }
                }
                Op::TransposedConv2d { x, w, b } => {
                    let xs = self.shape(*x);
                    let ws = self.shape(*w);
                    let cout = ws.c;
                    let xv = self.values(*x);
                    let wv = self.values(*w);
                    self.accumulate(*w, |gw| {
                        conv::transposed_conv2d_backward_weight(xv, xs, g_out, cout, gw);
                    });
                    self.accumulate(*x, |gx| {
                        conv::transposed_conv2d_backward_input(wv, xs, g_out, cout, gx);
                    });
                    if let Some(b) = b {
                        self.accumulate(*b, |gb| {
                            conv::channel_bias_backward(g_out, xs.n, cout, xs.plane() * 4, gb);
                        });
                    }
                }
                Op::MaxPool { x, argmax } => {
                    self.accumulate(*x, |gx| {
                        for (o, &src) in argmax.iter().enumerate() {
                            gx[src as usize] += g_out[o];
                        }
                    });
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let xs = self.shape(*x);
                    let xv = self.values(*x);
                    let gv = self.values(*gamma);
                    let stats = norm::batchnorm_backward_stats(xv, xs, g_out, mean, inv_std);
                    self.accumulate(*gamma, |gg| {
                        for c in 0..xs.c {
                            gg[c] += stats.d_gamma[c];
                        }
                    });
                    self.accumulate(*beta, |gb| {
                        for c in 0..xs.c {
                            gb[c] += stats.d_beta[c];
                        }
                    });
                    self.accumulate(*x, |gx| {
                        norm::batchnorm_backward_input(
                            xv, xs, g_out, mean, inv_std, gv, &stats, gx,
                        );
                    });
                }
                Op::BatchNormInfer {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let xs = self.shape(*x);
                    let xv = self.values(*x);
                    let gv = self.values(*gamma);
                    let (d_gamma, d_beta) = norm::batchnorm_infer_stats(xv, xs, g_out, mean, var);
                    self.accumulate(*gamma, |gg| {
                        for c in 0..xs.c {
                            gg[c] += d_gamma[c];
                        }
                    });
                    self.accumulate(*beta, |gb| {
                        for c in 0..xs.c {
                            gb[c] += d_beta[c];
                        }
                    });
                    self.accumulate(*x, |gx| {
                        norm::batchnorm_infer_backward_input(xs, g_out, var, gv, gx);
                    });
                }
                Op::WeightedCrossEntropy {
                    probs,
                    labels,
                    weights,
                } => {
                    let s = self.shape(*probs);
                    let pv = self.values(*probs);
                    let plane = s.plane();
                    let inv_n = R::from_f64(1.0 / (s.n * plane) as f64);
                    let eps = R::from_f64(CE_EPSILON);
                    let g = g_out[0];
                    self.accumulate(*probs, |gp| {
                        for n in 0..s.n {
                            let base = n * s.c * plane;
                            for p in 0..plane {
                                let l = labels[n * plane + p] as usize;
                                let k = base + l * plane + p;
                                gp[k] -= g * inv_n * weights[l] / (pv[k] + eps);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Run `f` on the zero-initialized (or existing) gradient buffer of `id`.
    fn accumulate(&self, id: TensorId, f: impl FnOnce(&mut [R])) {
        let node = self.node(id);
        let mut slot = node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![R::zero(); node.shape.len()]);
        f(buf);
    }
}

#[inline]
fn apply_pointwise<R: Real>(v: R, kind: Pointwise) -> R {
    match kind {
        Pointwise::Relu => {
            if v > R::zero() {
                v
            } else {
                R::zero()
            }
        }
        Pointwise::Sigmoid => {
            // Split by sign so exp never overflows.
            if v >= R::zero() {
                R::one() / (R::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (R::one() + e)
            }
        }
        Pointwise::Tanh => v.tanh(),
    }
}

#[inline]
fn pointwise_derivative<R: Real>(x: R, y: R, kind: Pointwise) -> R {
    match kind {
        Pointwise::Relu => {
            if x > R::zero() {
                R::one()
            } else {
                R::zero()
            }
        }
        Pointwise::Sigmoid => y * (R::one() - y),
        Pointwise::Tanh => R::one() - y * y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buf(shape: (usize, usize, usize, usize), values: Vec<f64>) -> TensorBuf<f64> {
        TensorBuf::new(Shape::new(shape.0, shape.1, shape.2, shape.3).unwrap(), values).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.input(&buf((1, 1, 2, 2), vec![1.0, -2.0, 3.0, 0.5]));
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn hadamard_square_gradient_is_2x() {
        let mut t = Tape::<f64>::new();
        let x = t.input(&buf((1, 1, 1, 3), vec![1.0, -2.0, 3.0]));
        let y = t.hadamard(x, x).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn reused_leaf_accumulates_like_reparameterized_graph() {
        // loss = sum(x + x) must give the same grad as loss = sum(scale(x, 2)).
        let values = vec![0.3, -1.2, 4.0, 0.0];
        let mut t1 = Tape::<f64>::new();
        let x1 = t1.input(&buf((1, 1, 2, 2), values.clone()));
        let s1 = t1.add(x1, x1).unwrap();
        let l1 = t1.sum(s1);
        t1.backward(l1).unwrap();

        let mut t2 = Tape::<f64>::new();
        let x2 = t2.input(&buf((1, 1, 2, 2), values));
        let s2 = t2.scale(x2, 2.0);
        let l2 = t2.sum(s2);
        t2.backward(l2).unwrap();

        assert_eq!(t1.grad(x1).unwrap(), t2.grad(x2).unwrap());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let x = t.input(&buf((1, 1, 2, 2), vec![0.0; 4]));
        assert!(matches!(
            t.backward(x),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn backward_runs_once() {
        let mut t = Tape::<f64>::new();
        let x = t.input(&buf((1, 1, 1, 1), vec![2.0]));
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert!(t.backward(l).is_err());
    }

    #[test]
    fn softmax_examples() {
        // Equal logits over 4 channels -> 0.25 each.
        let mut t = Tape::<f64>::new();
        let x = t.input(&buf((1, 4, 1, 1), vec![0.7; 4]));
        let y = t.channel_softmax(x).unwrap();
        for &v in t.values(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }

        // Logits (ln1, ln2, ln3, ln4) -> (0.1, 0.2, 0.3, 0.4).
        let mut t = Tape::<f64>::new();
        let x = t.input(&buf(
            (1, 4, 1, 1),
            vec![1f64.ln(), 2f64.ln(), 3f64.ln(), 4f64.ln()],
        ));
        let y = t.channel_softmax(x).unwrap();
        let got = t.values(y);
        for (g, e) in got.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((g - e).abs() < 1e-12, "got {:?}", got);
        }

        // Shift invariance.
        let mut t = Tape::<f64>::new();
        let x = t.input(&buf((1, 4, 1, 1), vec![1f64.ln() + 5.0, 2f64.ln() + 5.0, 3f64.ln() + 5.0, 4f64.ln() + 5.0]));
        let y = t.channel_softmax(x).unwrap();
        for (g, e) in t.values(y).iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_large_inputs() {
        let mut t = Tape::<f64>::new();
        let x = t.input(&buf((1, 1, 1, 2), vec![30.0, -30.0]));
        let y = t.sigmoid(x);
        let got = t.values(y);
        let expect_hi = 1.0 / (1.0 + (-30.0f64).exp());
        let expect_lo = 1.0 / (1.0 + 30.0f64.exp());
        assert!((got[0] - expect_hi).abs() < 1e-15);
        assert!((got[1] - expect_lo).abs() < 1e-15);

        // No overflow in f32 either, far beyond exp range.
        let mut t = Tape::<f32>::new();
        let x = t
            .input_owned(Shape::new(1, 1, 1, 2).unwrap(), vec![200.0f32, -200.0])
            .unwrap();
        let y = t.sigmoid(x);
        assert_eq!(t.values(y)[0], 1.0);
        assert_eq!(t.values(y)[1], 0.0);
    }

    #[test]
    fn relu_and_tanh_basics() {
        let mut t = Tape::<f64>::new();
        let x = t.input(&buf((1, 1, 1, 3), vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.values(y), &[0.0, 0.0, 2.0]);
        let z = t.tanh(x);
        assert_eq!(t.values(z)[1], 0.0);
        let s = t.sigmoid(x);
        assert_eq!(t.values(s)[1], 0.5);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut t = Tape::<f64>::new();
        let a = t.input(&buf((1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.input(&buf((1, 1, 1, 2), vec![5.0, 6.0]));
        let c = t.channel_concat(a, b).unwrap();
        assert_eq!(t.shape(c).c, 3);
        assert_eq!(t.values(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = t.channel_slice(c, 0, 2).unwrap();
        assert_eq!(t.values(s), t.values(a));
        let s2 = t.channel_slice(c, 2, 3).unwrap();
        assert_eq!(t.values(s2), t.values(b));
        // channel 0 of result equals channel 0 of a elementwise
        let c0 = t.channel_slice(c, 0, 1).unwrap();
        let a0 = t.channel_slice(a, 0, 1).unwrap();
        assert_eq!(t.values(c0), t.values(a0));
    }

    #[test]
    fn concat_batch_mismatch_is_shape_error() {
        let mut t = Tape::<f64>::new();
        let a = t.input(&buf((1, 1, 2, 2), vec![0.0; 4]));
        let b = t.input(&buf((2, 1, 2, 2), vec![0.0; 8]));
        assert!(t.channel_concat(a, b).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        // Uniform prediction over 4 classes, unit weights -> ln 4.
        let mut t = Tape::<f64>::new();
        let p = t.input(&buf((1, 4, 1, 1), vec![0.25; 4]));
        let l = t.weighted_cross_entropy(p, &[2], &[1.0; 4]).unwrap();
        assert!((t.scalar(l).unwrap() - 4f64.ln()).abs() < 1e-7);

        // Two pixels, probs (0.5, 0.25) on true classes, weights (1, 2).
        let mut t = Tape::<f64>::new();
        let p = t.input(&buf((1, 2, 1, 2), vec![0.5, 0.75, 0.5, 0.25]));
        let l = t
            .weighted_cross_entropy(p, &[0, 1], &[1.0, 2.0])
            .unwrap();
        let expect = -(0.5f64.ln() + 2.0 * 0.25f64.ln()) / 2.0;
        assert!((t.scalar(l).unwrap() - expect).abs() < 1e-7);

        // Perfect prediction -> loss ~ 0.
        let mut t = Tape::<f64>::new();
        let p = t.input(&buf((1, 2, 1, 1), vec![1.0, 0.0]));
        let l = t.weighted_cross_entropy(p, &[0], &[1.0, 1.0]).unwrap();
        assert!(t.scalar(l).unwrap().abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut t = Tape::<f64>::new();
        let p = t.input(&buf((1, 2, 1, 1), vec![0.5, 0.5]));
        assert!(matches!(
            t.weighted_cross_entropy(p, &[2], &[1.0, 1.0]),
            Err(crate::error::Error::Data(_))
        ));
    }

    #[test]
    fn maxpool_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.input(&buf((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]));
        let y = t.maxpool2d(x).unwrap();
        assert_eq!(t.values(y), &[4.0]);

        // Constant input: output constant, gradient to the top-left element.
        let mut t = Tape::<f64>::new();
        let x = t.input(&buf((1, 1, 2, 2), vec![7.0; 4]));
        let y = t.maxpool2d(x).unwrap();
        assert_eq!(t.values(y), &[7.0]);
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);

        // Odd dims rejected.
        let mut t = Tape::<f64>::new();
        let x = t.input(&buf((1, 1, 3, 2), vec![0.0; 6]));
        assert!(t.maxpool2d(x).is_err());
    }
}
