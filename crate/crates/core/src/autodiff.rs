//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena: every op evaluates eagerly, stores its
//! value, and (when any input requires grad) remembers its inputs. Nodes are
//! therefore already in topological order, and [`Graph::backward`] walks them
//! from the loss downwards.
//!
//! Every adjoint is itself expressed with graph ops. With
//! [`Graph::backward_create_graph`] the adjoint computation is recorded, so a
//! function of the resulting gradients (the gradient-matching distance, for
//! instance) can be differentiated again with respect to the inputs.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable op the graph knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Conv2d,
    Conv2dInputGrad,
    Conv2dWeightGrad,
    Relu,
    ReluMask,
    AvgPool2d,
    AvgPool2dGrad,
    Reshape,
    Add,
    Sub,
    Mul,
    Scale,
    SumAll,
    Expand,
    BroadcastChannels,
    SumChannels,
    Softmax,
    RowSumBroadcast,
    SoftmaxCrossEntropy,
    Mse,
    SliceRows,
    PadRows,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Conv2dInputGrad,
        OpKind::Conv2dWeightGrad,
        OpKind::Relu,
        OpKind::ReluMask,
        OpKind::AvgPool2d,
        OpKind::AvgPool2dGrad,
        OpKind::Reshape,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::SumAll,
        OpKind::Expand,
        OpKind::BroadcastChannels,
        OpKind::SumChannels,
        OpKind::Softmax,
        OpKind::RowSumBroadcast,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Mse,
        OpKind::SliceRows,
        OpKind::PadRows,
    ];
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { ta: bool, tb: bool },
    Conv2d(ConvGeom),
    Conv2dInputGrad(ConvGeom),
    Conv2dWeightGrad(ConvGeom),
    Relu,
    ReluMask,
    AvgPool { k: usize },
    AvgPoolGrad { k: usize },
    Reshape,
    Add,
    Sub,
    Mul,
    Scale(T),
    SumAll,
    Expand,
    BroadcastChannels,
    SumChannels,
    Softmax,
    RowSumBroadcast,
    SoftmaxCrossEntropy { labels: Vec<usize> },
    Mse,
    SliceRows { start: usize },
    PadRows { start: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::Conv2dInputGrad(_) => OpKind::Conv2dInputGrad,
            Op::Conv2dWeightGrad(_) => OpKind::Conv2dWeightGrad,
            Op::Relu => OpKind::Relu,
            Op::ReluMask => OpKind::ReluMask,
            Op::AvgPool { .. } => OpKind::AvgPool2d,
            Op::AvgPoolGrad { .. } => OpKind::AvgPool2dGrad,
            Op::Reshape => OpKind::Reshape,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::SumAll => OpKind::SumAll,
            Op::Expand => OpKind::Expand,
            Op::BroadcastChannels => OpKind::BroadcastChannels,
            Op::SumChannels => OpKind::SumChannels,
            Op::Softmax => OpKind::Softmax,
            Op::RowSumBroadcast => OpKind::RowSumBroadcast,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Mse => OpKind::Mse,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::PadRows { .. } => OpKind::PadRows,
        })
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
    consumed: bool,
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, Var>,
}

impl Gradients {
    /// Gradient node for `leaf`; `None` if `leaf` is not a grad-requiring leaf.
    pub fn get(&self, leaf: Var) -> Option<Var> {
        self.by_leaf.get(&leaf).copied()
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

/// Append-only computation graph.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    counts: HashMap<OpKind, usize>,
    kinks: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            counts: HashMap::new(),
            kinks: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// A graph that never records; every result is a constant.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many times each op was evaluated on this graph, adjoints included.
    pub fn op_count(&self, kind: OpKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    /// Digest of which side of zero every `relu` input fell on so far.
    ///
    /// Two evaluations with equal digests took the same linear piece of every
    /// ReLU, which is what finite-difference checks need.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    /// Leaf whose gradient will be reported by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.recording;
        self.push_node(value, Op::Leaf, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, Vec::new(), false)
    }

    /// Constant copy of `v`'s current value, cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<Var>, rg: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad: rg,
            consumed: false,
        });
        Var(id)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if let Some(kind) = op.kind() {
            *self.counts.entry(kind).or_insert(0) += 1;
        }
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if rg {
            self.push_node(value, op, inputs.to_vec(), true)
        } else {
            self.push_node(value, Op::Leaf, Vec::new(), false)
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var, transposed: bool) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok(if transposed { (c, r) } else { (r, c) }),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    // ----- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a, ta)?;
        let (k2, n) = self.matrix_dims("matmul", b, tb)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dims differ: {:?}{} · {:?}{}",
                    self.shape(a),
                    if ta { "ᵀ" } else { "" },
                    self.shape(b),
                    if tb { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
            ta,
            tb,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { ta, tb }, &[a, b]))
    }

    /// Cross-correlation of NCHW input with OIHW kernel, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, stride, pad)?;
        let y = kernels::conv2d(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(&geom.output_shape(), y)?;
        Ok(self.push(value, Op::Conv2d(geom), &[x, w]))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (&[n, c, h, wd], &[o, c2, kh, kw]) = (xs, ws) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OIHW kernel, got {xs:?} and {ws:?}"),
            ));
        };
        if c != c2 {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c} but kernel expects {c2}"),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape(
                "conv2d",
                format!("unsupported stride {stride}"),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
            ));
        }
        Ok(ConvGeom {
            batch: n,
            in_ch: c,
            in_h: h,
            in_w: wd,
            out_ch: o,
            k_h: kh,
            k_w: kw,
            stride,
            pad,
        })
    }

    /// Adjoint of `conv2d` w.r.t. its input, for upstream `gy` and kernel `w`.
    pub fn conv2d_input_grad(&mut self, gy: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        if self.shape(gy) != geom.output_shape() || self.shape(w) != geom.kernel_shape() {
            return Err(Error::shape(
                "conv2d_input_grad",
                format!(
                    "got {:?} and {:?} for geometry {geom:?}",
                    self.shape(gy),
                    self.shape(w)
                ),
            ));
        }
        let dx = kernels::conv2d_input_grad(&geom, self.value(gy).data(), self.value(w).data());
        let value = Tensor::new(&geom.input_shape(), dx)?;
        Ok(self.push(value, Op::Conv2dInputGrad(geom), &[gy, w]))
    }

    /// Adjoint of `conv2d` w.r.t. its kernel, for input `x` and upstream `gy`.
    pub fn conv2d_weight_grad(&mut self, x: Var, gy: Var, geom: ConvGeom) -> Result<Var> {
        if self.shape(x) != geom.input_shape() || self.shape(gy) != geom.output_shape() {
            return Err(Error::shape(
                "conv2d_weight_grad",
                format!(
                    "got {:?} and {:?} for geometry {geom:?}",
                    self.shape(x),
                    self.shape(gy)
                ),
            ));
        }
        let dw = kernels::conv2d_weight_grad(&geom, self.value(x).data(), self.value(gy).data());
        let value = Tensor::new(&geom.kernel_shape(), dw)?;
        Ok(self.push(value, Op::Conv2dWeightGrad(geom), &[x, gy]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        for &v in self.nodes[x.0].value.data() {
            self.kinks ^= u64::from(v > T::zero());
            self.kinks = self.kinks.wrapping_mul(0x0100_0000_01b3);
        }
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu, &[x])
    }

    /// `g` where `x > 0`, zero elsewhere. Not differentiated through `x`.
    pub fn relu_mask(&mut self, g: Var, x: Var) -> Result<Var> {
        self.same_shape("relu_mask", g, x)?;
        let value =
            self.value(g).zip_map(
                self.value(x),
                |gv, xv| if xv > T::zero() { gv } else { T::zero() },
            )?;
        Ok(self.push(value, Op::ReluMask, &[g, x]))
    }

    fn pool_dims(
        &self,
        op: &'static str,
        v: Var,
        k: usize,
        grad: bool,
    ) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [n, c, h, w] => {
                if k == 0 || (!grad && (h % k != 0 || w % k != 0)) {
                    return Err(Error::shape(
                        op,
                        format!("{h}x{w} not divisible by pool size {k}"),
                    ));
                }
                Ok((n * c, h, w))
            }
            ref s => Err(Error::shape(op, format!("expected NCHW, got {s:?}"))),
        }
    }

    /// Non-overlapping `k×k` average pooling (stride `k`).
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (planes, h, w) = self.pool_dims("avgpool2d", x, k, false)?;
        let y = kernels::avgpool(self.value(x).data(), planes, h, w, k);
        let s = self.shape(x);
        let value = Tensor::new(&[s[0], s[1], h / k, w / k], y)?;
        Ok(self.push(value, Op::AvgPool { k }, &[x]))
    }

    /// Adjoint of `avgpool2d`: maps pooled `[N,C,H/k,W/k]` back to `[N,C,H,W]`.
    pub fn avgpool2d_grad(&mut self, gy: Var, k: usize) -> Result<Var> {
        let (planes, oh, ow) = self.pool_dims("avgpool2d_grad", gy, k, true)?;
        let (h, w) = (oh * k, ow * k);
        let dx = kernels::avgpool_grad(self.value(gy).data(), planes, h, w, k);
        let s = self.shape(gy);
        let value = Tensor::new(&[s[0], s[1], h, w], dx)?;
        Ok(self.push(value, Op::AvgPoolGrad { k }, &[gy]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape, &[x]))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = *s
            .first()
            .ok_or_else(|| Error::shape("flatten", "rank-0 input"))?;
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(c), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll, &[x])
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(
                "expand",
                format!("source must hold one element, got {:?}", self.shape(s)),
            ));
        }
        let value = Tensor::full(shape, self.value(s).item());
        Ok(self.push(value, Op::Expand, &[s]))
    }

    /// Broadcasts per-channel `b[C]` over `shape = [N, C, ...]`.
    pub fn broadcast_channels(&mut self, b: Var, shape: &[usize]) -> Result<Var> {
        let ch = self.value(b).len();
        if self.shape(b).len() != 1 || shape.len() < 2 || shape[1] != ch {
            return Err(Error::shape(
                "broadcast_channels",
                format!("bias {:?} against {shape:?}", self.shape(b)),
            ));
        }
        let outer = shape[0];
        let inner = shape[2..].iter().product();
        let value = Tensor::new(
            shape,
            kernels::broadcast_channels(self.value(b).data(), outer, inner),
        )?;
        Ok(self.push(value, Op::BroadcastChannels, &[b]))
    }

    /// Sums `[N, C, ...]` down to `[C]`.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape(
                "sum_channels",
                format!("rank {} input", s.len()),
            ));
        }
        let (outer, ch, inner) = (s[0], s[1], s[2..].iter().product());
        let value = Tensor::new(
            &[ch],
            kernels::sum_channels(self.value(x).data(), outer, ch, inner),
        )?;
        Ok(self.push(value, Op::SumChannels, &[x]))
    }

    /// `x + b` with a per-channel bias.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bb = self.broadcast_channels(b, &shape)?;
        self.add(x, bb)
    }

    /// Row-wise softmax of a `[rows, cols]` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax", x, false)?;
        let value = Tensor::new(&[r, c], kernels::softmax_rows(self.value(x).data(), r, c))?;
        Ok(self.push(value, Op::Softmax, &[x]))
    }

    /// `y[i,j] = Σ_k x[i,k]` for a `[rows, cols]` matrix.
    pub fn row_sum_broadcast(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("row_sum_broadcast", x, false)?;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(r * c);
        for row in data.chunks(c) {
            let s: T = row.iter().copied().sum();
            out.extend(std::iter::repeat_n(s, c));
        }
        let value = Tensor::new(&[r, c], out)?;
        Ok(self.push(value, Op::RowSumBroadcast, &[x]))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.matrix_dims("softmax_cross_entropy", logits, false)?;
        if b != labels.len() || b == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{b} logit rows for {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::OutOfRange {
                what: "label",
                value: bad,
                allowed: format!("0..{k}"),
            });
        }
        let value = Tensor::scalar(kernels::cross_entropy(self.value(logits).data(), labels, k));
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if av.is_empty() {
            return Err(Error::shape("mse", "empty operands"));
        }
        let s: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / T::from_usize(av.len()).expect("len"));
        Ok(self.push(value, Op::Mse, &[a, b]))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        Ok(self.push(value, Op::SliceRows { start }, &[x]))
    }

    /// Embeds `x` at row offset `start` of a zero tensor with `total` leading rows.
    pub fn pad_rows(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let xv = self.value(x);
        let rows = *xv.shape().first().unwrap_or(&0);
        if start + rows > total {
            return Err(Error::shape(
                "pad_rows",
                format!("{rows} rows at offset {start} exceed {total}"),
            ));
        }
        let rl = xv.row_len();
        let mut shape = xv.shape().to_vec();
        shape[0] = total;
        let mut data = vec![T::zero(); total * rl];
        data[start * rl..(start + rows) * rl].copy_from_slice(xv.data());
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::PadRows { start }, &[x]))
    }

    // ----- reverse mode ------------------------------------------------------

    /// Gradients of scalar `loss` w.r.t. every grad-requiring leaf; results are constants.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.run_backward(loss, None, false)
    }

    /// As [`Graph::backward`], but records the adjoint computation so the
    /// returned gradients are themselves differentiable.
    pub fn backward_create_graph(&mut self, loss: Var) -> Result<Gradients> {
        self.run_backward(loss, None, true)
    }

    /// Gradients of `loss` w.r.t. the leaves `wrt` only, in the same order.
    ///
    /// Adjoints that cannot reach any of `wrt` are skipped.
    pub fn grad(&mut self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        for &v in wrt {
            if !self.requires_grad(v) || !matches!(self.nodes[v.0].op, Op::Leaf) {
                return Err(Error::shape(
                    "grad",
                    format!("node {} is not a grad-requiring leaf", v.0),
                ));
            }
        }
        let grads = self.run_backward(loss, Some(wrt), create_graph)?;
        Ok(wrt
            .iter()
            .map(|&v| grads.get(v).expect("requested leaf"))
            .collect())
    }

    fn run_backward(
        &mut self,
        loss: Var,
        wrt: Option<&[Var]>,
        create_graph: bool,
    ) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::DetachedLoss);
        }
        if node.consumed {
            return Err(Error::BackwardTwice);
        }
        self.nodes[loss.0].consumed = true;

        let saved = self.recording;
        self.recording = create_graph;
        let reach = self.reach_mask(loss, wrt);
        let result = self.reverse_sweep(loss, &reach);
        self.recording = saved;
        result
    }

    /// `mask[i]`: node `i` requires grad and depends on one of `wrt` (or on any leaf when `None`).
    fn reach_mask(&self, loss: Var, wrt: Option<&[Var]>) -> Vec<bool> {
        let mut mask = vec![false; loss.0 + 1];
        for id in 0..=loss.0 {
            let node = &self.nodes[id];
            mask[id] = node.requires_grad
                && match (&node.op, wrt) {
                    (Op::Leaf, None) => true,
                    (Op::Leaf, Some(w)) => w.contains(&Var(id)),
                    _ => node.inputs.iter().any(|v| mask[v.0]),
                };
        }
        mask
    }

    fn reverse_sweep(&mut self, loss: Var, reach: &[bool]) -> Result<Gradients> {
        let mut adj: Vec<Option<Var>> = vec![None; loss.0 + 1];
        let seed_shape = self.shape(loss).to_vec();
        adj[loss.0] = Some(self.constant(Tensor::ones(&seed_shape)));

        let mut grads = Gradients::default();
        for id in (0..=loss.0).rev() {
            if !reach[id] {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let g = match adj[id] {
                    Some(g) => g,
                    None => {
                        let shape = self.nodes[id].value.shape().to_vec();
                        self.constant(Tensor::zeros(&shape))
                    }
                };
                grads.by_leaf.insert(Var(id), g);
                continue;
            }
            let Some(g) = adj[id] else { continue };
            let inputs = self.nodes[id].inputs.clone();
            let op = self.nodes[id].op.clone();
            let need: Vec<bool> = inputs.iter().map(|v| reach[v.0]).collect();
            let contributions = self.vjp(&op, Var(id), &inputs, &need, g)?;
            for ((input, contrib), &needed) in inputs.iter().zip(contributions).zip(&need) {
                let Some(c) = contrib.filter(|_| needed) else {
                    continue;
                };
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }
        Ok(grads)
    }

    /// Adjoint contributions for each input of `out`, given upstream `g`.
    fn vjp(
        &mut self,
        op: &Op<T>,
        out: Var,
        inputs: &[Var],
        need: &[bool],
        g: Var,
    ) -> Result<Vec<Option<Var>>> {
        let mut res = vec![None; inputs.len()];
        match op {
            Op::Leaf => {}
            Op::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                let (da, db) = match (ta, tb) {
                    (false, false) => ((g, b, false, true), (a, g, true, false)),
                    (false, true) => ((g, b, false, false), (g, a, true, false)),
                    (true, false) => ((b, g, false, true), (a, g, false, false)),
                    (true, true) => ((b, g, true, true), (g, a, true, true)),
                };
                if need[0] {
                    res[0] = Some(self.matmul_t(da.0, da.1, da.2, da.3)?);
                }
                if need[1] {
                    res[1] = Some(self.matmul_t(db.0, db.1, db.2, db.3)?);
                }
            }
            Op::Conv2d(geom) => {
                let (x, w) = (inputs[0], inputs[1]);
                if need[0] {
                    res[0] = Some(self.conv2d_input_grad(g, w, *geom)?);
                }
                if need[1] {
                    res[1] = Some(self.conv2d_weight_grad(x, g, *geom)?);
                }
            }
            Op::Conv2dInputGrad(geom) => {
                let (gy, w) = (inputs[0], inputs[1]);
                if need[0] {
                    res[0] = Some(self.conv2d(g, w, geom.stride, geom.pad)?);
                }
                if need[1] {
                    res[1] = Some(self.conv2d_weight_grad(g, gy, *geom)?);
                }
            }
            Op::Conv2dWeightGrad(geom) => {
                let (x, gy) = (inputs[0], inputs[1]);
                if need[0] {
                    res[0] = Some(self.conv2d_input_grad(gy, g, *geom)?);
                }
                if need[1] {
                    res[1] = Some(self.conv2d(x, g, geom.stride, geom.pad)?);
                }
            }
            Op::Relu => {
                res[0] = Some(self.relu_mask(g, inputs[0])?);
            }
            Op::ReluMask => {
                // The mask is piecewise constant in x: no contribution there.
                if need[0] {
                    res[0] = Some(self.relu_mask(g, inputs[1])?);
                }
            }
            Op::AvgPool { k } => {
                res[0] = Some(self.avgpool2d_grad(g, *k)?);
            }
            Op::AvgPoolGrad { k } => {
                res[0] = Some(self.avgpool2d(g, *k)?);
            }
            Op::Reshape => {
                let shape = self.shape(inputs[0]).to_vec();
                res[0] = Some(self.reshape(g, &shape)?);
            }
            Op::Add => {
                res[0] = need[0].then_some(g);
                res[1] = need[1].then_some(g);
            }
            Op::Sub => {
                res[0] = need[0].then_some(g);
                if need[1] {
                    res[1] = Some(self.scale(g, -T::one()));
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if need[0] {
                    res[0] = Some(self.mul(g, b)?);
                }
                if need[1] {
                    res[1] = Some(self.mul(g, a)?);
                }
            }
            Op::Scale(c) => {
                res[0] = Some(self.scale(g, *c));
            }
            Op::SumAll => {
                let shape = self.shape(inputs[0]).to_vec();
                res[0] = Some(self.expand(g, &shape)?);
            }
            Op::Expand => {
                let s = self.sum_all(g);
                let shape = self.shape(inputs[0]).to_vec();
                res[0] = Some(self.reshape(s, &shape)?);
            }
            Op::BroadcastChannels => {
                res[0] = Some(self.sum_channels(g)?);
            }
            Op::SumChannels => {
                let shape = self.shape(inputs[0]).to_vec();
                res[0] = Some(self.broadcast_channels(g, &shape)?);
            }
            Op::Softmax => {
                // dx = s ⊙ (g − rowsum(g ⊙ s))
                let gs = self.mul(g, out)?;
                let rs = self.row_sum_broadcast(gs)?;
                let centered = self.sub(g, rs)?;
                res[0] = Some(self.mul(out, centered)?);
            }
            Op::RowSumBroadcast => {
                res[0] = Some(self.row_sum_broadcast(g)?);
            }
            Op::SoftmaxCrossEntropy { labels } => {
                let logits = inputs[0];
                let shape = self.shape(logits).to_vec();
                let (b, k) = (shape[0], shape[1]);
                let mut onehot = Tensor::zeros(&shape);
                for (r, &y) in labels.iter().enumerate() {
                    onehot.data_mut()[r * k + y] = T::one();
                }
                let onehot = self.constant(onehot);
                let probs = self.softmax(logits)?;
                let diff = self.sub(probs, onehot)?;
                let ge = self.expand(g, &shape)?;
                let scaled = self.mul(ge, diff)?;
                res[0] = Some(self.scale(scaled, T::one() / T::from_usize(b).expect("batch")));
            }
            Op::Mse => {
                let (a, b) = (inputs[0], inputs[1]);
                let shape = self.shape(a).to_vec();
                let n = T::from_usize(self.value(a).len()).expect("len");
                let d = self.sub(a, b)?;
                let ge = self.expand(g, &shape)?;
                let gd = self.mul(ge, d)?;
                let two_over_n = (T::one() + T::one()) / n;
                if need[0] {
                    res[0] = Some(self.scale(gd, two_over_n));
                }
                if need[1] {
                    res[1] = Some(self.scale(gd, -two_over_n));
                }
            }
            Op::SliceRows { start } => {
                let total = self.shape(inputs[0])[0];
                res[0] = Some(self.pad_rows(g, *start, total)?);
            }
            Op::PadRows { start } => {
                let rows = self.shape(inputs[0])[0];
                res[0] = Some(self.slice_rows(g, *start, start + rows)?);
            }
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[1.0, 2.0]));
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mse_gradient_of_square() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[3.0]));
        let z = g.constant(t(&[1], &[0.0]));
        let l = g.mse(x, z).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(g.value(grads.get(x).unwrap()).data(), &[6.0]);
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, -1.0]));
        let y = g.param(t(&[2], &[5.0, 5.0]));
        let s = g.mul(x, x).unwrap();
        let l = g.sum_all(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(g.value(grads.get(y).unwrap()).data(), &[0.0, 0.0]);
        assert_eq!(g.value(grads.get(x).unwrap()).data(), &[2.0, -2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));

        let c = g.constant(t(&[1], &[1.0]));
        let d = g.scale(c, 2.0);
        assert!(matches!(g.backward(d), Err(Error::DetachedLoss)));

        let l = g.sum_all(y);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::BackwardTwice)));
    }

    #[test]
    fn second_order_through_recorded_adjoint() {
        // f(x) = sum(x^3)/3 ⇒ ∇f = x², and d/dx sum((∇f)^2)/2 = 2x³.
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let s = g.sum_all(x3);
        let f = g.scale(s, 1.0 / 3.0);
        let grads = g.backward_create_graph(f).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(g.value(gx).data(), &[1.0, 4.0, 0.25]);
        let sq = g.mul(gx, gx).unwrap();
        let s2 = g.sum_all(sq);
        let h = g.scale(s2, 0.5);
        let grads2 = g.backward(h).unwrap();
        let want = [2.0, -16.0, 0.25];
        for (a, b) in g.value(grads2.get(x).unwrap()).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, 1, 1).unwrap_err().to_string();
        assert!(err.contains("conv2d") && err.contains('3'), "{err}");
    }

    #[test]
    fn inference_graph_does_not_record() {
        let mut g = Graph::<f64>::inference();
        let x = g.param(t(&[1], &[2.0]));
        let y = g.scale(x, 3.0);
        assert!(!g.requires_grad(y));
        assert!(matches!(g.backward(y), Err(Error::DetachedLoss)));
    }
}
