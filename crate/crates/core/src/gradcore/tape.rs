//! Define-by-run tape and differentiable tensors.
//!
//! Every backward rule is written in terms of tensor ops, so when gradients
//! are requested with `create_graph` the backward pass lands on the same tape
//! and can be differentiated again.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use super::array::{Array, Scalar};
use super::kernels::{self, ConvGeom};
use super::GradError;

type Result<T> = std::result::Result<T, GradError>;

thread_local! {
    static CHECKED: Cell<bool> = const { Cell::new(true) };
}

/// Enables or disables the non-finite output check on this thread.
/// Returns the previous setting.
pub fn set_checked(on: bool) -> bool {
    CHECKED.with(|c| c.replace(on))
}

pub fn is_checked() -> bool {
    CHECKED.with(|c| c.get())
}

/// Internal op set. The public kinds map onto these; the rest only appear in
/// recorded backward passes.
#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(T),
    MatMul,
    Transpose,
    Conv2d { pad: usize },
    Conv2dInputGrad { pad: usize },
    Conv2dWeightGrad { pad: usize },
    Gather { idx: Arc<Vec<usize>>, src_shape: Vec<usize> },
    Scatter { idx: Arc<Vec<usize>> },
    Relu,
    /// `g * (x > 0)` with inputs `[g, x]`.
    ReluGrad,
    Reshape { in_shape: Vec<usize> },
    BiasAdd,
    BiasSum,
    BiasExpand,
    Sum,
    Mean,
    ExpandScalar { scale: T },
    Softmax,
    RowSum,
    RowExpand,
    SoftmaxCrossEntropy { labels: Arc<Vec<usize>> },
}

#[derive(Clone)]
struct Saved<T> {
    value: Arc<Array<T>>,
    id: Option<usize>,
}

#[derive(Clone)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Saved<T>>,
    out: Arc<Array<T>>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Append-only record of operations. Node order is a topological order.
pub struct Tape<T> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self { inner: self.inner.clone() }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), consumed: false })) }
    }

    /// A differentiable leaf holding `value`.
    pub fn leaf(&self, value: Array<T>) -> Tensor<T> {
        let value = Arc::new(value);
        let id = self.push(Node { op: Op::Leaf, inputs: Vec::new(), out: value.clone() });
        Tensor { value, node: Some((self.clone(), id)) }
    }

    pub fn leaf_shared(&self, value: Arc<Array<T>>) -> Tensor<T> {
        let id = self.push(Node { op: Op::Leaf, inputs: Vec::new(), out: value.clone() });
        Tensor { value, node: Some((self.clone(), id)) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes; later gradient requests on this tape fail.
    pub fn release(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.consumed = true;
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    /// Smallest |input| over all relu nodes and smallest winner/runner-up gap
    /// over all max-pool windows. Finite differences are unreliable when either
    /// is near zero.
    pub fn kink_margins(&self) -> (f64, f64) {
        let inner = self.inner.borrow();
        let mut relu = f64::INFINITY;
        let mut pool = f64::INFINITY;
        for node in &inner.nodes {
            match &node.op {
                Op::Relu => {
                    for v in node.inputs[0].value.data() {
                        relu = relu.min(v.as_f64().abs());
                    }
                }
                Op::Gather { src_shape, .. } if src_shape.len() == 4 => {
                    pool = pool.min(kernels::maxpool2x2_margin(&node.inputs[0].value));
                }
                _ => {}
            }
        }
        (relu, pool)
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    fn node(&self, id: usize) -> Node<T> {
        self.inner.borrow().nodes[id].clone()
    }

    fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Dense tensor, optionally attached to a tape node.
pub struct Tensor<T> {
    value: Arc<Array<T>>,
    node: Option<(Tape<T>, usize)>,
}

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self { value: self.value.clone(), node: self.node.clone() }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.value.shape())
            .field("node", &self.id())
            .finish()
    }
}

fn shape_err(msg: impl Into<String>) -> GradError {
    GradError::Shape(msg.into())
}

impl<T: Scalar> Tensor<T> {
    /// A constant (no tape node, never differentiated).
    pub fn constant(value: Array<T>) -> Self {
        Self { value: Arc::new(value), node: None }
    }

    pub fn constant_shared(value: Arc<Array<T>>) -> Self {
        Self { value, node: None }
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Array::scalar(v))
    }

    pub fn value(&self) -> &Array<T> {
        &self.value
    }

    pub fn shared_value(&self) -> Arc<Array<T>> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> T {
        self.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.node.as_ref().map(|(t, _)| t)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Self {
        Self { value: self.value.clone(), node: None }
    }

    fn record(op: Op<T>, inputs: &[&Tensor<T>], out: Array<T>) -> Result<Self> {
        if is_checked() && !out.all_finite() {
            return Err(GradError::NonFinite(op_name(&op)));
        }
        let mut tape: Option<&Tape<T>> = None;
        for t in inputs {
            if let Some((tp, _)) = &t.node {
                match tape {
                    None => tape = Some(tp),
                    Some(cur) if !cur.same(tp) => return Err(GradError::TapeMismatch),
                    _ => {}
                }
            }
        }
        let out = Arc::new(out);
        match tape {
            None => Ok(Self { value: out, node: None }),
            Some(tape) => {
                if tape.is_consumed() {
                    return Err(GradError::TapeConsumed);
                }
                let saved = inputs.iter().map(|t| Saved { value: t.value.clone(), id: t.id() }).collect();
                let id = tape.push(Node { op, inputs: saved, out: out.clone() });
                Ok(Self { value: out, node: Some((tape.clone(), id)) })
            }
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let out = self.value.zip_map(&other.value, |a, b| a + b)?;
        Self::record(Op::Add, &[self, other], out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let out = self.value.zip_map(&other.value, |a, b| a - b)?;
        Self::record(Op::Sub, &[self, other], out)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let out = self.value.zip_map(&other.value, |a, b| a * b)?;
        Self::record(Op::Mul, &[self, other], out)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        let out = self.value.map(|a| a * s);
        Self::record(Op::Scale(s), &[self], out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(shape_err(format!("matmul {a:?} x {b:?}")));
        }
        let out = Array::from_parts(vec![a[0], b[1]], kernels::matmul(&self.value, &other.value));
        Self::record(Op::MatMul, &[self, other], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(shape_err(format!("transpose of {s:?}")));
        }
        let out = Array::from_parts(vec![s[1], s[0]], kernels::transpose2(&self.value));
        Self::record(Op::Transpose, &[self], out)
    }

    fn conv_geom(x: &[usize], w: &[usize], pad: usize) -> Result<ConvGeom> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(shape_err(format!("conv2d input {x:?} with kernel {w:?}")));
        }
        if w[2] != w[3] || w[2] > 5 {
            return Err(GradError::Unsupported(format!("conv2d kernel {}x{}", w[2], w[3])));
        }
        if pad >= w[2] {
            return Err(GradError::Unsupported(format!("conv2d padding {pad} with kernel {}", w[2])));
        }
        if x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[2] {
            return Err(shape_err(format!("conv2d kernel {w:?} larger than padded input {x:?}")));
        }
        Ok(ConvGeom { n: x[0], c: x[1], h: x[2], w: x[3], o: w[0], k: w[2], pad })
    }

    /// Stride-1 convolution (cross-correlation) with zero padding.
    pub fn conv2d(&self, kernel: &Self, pad: usize) -> Result<Self> {
        let g = Self::conv_geom(self.shape(), kernel.shape(), pad)?;
        let out = kernels::conv2d(self.value.data(), kernel.value.data(), &g);
        let out = Array::from_parts(vec![g.n, g.o, g.out_h(), g.out_w()], out);
        Self::record(Op::Conv2d { pad }, &[self, kernel], out)
    }

    fn conv2d_input_grad(grad_out: &Self, kernel: &Self, pad: usize, in_shape: [usize; 4]) -> Result<Self> {
        let g = Self::conv_geom(&in_shape, kernel.shape(), pad)?;
        if grad_out.shape() != [g.n, g.o, g.out_h(), g.out_w()] {
            return Err(shape_err(format!("conv2d input-grad with output grad {:?}", grad_out.shape())));
        }
        let out = kernels::conv2d_input_grad(grad_out.value.data(), kernel.value.data(), &g);
        let out = Array::from_parts(in_shape.to_vec(), out);
        Self::record(Op::Conv2dInputGrad { pad }, &[grad_out, kernel], out)
    }

    fn conv2d_weight_grad(input: &Self, grad_out: &Self, pad: usize, k: usize) -> Result<Self> {
        let x = input.shape();
        let go = grad_out.shape();
        if x.len() != 4 || go.len() != 4 {
            return Err(shape_err(format!("conv2d weight-grad {x:?} / {go:?}")));
        }
        let g = Self::conv_geom(x, &[go[1], x[1], k, k], pad)?;
        if go != [g.n, g.o, g.out_h(), g.out_w()] {
            return Err(shape_err(format!("conv2d weight-grad with output grad {go:?}")));
        }
        let out = kernels::conv2d_weight_grad(input.value.data(), grad_out.value.data(), &g);
        let out = Array::from_parts(vec![g.o, g.c, k, k], out);
        Self::record(Op::Conv2dWeightGrad { pad }, &[input, grad_out], out)
    }

    /// 2x2 max pooling with stride 2 over `[N,C,H,W]` (odd edges are dropped).
    pub fn maxpool2x2(&self) -> Result<Self> {
        let s = self.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err(format!("maxpool2x2 on {s:?}")));
        }
        let (idx, out_shape) = kernels::maxpool2x2_indices(&self.value);
        Self::gather(self, Arc::new(idx), out_shape)
    }

    fn gather(&self, idx: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Self> {
        let d = self.value.data();
        let out = Array::from_parts(out_shape, idx.iter().map(|&i| d[i]).collect());
        Self::record(Op::Gather { idx, src_shape: self.shape().to_vec() }, &[self], out)
    }

    fn scatter(&self, idx: Arc<Vec<usize>>, dst_shape: Vec<usize>) -> Result<Self> {
        let mut out = Array::zeros(dst_shape);
        let o = out.data_mut();
        for (&i, &v) in idx.iter().zip(self.value.data()) {
            o[i] = o[i] + v;
        }
        Self::record(Op::Scatter { idx }, &[self], out)
    }

    pub fn relu(&self) -> Result<Self> {
        let out = self.value.map(|a| if a > T::zero() { a } else { T::zero() });
        Self::record(Op::Relu, &[self], out)
    }

    fn relu_grad(&self, x: &Self) -> Result<Self> {
        let out = self.value.zip_map(&x.value, |g, v| if v > T::zero() { g } else { T::zero() })?;
        Self::record(Op::ReluGrad, &[self, x], out)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let out = self.value.reshaped(shape)?;
        Self::record(Op::Reshape { in_shape: self.shape().to_vec() }, &[self], out)
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&self) -> Result<Self> {
        let s = self.shape();
        if s.is_empty() {
            return Err(shape_err("flatten of a scalar"));
        }
        let rest: usize = s[1..].iter().product();
        self.reshape(vec![s[0], rest])
    }

    /// Adds `bias[C]` along axis 1 of `[N, C, ...]`.
    pub fn bias_add(&self, bias: &Self) -> Result<Self> {
        let s = self.shape();
        if s.len() < 2 || bias.shape() != [s[1]] {
            return Err(shape_err(format!("bias_add {:?} + {:?}", s, bias.shape())));
        }
        let inner: usize = s[2..].iter().product();
        let b = bias.value.data();
        let mut out = (*self.value).clone();
        for (j, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bj = b[j % s[1]];
            chunk.iter_mut().for_each(|v| *v = *v + bj);
        }
        Self::record(Op::BiasAdd, &[self, bias], out)
    }

    fn bias_sum(&self) -> Result<Self> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(shape_err(format!("bias_sum on {s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let mut out = vec![T::zero(); s[1]];
        for (j, chunk) in self.value.data().chunks(inner).enumerate() {
            let acc = chunk.iter().fold(T::zero(), |a, &v| a + v);
            out[j % s[1]] = out[j % s[1]] + acc;
        }
        Self::record(Op::BiasSum, &[self], Array::from_parts(vec![s[1]], out))
    }

    fn bias_expand(&self, shape: Vec<usize>) -> Result<Self> {
        let inner: usize = shape[2..].iter().product();
        let c = shape[1];
        let b = self.value.data();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| b[(i / inner) % c]).collect();
        Self::record(Op::BiasExpand, &[self], Array::from_parts(shape, data))
    }

    pub fn sum(&self) -> Result<Self> {
        let v = self.value.data().iter().fold(T::zero(), |a, &b| a + b);
        Self::record(Op::Sum, &[self], Array::scalar(v))
    }

    pub fn mean(&self) -> Result<Self> {
        let n = T::lit(self.value.len() as f64);
        let v = self.value.data().iter().fold(T::zero(), |a, &b| a + b) / n;
        Self::record(Op::Mean, &[self], Array::scalar(v))
    }

    fn expand_scalar(&self, shape: Vec<usize>, scale: T) -> Result<Self> {
        let v = self.item() * scale;
        Self::record(Op::ExpandScalar { scale }, &[self], Array::full(shape, v))
    }

    /// Row-wise softmax of a `[B, C]` matrix.
    pub fn softmax(&self) -> Result<Self> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(shape_err(format!("softmax on {s:?}")));
        }
        let mut out = (*self.value).clone();
        for row in out.data_mut().chunks_mut(s[1]) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        Self::record(Op::Softmax, &[self], out)
    }

    fn row_sum(&self) -> Result<Self> {
        let s = self.shape();
        let out = self.value.data().chunks(s[1]).map(|r| r.iter().fold(T::zero(), |a, &b| a + b)).collect();
        Self::record(Op::RowSum, &[self], Array::from_parts(vec![s[0]], out))
    }

    fn row_expand(&self, cols: usize) -> Result<Self> {
        let rows = self.shape()[0];
        let data = self.value.data().iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
        Self::record(Op::RowExpand, &[self], Array::from_parts(vec![rows, cols], data))
    }

    /// Mean over rows of `-log softmax(z)[label]`, computed with log-sum-exp.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Self> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(format!("cross-entropy logits {s:?} with {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(GradError::Label { label: bad, classes: s[1] });
        }
        let mut total = T::zero();
        for (row, &y) in self.value.data().chunks(s[1]).zip(labels) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().fold(T::zero(), |a, &b| a + (b - m).exp()).ln();
            total = total + (lse - row[y]);
        }
        let out = Array::scalar(total / T::lit(s[0] as f64));
        Self::record(Op::SoftmaxCrossEntropy { labels: Arc::new(labels.to_vec()) }, &[self], out)
    }
}

/// Public op kinds accepted by [`record_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    ScalarMul(f64),
    ElementwiseMul,
    MatMul,
    Conv2d { pad: usize },
    MaxPool2d,
    Relu,
    Flatten,
    BiasAdd,
    SoftmaxCrossEntropy { labels: Vec<usize> },
    Sum,
    Mean,
}

/// Applies `kind` to `inputs`, recording it when any input is on a tape.
pub fn record_op<T: Scalar>(kind: &OpKind, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let arity = match kind {
        OpKind::Add | OpKind::Sub | OpKind::ElementwiseMul | OpKind::MatMul | OpKind::Conv2d { .. } | OpKind::BiasAdd => 2,
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(shape_err(format!("{kind:?} takes {arity} inputs, got {}", inputs.len())));
    }
    let a = inputs[0];
    match kind {
        OpKind::Add => a.add(inputs[1]),
        OpKind::Sub => a.sub(inputs[1]),
        OpKind::ScalarMul(s) => a.scale(T::lit(*s)),
        OpKind::ElementwiseMul => a.mul(inputs[1]),
        OpKind::MatMul => a.matmul(inputs[1]),
        OpKind::Conv2d { pad } => a.conv2d(inputs[1], *pad),
        OpKind::MaxPool2d => a.maxpool2x2(),
        OpKind::Relu => a.relu(),
        OpKind::Flatten => a.flatten(),
        OpKind::BiasAdd => a.bias_add(inputs[1]),
        OpKind::SoftmaxCrossEntropy { labels } => a.softmax_cross_entropy(labels),
        OpKind::Sum => a.sum(),
        OpKind::Mean => a.mean(),
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::Scale(_) => "scalar_mul",
        Op::MatMul => "matmul",
        Op::Transpose => "transpose",
        Op::Conv2d { .. } => "conv2d",
        Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
        Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
        Op::Gather { .. } => "gather",
        Op::Scatter { .. } => "scatter",
        Op::Relu => "relu",
        Op::ReluGrad => "relu_grad",
        Op::Reshape { .. } => "reshape",
        Op::BiasAdd => "bias_add",
        Op::BiasSum => "bias_sum",
        Op::BiasExpand => "bias_expand",
        Op::Sum => "sum",
        Op::Mean => "mean",
        Op::ExpandScalar { .. } => "expand_scalar",
        Op::Softmax => "softmax",
        Op::RowSum => "row_sum",
        Op::RowExpand => "row_expand",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
    }
}

/// Vector-Jacobian product for one node. `needs[i]` marks inputs whose
/// gradient is wanted; other slots may be `None`.
fn backward<T: Scalar>(
    op: &Op<T>,
    x: &[Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let one = |t: Result<Tensor<T>>| -> Result<Vec<Option<Tensor<T>>>> { Ok(vec![Some(t?)]) };
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        Op::Sub => Ok(vec![Some(g.clone()), if want(1) { Some(g.scale(-T::one())?) } else { None }]),
        Op::Mul => Ok(vec![
            if want(0) { Some(g.mul(&x[1])?) } else { None },
            if want(1) { Some(g.mul(&x[0])?) } else { None },
        ]),
        Op::Scale(s) => one(g.scale(*s)),
        Op::MatMul => Ok(vec![
            if want(0) { Some(g.matmul(&x[1].transpose()?)?) } else { None },
            if want(1) { Some(x[0].transpose()?.matmul(g)?) } else { None },
        ]),
        Op::Transpose => one(g.transpose()),
        Op::Conv2d { pad } => {
            let s = x[0].shape();
            let in_shape = [s[0], s[1], s[2], s[3]];
            Ok(vec![
                if want(0) { Some(Tensor::conv2d_input_grad(g, &x[1], *pad, in_shape)?) } else { None },
                if want(1) { Some(Tensor::conv2d_weight_grad(&x[0], g, *pad, x[1].shape()[2])?) } else { None },
            ])
        }
        // inputs: [grad_out, kernel]
        Op::Conv2dInputGrad { pad, .. } => Ok(vec![
            if want(0) { Some(g.conv2d(&x[1], *pad)?) } else { None },
            if want(1) { Some(Tensor::conv2d_weight_grad(g, &x[0], *pad, x[1].shape()[2])?) } else { None },
        ]),
        // inputs: [input, grad_out]
        Op::Conv2dWeightGrad { pad, .. } => {
            let s = x[0].shape();
            let in_shape = [s[0], s[1], s[2], s[3]];
            Ok(vec![
                if want(0) { Some(Tensor::conv2d_input_grad(&x[1], g, *pad, in_shape)?) } else { None },
                if want(1) { Some(x[0].conv2d(g, *pad)?) } else { None },
            ])
        }
        Op::Gather { idx, src_shape } => one(g.scatter(idx.clone(), src_shape.clone())),
        Op::Scatter { idx, .. } => one(g.gather(idx.clone(), x[0].shape().to_vec())),
        // second derivative treated as zero everywhere, including the kink
        Op::Relu => one(g.relu_grad(&x[0].detach())),
        Op::ReluGrad => Ok(vec![Some(g.relu_grad(&x[1].detach())?), None]),
        Op::Reshape { in_shape } => one(g.reshape(in_shape.clone())),
        Op::BiasAdd => Ok(vec![Some(g.clone()), if want(1) { Some(g.bias_sum()?) } else { None }]),
        Op::BiasSum => one(g.bias_expand(x[0].shape().to_vec())),
        Op::BiasExpand => one(g.bias_sum()),
        Op::Sum => one(g.expand_scalar(x[0].shape().to_vec(), T::one())),
        Op::Mean => {
            let n = T::lit(x[0].value.len() as f64);
            one(g.expand_scalar(x[0].shape().to_vec(), T::one() / n))
        }
        Op::ExpandScalar { scale, .. } => one(g.sum()?.scale(*scale)?.reshape(x[0].shape().to_vec())),
        Op::Softmax => {
            // s * (g - rowsum(g * s))
            let cols = out.shape()[1];
            let gs = g.mul(out)?;
            let r = gs.row_sum()?.row_expand(cols)?;
            one(out.mul(&g.sub(&r)?))
        }
        Op::RowSum => one(g.row_expand(x[0].shape()[1])),
        Op::RowExpand => one(g.row_sum()),
        Op::SoftmaxCrossEntropy { labels } => {
            let s = x[0].shape();
            let mut onehot = Array::zeros(s.to_vec());
            for (r, &y) in labels.iter().enumerate() {
                onehot.data_mut()[r * s[1] + y] = T::one();
            }
            let diff = x[0].softmax()?.sub(&Tensor::constant(onehot))?;
            let scale = g.expand_scalar(s.to_vec(), T::one() / T::lit(s[0] as f64))?;
            one(diff.mul(&scale))
        }
    }
}

fn attach<T: Scalar>(tape: &Tape<T>, value: &Arc<Array<T>>, id: Option<usize>, create_graph: bool) -> Tensor<T> {
    match (create_graph, id) {
        (true, Some(id)) => Tensor { value: value.clone(), node: Some((tape.clone(), id)) },
        _ => Tensor { value: value.clone(), node: None },
    }
}

/// Gradients of the scalar `loss` with respect to each tensor in `params`.
///
/// Tensors that `loss` does not depend on get zeros. With `create_graph` the
/// backward pass is itself recorded, so the returned gradients can be
/// differentiated again. The tape is retained either way.
pub fn grad<T: Scalar>(loss: &Tensor<T>, params: &[Tensor<T>], create_graph: bool) -> Result<Vec<Tensor<T>>> {
    if loss.value.len() != 1 {
        return Err(GradError::NotScalar(loss.shape().to_vec()));
    }
    let zeros = |p: &Tensor<T>| Tensor::constant(Array::zeros(p.shape().to_vec()));
    let Some((tape, loss_id)) = loss.node.clone() else {
        return Ok(params.iter().map(zeros).collect());
    };
    if tape.is_consumed() {
        return Err(GradError::TapeConsumed);
    }
    let mut target = vec![false; loss_id + 1];
    for p in params {
        if let Some((pt, id)) = &p.node {
            if pt.same(&tape) && *id <= loss_id {
                target[*id] = true;
            }
        }
    }
    // needs[i]: node i lies on a path from some param to the loss
    let needs: Vec<bool> = {
        let inner = tape.inner.borrow();
        let mut needs = target.clone();
        for i in 0..=loss_id {
            if !needs[i] {
                needs[i] = inner.nodes[i].inputs.iter().any(|s| s.id.is_some_and(|j| needs[j]));
            }
        }
        needs
    };
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss_id + 1];
    grads[loss_id] = Some(Tensor::constant(Array::full(loss.shape().to_vec(), T::one())));
    for id in (0..=loss_id).rev() {
        if !needs[id] {
            continue;
        }
        let Some(g) = grads[id].clone() else { continue };
        let node = tape.node(id);
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        let inputs: Vec<Tensor<T>> =
            node.inputs.iter().map(|s| attach(&tape, &s.value, s.id, create_graph)).collect();
        let out = attach(&tape, &node.out, Some(id), create_graph);
        let g = if create_graph { g } else { g.detach() };
        let in_needs: Vec<bool> = node.inputs.iter().map(|s| s.id.is_some_and(|j| needs[j])).collect();
        let input_grads = backward(&node.op, &inputs, &out, &g, &in_needs)?;
        for ((saved, gi), need) in node.inputs.iter().zip(input_grads).zip(in_needs) {
            let (Some(j), Some(gi), true) = (saved.id, gi, need) else { continue };
            grads[j] = Some(match grads[j].take() {
                None => gi,
                Some(prev) => prev.add(&gi)?,
            });
        }
    }
    Ok(params
        .iter()
        .map(|p| match &p.node {
            Some((pt, id)) if pt.same(&tape) && *id <= loss_id => grads[*id].clone().unwrap_or_else(|| zeros(p)),
            _ => zeros(p),
        })
        .collect())
}

/// Hessian-vector product `H v` of `loss` with respect to `params`, computed
/// as the gradient of `grad(loss) . v`.
pub fn hvp<T: Scalar>(loss: &Tensor<T>, params: &[Tensor<T>], v: &[Array<T>]) -> Result<Vec<Array<T>>> {
    if v.len() != params.len() {
        return Err(shape_err(format!("hvp with {} params and {} vectors", params.len(), v.len())));
    }
    let gs = grad(loss, params, true)?;
    let mut dot: Option<Tensor<T>> = None;
    for (g, vi) in gs.iter().zip(v) {
        if vi.shape() != g.shape() {
            return Err(shape_err(format!("hvp vector {:?} for param {:?}", vi.shape(), g.shape())));
        }
        let term = g.mul(&Tensor::constant(vi.clone()))?.sum()?;
        dot = Some(match dot {
            None => term,
            Some(d) => d.add(&term)?,
        });
    }
    let Some(dot) = dot else { return Ok(Vec::new()) };
    Ok(grad(&dot, params, false)?.into_iter().map(|t| (*t.value).clone()).collect())
}

