//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Values are recorded in creation order, so node ids are already a
//! topological order and `backward` is a single reverse sweep.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, NormCache};
use crate::tensor::{Padding, Real, Tensor};

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose2d {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    InstanceNorm {
        input: usize,
        scale: usize,
        shift: usize,
        cache: NormCache<T>,
    },
    Relu {
        input: usize,
    },
    AddBias {
        input: usize,
        bias: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    MulMask {
        input: usize,
        mask: usize,
    },
    Gram {
        input: usize,
    },
    Mse {
        a: usize,
        b: usize,
    },
    Tv {
        input: usize,
    },
    Sum {
        input: usize,
    },
    BatchItem {
        input: usize,
        index: usize,
    },
    ConcatBatch {
        inputs: Vec<usize>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner recording of one forward computation.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value.into(), true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value.into(), false)
    }

    fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var<'_, T>> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn concat_batch<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let values: Vec<Tensor<T>> = parts.iter().map(|v| (*v.value()).clone()).collect();
        let out = Tensor::stack(&values)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        self.push("concat_batch", out, Op::ConcatBatch { inputs: ids.clone() }, &ids)
    }

    /// Allows another `backward` sweep over the same recording.
    pub fn reset_backward(&self) {
        self.consumed.set(false);
    }

    /// Propagates d(loss)/d(node) back to every reachable gradient-carrying leaf.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.dims() != [1, 1, 1, 1] {
            return Err(Error::NotScalar(root.value.dims()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(T::one()));
        let mut leaves = HashMap::new();
        let needs = |i: usize| nodes[i].requires_grad;

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, g);
                }
                &Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let x = &nodes[input].value;
                    let k = &nodes[kernel].value;
                    let [_, _, h, w] = x.dims();
                    let [_, _, kh, kw] = k.dims();
                    if needs(input) {
                        let gxp = kernels::conv_valid_input_grad(&g, k, stride, h + 2 * padding.margin(), w + 2 * padding.margin())?;
                        accumulate(&mut grads, input, kernels::pad_adjoint(&gxp, padding, h, w)?);
                    }
                    if needs(kernel) {
                        let xp = kernels::pad(x, padding)?;
                        accumulate(&mut grads, kernel, kernels::conv_valid_kernel_grad(&xp, &g, stride, kh, kw)?);
                    }
                }
                &Op::ConvTranspose2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    // y = P* A* x, so dx = A P g and dk follows from the forward conv of g.
                    let y = &nodes[input].value;
                    let k = &nodes[kernel].value;
                    let [_, _, kh, kw] = k.dims();
                    let gp = kernels::pad(&g, padding)?;
                    if needs(input) {
                        accumulate(&mut grads, input, kernels::conv_valid(&gp, k, stride)?);
                    }
                    if needs(kernel) {
                        accumulate(&mut grads, kernel, kernels::conv_valid_kernel_grad(&gp, y, stride, kh, kw)?);
                    }
                }
                Op::InstanceNorm {
                    input,
                    scale,
                    shift,
                    cache,
                } => {
                    let s = &nodes[*scale].value;
                    let (dx, ds, db) = kernels::instance_norm_backward(&g, cache, s.data());
                    let c = s.dims();
                    if needs(*input) {
                        accumulate(&mut grads, *input, dx);
                    }
                    if needs(*scale) {
                        accumulate(&mut grads, *scale, Tensor::new(c, ds)?);
                    }
                    if needs(*shift) {
                        accumulate(&mut grads, *shift, Tensor::new(c, db)?);
                    }
                }
                &Op::Relu { input } => {
                    let x = &nodes[input].value;
                    let mut d = g;
                    for (gv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    accumulate(&mut grads, input, d);
                }
                &Op::AddBias { input, bias } => {
                    if needs(bias) {
                        let [_, c, h, w] = g.dims();
                        let mut db = vec![T::zero(); c];
                        for (plane, chunk) in g.data().chunks(h * w).enumerate() {
                            db[plane % c] = db[plane % c] + chunk.iter().copied().sum();
                        }
                        accumulate(&mut grads, bias, Tensor::new([1, c, 1, 1], db)?);
                    }
                    if needs(input) {
                        accumulate(&mut grads, input, g);
                    }
                }
                &Op::Add { a, b } => {
                    if needs(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                &Op::Sub { a, b } => {
                    if needs(b) {
                        accumulate(&mut grads, b, g.map(|v| -v));
                    }
                    if needs(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                &Op::Scale { input, factor } => {
                    accumulate(&mut grads, input, g.map(|v| v * factor));
                }
                &Op::MulMask { input, mask } => {
                    let m = &nodes[mask].value;
                    let mut d = g;
                    apply_mask(&mut d, m);
                    accumulate(&mut grads, input, d);
                }
                &Op::Gram { input } => {
                    let f = &nodes[input].value;
                    accumulate(&mut grads, input, kernels::gram_backward(f, &g));
                }
                &Op::Mse { a, b } => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let k = (g.item() + g.item()) / T::from_usize(av.len()).unwrap();
                    let diff: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| k * (x - y)).collect();
                    let da = Tensor::new(av.dims(), diff)?;
                    if needs(b) {
                        accumulate(&mut grads, b, da.map(|v| -v));
                    }
                    if needs(a) {
                        accumulate(&mut grads, a, da);
                    }
                }
                &Op::Tv { input } => {
                    let x = &nodes[input].value;
                    accumulate(&mut grads, input, kernels::tv_backward(x, g.item()));
                }
                &Op::Sum { input } => {
                    let dims = nodes[input].value.dims();
                    accumulate(&mut grads, input, Tensor::full(dims, g.item()));
                }
                &Op::BatchItem { input, index } => {
                    let dims = nodes[input].value.dims();
                    let mut d = Tensor::zeros(dims);
                    let stride = dims[1] * dims[2] * dims[3];
                    d.data_mut()[index * stride..(index + 1) * stride].copy_from_slice(g.data());
                    accumulate(&mut grads, input, d);
                }
                Op::ConcatBatch { inputs } => {
                    let mut offset = 0;
                    for &i in inputs {
                        let dims = nodes[i].value.dims();
                        let len = dims.iter().product::<usize>();
                        if needs(i) {
                            let part = Tensor::new(dims, g.data()[offset..offset + len].to_vec())?;
                            accumulate(&mut grads, i, part);
                        }
                        offset += len;
                    }
                }
            }
        }
        Ok(Gradients { by_node: leaves })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Multiplies `x` in place by a `[1 | n, 1, h, w]` mask broadcast over channels.
fn apply_mask<T: Real>(x: &mut Tensor<T>, mask: &Tensor<T>) {
    let [_, c, h, w] = x.dims();
    let mn = mask.dims()[0];
    let len = h * w;
    let m = mask.data();
    for (plane, chunk) in x.data_mut().chunks_mut(len).enumerate() {
        let b = if mn == 1 { 0 } else { plane / c };
        for (v, &mv) in chunk.iter_mut().zip(&m[b * len..(b + 1) * len]) {
            *v = *v * mv;
        }
    }
}

/// Gradients of one `backward` sweep, keyed by leaf.
pub struct Gradients<T: Real = f32> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the leaf is a constant or unreachable from the loss.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.by_node.remove(&var.id)
    }

    /// Gradient for `var`, or zeros of its shape when unreachable.
    pub fn take_or_zeros(&mut self, var: Var<'_, T>) -> Tensor<T> {
        self.take(var)
            .unwrap_or_else(|| Tensor::zeros(var.dims()))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.tape.nodes.borrow()[self.id].value.dims()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a `[1,1,1,1]` node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Cross-correlation with `kernel: [c_out, c_in, kh, kw]`.
    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize, padding: Padding) -> Result<Var<'t, T>> {
        check_stride(stride, "conv2d")?;
        let x = self.value();
        let k = kernel.value();
        let xp = kernels::pad(&x, padding)?;
        let out = kernels::conv_valid(&xp, &k, stride)?;
        self.tape.push(
            "conv2d",
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                stride,
                padding,
            },
            &[self.id, kernel.id],
        )
    }

    /// Exact adjoint of [`Var::conv2d`] with the same kernel, stride and padding,
    /// producing an `out_hw` spatial grid. `kernel: [c_in_of_self, c_out, kh, kw]`.
    pub fn conv2d_transpose(
        self,
        kernel: Var<'t, T>,
        stride: usize,
        padding: Padding,
        out_hw: (usize, usize),
    ) -> Result<Var<'t, T>> {
        check_stride(stride, "conv2d_transpose")?;
        let y = self.value();
        let k = kernel.value();
        let (h, w) = out_hw;
        kernels::check_padding(padding, h, w)?;
        let p = padding.margin();
        let gp = kernels::conv_valid_input_grad(&y, &k, stride, h + 2 * p, w + 2 * p)?;
        let out = kernels::pad_adjoint(&gp, padding, h, w)?;
        self.tape.push(
            "conv2d_transpose",
            out,
            Op::ConvTranspose2d {
                input: self.id,
                kernel: kernel.id,
                stride,
                padding,
            },
            &[self.id, kernel.id],
        )
    }

    /// Per-(sample, channel) normalization; `scale`, `shift` are `[1, c, 1, 1]`.
    pub fn instance_norm(self, scale: Var<'t, T>, shift: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        if !(eps > T::zero()) {
            return Err(Error::invalid("instance_norm", "eps must be positive"));
        }
        let x = self.value();
        let s = scale.value();
        let b = shift.value();
        let c = x.dims()[1];
        if s.dims() != [1, c, 1, 1] || b.dims() != [1, c, 1, 1] {
            return Err(Error::shape(
                "instance_norm",
                format!("affine params {:?}/{:?} for {c} channels", s.dims(), b.dims()),
            ));
        }
        let (out, cache) = kernels::instance_norm(&x, s.data(), b.data(), eps);
        self.tape.push(
            "instance_norm",
            out,
            Op::InstanceNorm {
                input: self.id,
                scale: scale.id,
                shift: shift.id,
                cache,
            },
            &[self.id, scale.id, shift.id],
        )
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.push("relu", out, Op::Relu { input: self.id }, &[self.id])
    }

    /// Adds a `[1, c, 1, 1]` per-channel bias.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let b = bias.value();
        let [_, c, h, w] = x.dims();
        if b.dims() != [1, c, 1, 1] {
            return Err(Error::shape("add_bias", format!("{:?} for {c} channels", b.dims())));
        }
        let mut out = (*x).clone();
        for (plane, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let bv = b.data()[plane % c];
            for v in chunk {
                *v = *v + bv;
            }
        }
        self.tape.push("add_bias", out, Op::AddBias { input: self.id, bias: bias.id }, &[self.id, bias.id])
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        a.check_same_dims(&b, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(a.dims(), data)?;
        self.tape.push("add", out, Op::Add { a: self.id, b: other.id }, &[self.id, other.id])
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        a.check_same_dims(&b, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(a.dims(), data)?;
        self.tape.push("sub", out, Op::Sub { a: self.id, b: other.id }, &[self.id, other.id])
    }

    pub fn scale(self, factor: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v * factor);
        self.tape.push("scale", out, Op::Scale { input: self.id, factor }, &[self.id])
    }

    /// Broadcast multiply by a `[1 | n, 1, h, w]` mask. The mask is treated as a constant.
    pub fn mul_mask(self, mask: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let m = mask.value();
        let [n, _, h, w] = x.dims();
        let [mn, mc, mh, mw] = m.dims();
        if mc != 1 || mh != h || mw != w || (mn != 1 && mn != n) {
            return Err(Error::shape("mul_mask", format!("mask {:?} for input {:?}", m.dims(), x.dims())));
        }
        let mut out = (*x).clone();
        apply_mask(&mut out, &m);
        self.tape.push("mul_mask", out, Op::MulMask { input: self.id, mask: mask.id }, &[self.id])
    }

    /// `[n, c, h, w] -> [n, 1, c, c]`, normalized by `c*h*w`.
    pub fn gram(self) -> Result<Var<'t, T>> {
        let f = self.value();
        let [_, _, h, w] = f.dims();
        if h * w == 0 {
            return Err(Error::invalid("gram", "empty spatial extent"));
        }
        let out = kernels::gram(&f);
        self.tape.push("gram", out, Op::Gram { input: self.id }, &[self.id])
    }

    /// Mean of squared elementwise differences.
    pub fn mse(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), target.value());
        a.check_same_dims(&b, "mse")?;
        if a.is_empty() {
            return Err(Error::invalid("mse", "empty tensors"));
        }
        let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / T::from_usize(a.len()).unwrap());
        self.tape.push("mse", out, Op::Mse { a: self.id, b: target.id }, &[self.id, target.id])
    }

    /// Mean over elements of squared horizontal and vertical forward differences.
    pub fn tv_loss(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let [_, _, h, w] = x.dims();
        if h < 2 || w < 2 {
            return Err(Error::invalid("tv_loss", format!("spatial dims {h}x{w} must both be >= 2")));
        }
        let out = Tensor::scalar(kernels::tv(&x));
        self.tape.push("tv_loss", out, Op::Tv { input: self.id }, &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push("sum", out, Op::Sum { input: self.id }, &[self.id])
    }

    /// Batch element `index` as an `n = 1` tensor.
    pub fn batch_item(self, index: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if index >= x.dims()[0] {
            return Err(Error::invalid("batch_item", format!("index {index} of batch {}", x.dims()[0])));
        }
        let out = x.batch_item(index);
        self.tape.push("batch_item", out, Op::BatchItem { input: self.id, index }, &[self.id])
    }
}

fn check_stride(stride: usize, op: &'static str) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("stride {stride} not in {{1, 2}}")))
    }
}
