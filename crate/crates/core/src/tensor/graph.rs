use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{dims4, Real, Result, Tensor, TensorError};

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Square(usize),
    SqrtEps(usize),
    SumAll(usize),
    MeanAll(usize),
    LeakyRelu(usize, T),
    Sigmoid(usize),
    Upsample2x(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    BoxSum(usize, usize),
    Diff(usize, usize),
    BatchMean(usize),
    ConcatChannels(Vec<usize>),
    StackBatch(Vec<usize>),
    Warp(usize, usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed operations, appended in execution order.
///
/// Node ids are therefore a topological order; backward walks them in
/// reverse and visits each node once.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenate `[N,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels<'g>(&'g self, parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_channels",
                msg: "empty input list".into(),
            });
        }
        let values: Vec<_> = parts.iter().map(|v| v.value()).collect();
        let (n, _, h, w) = dims4("concat_channels", values[0].shape())?;
        let mut total_c = 0;
        for v in &values {
            let (vn, vc, vh, vw) = dims4("concat_channels", v.shape())?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, total_c, h, w]);
        let d = out.data_mut();
        for b in 0..n {
            let mut off = b * total_c * hw;
            for v in &values {
                let c = v.shape()[1];
                d[off..off + c * hw].copy_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
                off += c * hw;
            }
        }
        let rg = parts.iter().any(|v| v.requires_grad());
        Ok(self.push(out, Op::ConcatChannels(parts.iter().map(|v| v.id).collect()), rg))
    }

    /// Concatenate tensors along the leading (batch) axis.
    pub fn stack_batch<'g>(&'g self, parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let values: Vec<Tensor<T>> = parts.iter().map(|v| (*v.value()).clone()).collect();
        let out = Tensor::stack0(&values).map_err(|e| match e {
            TensorError::Invalid { msg, .. } => TensorError::Invalid { op: "stack_batch", msg },
            other => other,
        })?;
        let rg = parts.iter().any(|v| v.requires_grad());
        Ok(self.push(out, Op::StackBatch(parts.iter().map(|v| v.id).collect()), rg))
    }

    fn run_backward(&self, root: usize, retain: bool) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(TensorError::BackwardTwice);
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root].value.numel() != 1 {
            return Err(TensorError::NotScalar(nodes[root].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        if nodes[root].requires_grad {
            grads[root] = Some(Tensor::ones(nodes[root].value.shape()));
        }
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = nodes[id].op {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        if !retain {
            for node in nodes.iter_mut() {
                node.op = Op::Leaf;
            }
            self.consumed.set(true);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], id: usize, g: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match grads[id].as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => grads[id] = Some(g),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

fn propagate<T: Real>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |i: usize| &*nodes[i].value;
    let need = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            if need(a) {
                accumulate(grads, nodes, a, g.clone());
            }
            if need(b) {
                accumulate(grads, nodes, b, g.clone());
            }
        }
        &Op::Sub(a, b) => {
            if need(a) {
                accumulate(grads, nodes, a, g.clone());
            }
            if need(b) {
                accumulate(grads, nodes, b, g.map(|x| -x));
            }
        }
        &Op::Mul(a, b) => {
            if need(a) {
                accumulate(grads, nodes, a, zip_map(g, val(b), |g, y| g * y));
            }
            if need(b) {
                accumulate(grads, nodes, b, zip_map(g, val(a), |g, x| g * x));
            }
        }
        &Op::Div(a, b) => {
            let bv = val(b);
            if need(a) {
                accumulate(grads, nodes, a, zip_map(g, bv, |g, y| g / y));
            }
            if need(b) {
                let out = val(id);
                let t = zip_map(g, out, |g, q| g * q);
                accumulate(grads, nodes, b, zip_map(&t, bv, |gq, y| -gq / y));
            }
        }
        &Op::Scale(a, c) => accumulate(grads, nodes, a, g.map(|x| x * c)),
        &Op::Offset(a) => accumulate(grads, nodes, a, g.clone()),
        &Op::Square(a) => {
            let two = T::from_f64(2.0);
            accumulate(grads, nodes, a, zip_map(g, val(a), |g, x| two * x * g));
        }
        &Op::SqrtEps(a) => {
            let half = T::from_f64(0.5);
            accumulate(grads, nodes, a, zip_map(g, val(id), |g, s| half * g / s));
        }
        &Op::SumAll(a) => accumulate(grads, nodes, a, Tensor::full(val(a).shape(), g.item())),
        &Op::MeanAll(a) => {
            let n = T::from_f64(val(a).numel() as f64);
            accumulate(grads, nodes, a, Tensor::full(val(a).shape(), g.item() / n));
        }
        &Op::LeakyRelu(a, slope) => {
            accumulate(
                grads,
                nodes,
                a,
                zip_map(g, val(a), |g, x| if x > T::zero() { g } else { g * slope }),
            );
        }
        &Op::Sigmoid(a) => {
            accumulate(grads, nodes, a, zip_map(g, val(id), |g, s| g * s * (T::one() - s)));
        }
        &Op::Upsample2x(a) => {
            let d = dims4("upsample2x", val(a).shape()).expect("checked in forward");
            accumulate(grads, nodes, a, kernels::upsample2x_backward(g, d));
        }
        &Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            let x = val(input);
            let k = val(kernel);
            let (_, c, h, w) = dims4("conv2d", x.shape()).expect("checked in forward");
            let (kh, kw) = (k.shape()[2], k.shape()[3]);
            let out = val(id);
            let geom = ConvGeom {
                c,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                ho: out.shape()[2],
                wo: out.shape()[3],
            };
            let want = (need(input), need(kernel), bias.map(need).unwrap_or(false));
            let cg = kernels::conv2d_backward(x, k, g, &geom, want);
            if let Some(d) = cg.input {
                accumulate(grads, nodes, input, d);
            }
            if let Some(d) = cg.kernel {
                accumulate(grads, nodes, kernel, d);
            }
            if let (Some(b), Some(d)) = (bias, cg.bias) {
                accumulate(grads, nodes, b, d);
            }
        }
        &Op::BoxSum(a, window) => {
            let d = dims4("box_sum", val(a).shape()).expect("checked in forward");
            accumulate(grads, nodes, a, kernels::box_sum(g, d, window));
        }
        &Op::Diff(a, axis) => {
            let d = dims4("diff", val(a).shape()).expect("checked in forward");
            accumulate(grads, nodes, a, kernels::diff_backward(g, d, axis));
        }
        &Op::BatchMean(a) => {
            let shape = val(a).shape().to_vec();
            let n = shape[0];
            let inv = T::one() / T::from_f64(n as f64);
            let scaled = g.map(|x| x * inv);
            let mut data = Vec::with_capacity(scaled.numel() * n);
            for _ in 0..n {
                data.extend_from_slice(scaled.data());
            }
            accumulate(grads, nodes, a, Tensor::new(&shape, data).expect("shape preserved"));
        }
        Op::ConcatChannels(parts) => {
            let (n, total_c, h, w) = dims4("concat_channels", g.shape()).expect("checked in forward");
            let hw = h * w;
            let mut off_c = 0;
            for &p in parts {
                let c = val(p).shape()[1];
                if need(p) {
                    let mut d = Tensor::zeros(&[n, c, h, w]);
                    for b in 0..n {
                        let src = (b * total_c + off_c) * hw;
                        d.data_mut()[b * c * hw..(b + 1) * c * hw].copy_from_slice(&g.data()[src..src + c * hw]);
                    }
                    accumulate(grads, nodes, p, d);
                }
                off_c += c;
            }
        }
        Op::StackBatch(parts) => {
            let inner: usize = g.shape()[1..].iter().product();
            let mut lead = 0;
            for &p in parts {
                let np = val(p).shape()[0];
                if need(p) {
                    let d = Tensor::new(val(p).shape(), g.data()[lead * inner..(lead + np) * inner].to_vec())
                        .expect("shape preserved");
                    accumulate(grads, nodes, p, d);
                }
                lead += np;
            }
        }
        &Op::Warp(src, field) => {
            let d = dims4("warp", val(src).shape()).expect("checked in forward");
            let (ds, df) = kernels::warp_backward(val(src), val(field), g, d, (need(src), need(field)));
            if let Some(ds) = ds {
                accumulate(grads, nodes, src, ds);
            }
            if let Some(df) = df {
                accumulate(grads, nodes, field, df);
            }
        }
    }
}

/// Gradients of a scalar with respect to every tracked leaf of its graph.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `var`, or `None` if it is untracked or unreachable.
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zeros when the output does not depend on it.
    pub fn wrt(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tracked(self.id)
    }

    /// Reverse pass from this scalar. Clears the tape afterwards.
    pub fn backward(&self) -> Result<Gradients<T>> {
        self.graph.run_backward(self.id, false)
    }

    /// Reverse pass that keeps the tape for another backward call.
    pub fn backward_retain(&self) -> Result<Gradients<T>> {
        self.graph.run_backward(self.id, true)
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: &Var<'g, T>,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = zip_map(&a, &b, f);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(out, op, rg))
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(&self, c: T) -> Var<'g, T> {
        self.unary(self.value().map(|x| x * c), Op::Scale(self.id, c))
    }

    /// Adds the constant `c` to every element.
    pub fn offset(&self, c: T) -> Var<'g, T> {
        self.unary(self.value().map(|x| x + c), Op::Offset(self.id))
    }

    pub fn square(&self) -> Var<'g, T> {
        self.unary(self.value().map(|x| x * x), Op::Square(self.id))
    }

    /// `sqrt(x + eps)`, smooth at zero for `eps > 0`.
    pub fn sqrt_eps(&self, eps: T) -> Var<'g, T> {
        self.unary(self.value().map(|x| (x + eps).sqrt()), Op::SqrtEps(self.id))
    }

    pub fn sum_all(&self) -> Var<'g, T> {
        self.unary(Tensor::scalar(self.value().sum()), Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var<'g, T> {
        self.unary(Tensor::scalar(self.value().mean()), Op::MeanAll(self.id))
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'g, T> {
        self.unary(
            self.value().map(|x| if x > T::zero() { x } else { x * slope }),
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(
            self.value().map(|x| T::one() / (T::one() + (-x).exp())),
            Op::Sigmoid(self.id),
        )
    }

    /// Nearest-neighbor 2× upsampling of `[N,C,H,W]`.
    pub fn upsample2x(&self) -> Result<Var<'g, T>> {
        let v = self.value();
        let d = dims4("upsample2x", v.shape())?;
        Ok(self.unary(kernels::upsample2x_forward(&v, d), Op::Upsample2x(self.id)))
    }

    /// Cross-correlation of `[N,C,H,W]` with a `[F,C,kh,kw]` kernel.
    pub fn conv2d(
        &self,
        kernel: &Var<'g, T>,
        bias: Option<&Var<'g, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let k = kernel.value();
        let (_, c, h, w) = dims4("conv2d", x.shape())?;
        let (f, kc, kh, kw) = dims4("conv2d", k.shape())?;
        if kc != c {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "kernel channels (axis 1) vs input channels (axis 1)",
                expected: c.to_string(),
                found: kc,
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "kernel height/width (axes 2,3)",
                expected: "odd".into(),
                found: if kh % 2 == 0 { kh } else { kw },
            });
        }
        if let Some(b) = bias {
            let bs = b.value();
            if bs.shape() != [f] {
                return Err(TensorError::Dimension {
                    op: "conv2d",
                    axis: "bias length vs kernel filters (axis 0)",
                    expected: f.to_string(),
                    found: bs.numel(),
                });
            }
        }
        let ho = super::conv2d_output_size(h, kh, stride, padding).ok_or(TensorError::Dimension {
            op: "conv2d",
            axis: "input height (axis 2)",
            expected: format!(">= {}", kh.saturating_sub(2 * padding)),
            found: h,
        })?;
        let wo = super::conv2d_output_size(w, kw, stride, padding).ok_or(TensorError::Dimension {
            op: "conv2d",
            axis: "input width (axis 3)",
            expected: format!(">= {}", kw.saturating_sub(2 * padding)),
            found: w,
        })?;
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        };
        let bv = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(&x, &k, bv.as_deref(), &geom);
        let rg = self.requires_grad() || kernel.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.graph.push(
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Zero-padded `window × window` neighborhood sum of every pixel.
    pub fn box_sum(&self, window: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        let d = dims4("box_sum", v.shape())?;
        if window % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "box_sum",
                msg: format!("window must be odd, got {window}"),
            });
        }
        Ok(self.unary(kernels::box_sum(&v, d, window), Op::BoxSum(self.id, window)))
    }

    /// Forward difference along the row (`axis = 2`) or column (`axis = 3`) axis.
    pub fn diff(&self, axis: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        let d = dims4("diff", v.shape())?;
        let extent = if axis == 2 { d.2 } else { d.3 };
        if !(axis == 2 || axis == 3) || extent < 2 {
            return Err(TensorError::Invalid {
                op: "diff",
                msg: format!("axis {axis} of shape {:?} cannot be differenced", v.shape()),
            });
        }
        Ok(self.unary(kernels::diff_forward(&v, d, axis), Op::Diff(self.id, axis)))
    }

    /// Mean over the leading axis: `[N,...] -> [1,...]`.
    pub fn batch_mean(&self) -> Result<Var<'g, T>> {
        let v = self.value();
        let n = *v.shape().first().ok_or(TensorError::Rank {
            op: "batch_mean",
            expected: 1,
            shape: vec![],
        })?;
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "batch_mean",
                msg: "empty batch".into(),
            });
        }
        let inner = v.numel() / n;
        let mut acc = v.data()[..inner].to_vec();
        for b in 1..n {
            for (a, &x) in acc.iter_mut().zip(&v.data()[b * inner..(b + 1) * inner]) {
                *a += x;
            }
        }
        let nt = T::from_f64(n as f64);
        for a in acc.iter_mut() {
            *a = *a / nt;
        }
        let mut shape = v.shape().to_vec();
        shape[0] = 1;
        let out = Tensor::new(&shape, acc)?;
        Ok(self.unary(out, Op::BatchMean(self.id)))
    }

    /// Bilinear resampling of `self` (`[N,C,H,W]`) at `p + field`, where
    /// `field` is `[N,2,H,W]` holding (row, col) displacements in pixels.
    /// Samples outside the image read zero.
    pub fn warp(&self, field: &Var<'g, T>) -> Result<Var<'g, T>> {
        let s = self.value();
        let f = field.value();
        let d = dims4("warp", s.shape())?;
        let (fnb, fc, fh, fw) = dims4("warp", f.shape())?;
        if fc != 2 {
            return Err(TensorError::Dimension {
                op: "warp",
                axis: "field components (axis 1)",
                expected: "2".into(),
                found: fc,
            });
        }
        if (fnb, fh, fw) != (d.0, d.2, d.3) {
            return Err(TensorError::ShapeMismatch {
                op: "warp",
                lhs: s.shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
        let out = kernels::warp_forward(&s, &f, d);
        let rg = self.requires_grad() || field.requires_grad();
        Ok(self.graph.push(out, Op::Warp(self.id, field.id), rg))
    }
}
