//! Minimal reverse-mode differentiation engine.
//!
//! A [`Tape`] records a define-by-run trace of primitive operations; the
//! trace is rebuilt on every forward pass, so iterative procedures that
//! change their inputs each step (the boundary attack differentiates the
//! network input, not just parameters) get exact gradients without graph
//! surgery. [`Tape::backward`] walks the trace in reverse and returns a
//! [`GradientMap`] holding one gradient per differentiable leaf.
//!
//! All arithmetic is in `f64`. Softmax and log-softmax apply
//! max-subtraction so temperature-scaled logits cannot overflow.

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, softmax_rows, Tensor};
use std::collections::BTreeMap;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable leaf (parameter or network input).
    Leaf,
    /// Non-differentiable leaf.
    Constant,
    /// `x @ w + b` with x `[B,D]`, w `[D,M]`, b `[M]`.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    /// Valid 2-D cross-correlation, stride 1: x `[B,C,H,W]`, kernel `[F,C,KH,KW]`, bias `[F]`.
    Conv2d { x: NodeId, kernel: NodeId, bias: NodeId },
    /// Non-overlapping max pooling; window extents must divide the spatial extents.
    MaxPool { x: NodeId, window: (usize, usize) },
    /// Non-overlapping mean pooling.
    MeanPool { x: NodeId, window: (usize, usize) },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    Exp { x: NodeId },
    Log { x: NodeId },
    /// Row-wise softmax over the last axis.
    Softmax { x: NodeId },
    /// Row-wise log-softmax over the last axis.
    LogSoftmax { x: NodeId },
    /// Sum of all elements, producing a rank-0 scalar.
    Sum { x: NodeId },
    /// Mean of all elements, producing a rank-0 scalar.
    Mean { x: NodeId },
    /// Shape reinterpretation; values are untouched.
    Reshape { x: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar output with respect to every differentiable leaf.
#[derive(Debug, Clone)]
pub struct GradientMap {
    entries: BTreeMap<usize, Tensor>,
}

impl GradientMap {
    /// Gradient for `leaf`; rejects ids that are not differentiable leaves
    /// of the traced tape.
    pub fn get(&self, leaf: NodeId) -> Result<&Tensor> {
        self.entries.get(&leaf.0).ok_or_else(|| {
            Error::InvalidArgument(format!("node {} is not a differentiable leaf of this trace", leaf.0))
        })
    }

    /// Leaves in tape order with their gradients.
    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.entries.iter().map(|(&id, g)| (NodeId(id), g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Define-by-run operation trace with cached forward values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value cached at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Registers a constant; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch { op, detail }
    }

    /// `x @ w + b` for a batch of row vectors.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Self::shape_err(
                "affine",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let (batch, d, m) = (xs[0], xs[1], ws[1]);
        let xv = self.value(x).values();
        let wv = self.value(w).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; batch * m];
        for i in 0..batch {
            let row = &xv[i * d..(i + 1) * d];
            let out_row = &mut out[i * m..(i + 1) * m];
            out_row.copy_from_slice(bv);
            for (k, &xk) in row.iter().enumerate() {
                let w_row = &wv[k * m..(k + 1) * m];
                for (o, &wkj) in out_row.iter_mut().zip(w_row) {
                    *o += xk * wkj;
                }
            }
        }
        let value = Tensor::new(vec![batch, m], out)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    /// Valid cross-correlation with stride 1 over `[B,C,H,W]` inputs.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, ks, bs) = (
            self.value(x).shape().to_vec(),
            self.value(kernel).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 {
            return Err(Self::shape_err("conv2d", format!("x {xs:?}, kernel {ks:?}, bias {bs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c || bs[0] != f || kh > h || kw > w {
            return Err(Self::shape_err("conv2d", format!("x {xs:?}, kernel {ks:?}, bias {bs:?}")));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let xv = self.value(x).values();
        let kv = self.value(kernel).values();
        let bv = self.value(bias).values();
        let mut out = vec![0.0; b * f * oh * ow];
        for n in 0..b {
            for fo in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bv[fo];
                        for ci in 0..c {
                            for ky in 0..kh {
                                let x_base = ((n * c + ci) * h + oy + ky) * w + ox;
                                let k_base = ((fo * c + ci) * kh + ky) * kw;
                                for kx in 0..kw {
                                    acc += xv[x_base + kx] * kv[k_base + kx];
                                }
                            }
                        }
                        out[((n * f + fo) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, f, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, bias }))
    }

    fn pool_shape(&self, op: &'static str, x: NodeId, window: (usize, usize)) -> Result<(usize, usize, usize, usize)> {
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(Self::shape_err(op, format!("expected [B,C,H,W], got {xs:?}")));
        }
        let (ph, pw) = window;
        if ph == 0 || pw == 0 || xs[2] % ph != 0 || xs[3] % pw != 0 {
            return Err(Self::shape_err(
                op,
                format!("window {window:?} does not tile spatial extents of {xs:?}"),
            ));
        }
        Ok((xs[0], xs[1], xs[2], xs[3]))
    }

    /// Non-overlapping max pooling; the first maximal element wins ties.
    pub fn max_pool(&mut self, x: NodeId, window: (usize, usize)) -> Result<NodeId> {
        let (b, c, h, w) = self.pool_shape("max_pool", x, window)?;
        let (ph, pw) = window;
        let (oh, ow) = (h / ph, w / pw);
        let xv = self.value(x).values();
        let mut out = vec![0.0; b * c * oh * ow];
        for n in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..ph {
                            for kx in 0..pw {
                                let v = xv[((n * c + ci) * h + oy * ph + ky) * w + ox * pw + kx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[((n * c + ci) * oh + oy) * ow + ox] = best;
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, window }))
    }

    /// Non-overlapping mean pooling.
    pub fn mean_pool(&mut self, x: NodeId, window: (usize, usize)) -> Result<NodeId> {
        let (b, c, h, w) = self.pool_shape("mean_pool", x, window)?;
        let (ph, pw) = window;
        let (oh, ow) = (h / ph, w / pw);
        let inv = 1.0 / (ph * pw) as f64;
        let xv = self.value(x).values();
        let mut out = vec![0.0; b * c * oh * ow];
        for n in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..ph {
                            for kx in 0..pw {
                                acc += xv[((n * c + ci) * h + oy * ph + ky) * w + ox * pw + kx];
                            }
                        }
                        out[((n * c + ci) * oh + oy) * ow + ox] = acc * inv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(value, Op::MeanPool { x, window }))
    }

    /// Rectifier, `max(v, 0)` elementwise.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.unary_map(x, |v| v.max(0.0))?;
        Ok(self.push(value, Op::Relu { x }))
    }

    /// Hyperbolic tangent elementwise; the smooth activation option.
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.unary_map(x, f64::tanh)?;
        Ok(self.push(value, Op::Tanh { x }))
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.unary_map(x, f64::exp)?;
        Ok(self.push(value, Op::Exp { x }))
    }

    /// Elementwise natural logarithm; rejects non-positive inputs.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).values().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("log of non-positive value".into()));
        }
        let value = self.unary_map(x, f64::ln)?;
        Ok(self.push(value, Op::Log { x }))
    }

    fn unary_map(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.values().iter().map(|&v| f(v)).collect())
    }

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes("add", a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), values)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Elementwise product of two same-shape nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes("mul", a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), values)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Multiplies every element by a fixed factor.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let value = self.unary_map(x, |v| v * factor)?;
        Ok(self.push(value, Op::Scale { x, factor }))
    }

    fn last_axis(&self, op: &'static str, x: NodeId) -> Result<usize> {
        let shape = self.value(x).shape();
        match shape.last() {
            Some(&k) => Ok(k),
            None => Err(Self::shape_err(op, "rank-0 input".into())),
        }
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let k = self.last_axis("softmax", x)?;
        let t = self.value(x);
        let mut out = vec![0.0; t.len()];
        softmax_rows(t.values(), k, &mut out);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let k = self.last_axis("log_softmax", x)?;
        let t = self.value(x);
        let mut out = vec![0.0; t.len()];
        log_softmax_rows(t.values(), k, &mut out);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax { x }))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).values().iter().sum();
        let value = Tensor::scalar(total)?;
        Ok(self.push(value, Op::Sum { x }))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let total: f64 = t.values().iter().sum();
        let value = Tensor::scalar(total / t.len() as f64)?;
        Ok(self.push(value, Op::Mean { x }))
    }

    /// Reinterprets the node under a new shape of equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Reverse pass from a single-element output node.
    ///
    /// Returns gradients for every differentiable leaf on the tape; leaves
    /// the output does not depend on get zero gradients of matching shape.
    pub fn backward(&self, output: NodeId) -> Result<GradientMap> {
        if output.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("node {} not on tape", output.0)));
        }
        if self.value(output).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(grad);
                }
                Op::Constant => {}
                Op::Affine { x, w, b } => {
                    let xs = self.value(x).shape();
                    let (batch, d, m) = (xs[0], xs[1], self.value(w).shape()[1]);
                    let xv = self.value(x).values();
                    let wv = self.value(w).values();
                    {
                        let gx = Self::grad_buf(&mut grads, x, batch * d);
                        for i in 0..batch {
                            for k in 0..d {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += grad[i * m + j] * wv[k * m + j];
                                }
                                gx[i * d + k] += acc;
                            }
                        }
                    }
                    {
                        let gw = Self::grad_buf(&mut grads, w, d * m);
                        for i in 0..batch {
                            for k in 0..d {
                                let xik = xv[i * d + k];
                                for j in 0..m {
                                    gw[k * m + j] += xik * grad[i * m + j];
                                }
                            }
                        }
                    }
                    {
                        let gb = Self::grad_buf(&mut grads, b, m);
                        for i in 0..batch {
                            for j in 0..m {
                                gb[j] += grad[i * m + j];
                            }
                        }
                    }
                }
                Op::Conv2d { x, kernel, bias } => {
                    let xs = self.value(x).shape().to_vec();
                    let ks = self.value(kernel).shape().to_vec();
                    let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let xv = self.value(x).values();
                    let kv = self.value(kernel).values();
                    {
                        let gx = Self::grad_buf(&mut grads, x, bn * c * h * w);
                        for n in 0..bn {
                            for fo in 0..f {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        let g = grad[((n * f + fo) * oh + oy) * ow + ox];
                                        for ci in 0..c {
                                            for ky in 0..kh {
                                                let x_base = ((n * c + ci) * h + oy + ky) * w + ox;
                                                let k_base = ((fo * c + ci) * kh + ky) * kw;
                                                for kx in 0..kw {
                                                    gx[x_base + kx] += g * kv[k_base + kx];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gk = Self::grad_buf(&mut grads, kernel, f * c * kh * kw);
                        for n in 0..bn {
                            for fo in 0..f {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        let g = grad[((n * f + fo) * oh + oy) * ow + ox];
                                        for ci in 0..c {
                                            for ky in 0..kh {
                                                let x_base = ((n * c + ci) * h + oy + ky) * w + ox;
                                                let k_base = ((fo * c + ci) * kh + ky) * kw;
                                                for kx in 0..kw {
                                                    gk[k_base + kx] += g * xv[x_base + kx];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gb = Self::grad_buf(&mut grads, bias, f);
                        for n in 0..bn {
                            for fo in 0..f {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        gb[fo] += grad[((n * f + fo) * oh + oy) * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPool { x, window } => {
                    let xs = self.value(x).shape();
                    let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ph, pw) = window;
                    let (oh, ow) = (h / ph, w / pw);
                    let xv = self.value(x).values();
                    let gx = Self::grad_buf(&mut grads, x, bn * c * h * w);
                    for n in 0..bn {
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = f64::NEG_INFINITY;
                                    let mut best_idx = 0;
                                    for ky in 0..ph {
                                        for kx in 0..pw {
                                            let idx2 = ((n * c + ci) * h + oy * ph + ky) * w + ox * pw + kx;
                                            if xv[idx2] > best {
                                                best = xv[idx2];
                                                best_idx = idx2;
                                            }
                                        }
                                    }
                                    gx[best_idx] += grad[((n * c + ci) * oh + oy) * ow + ox];
                                }
                            }
                        }
                    }
                }
                Op::MeanPool { x, window } => {
                    let xs = self.value(x).shape();
                    let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ph, pw) = window;
                    let (oh, ow) = (h / ph, w / pw);
                    let inv = 1.0 / (ph * pw) as f64;
                    let gx = Self::grad_buf(&mut grads, x, bn * c * h * w);
                    for n in 0..bn {
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g = grad[((n * c + ci) * oh + oy) * ow + ox] * inv;
                                    for ky in 0..ph {
                                        for kx in 0..pw {
                                            gx[((n * c + ci) * h + oy * ph + ky) * w + ox * pw + kx] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(x).values().to_vec();
                    let gx = Self::grad_buf(&mut grads, x, xv.len());
                    for (i, &v) in xv.iter().enumerate() {
                        if v > 0.0 {
                            gx[i] += grad[i];
                        }
                    }
                }
                Op::Tanh { x } => {
                    let yv = node.value.values().to_vec();
                    let gx = Self::grad_buf(&mut grads, x, yv.len());
                    for (i, &y) in yv.iter().enumerate() {
                        gx[i] += grad[i] * (1.0 - y * y);
                    }
                }
                Op::Add { a, b } => {
                    let n = grad.len();
                    {
                        let ga = Self::grad_buf(&mut grads, a, n);
                        for (g, &d) in ga.iter_mut().zip(&grad) {
                            *g += d;
                        }
                    }
                    {
                        let gb = Self::grad_buf(&mut grads, b, n);
                        for (g, &d) in gb.iter_mut().zip(&grad) {
                            *g += d;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.value(a).values().to_vec();
                    let bv = self.value(b).values().to_vec();
                    {
                        let ga = Self::grad_buf(&mut grads, a, av.len());
                        for i in 0..av.len() {
                            ga[i] += grad[i] * bv[i];
                        }
                    }
                    {
                        let gb = Self::grad_buf(&mut grads, b, bv.len());
                        for i in 0..bv.len() {
                            gb[i] += grad[i] * av[i];
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    let gx = Self::grad_buf(&mut grads, x, grad.len());
                    for (g, &d) in gx.iter_mut().zip(&grad) {
                        *g += factor * d;
                    }
                }
                Op::Exp { x } => {
                    let yv = node.value.values().to_vec();
                    let gx = Self::grad_buf(&mut grads, x, yv.len());
                    for (i, &y) in yv.iter().enumerate() {
                        gx[i] += grad[i] * y;
                    }
                }
                Op::Log { x } => {
                    let xv = self.value(x).values().to_vec();
                    let gx = Self::grad_buf(&mut grads, x, xv.len());
                    for (i, &v) in xv.iter().enumerate() {
                        gx[i] += grad[i] / v;
                    }
                }
                Op::Softmax { x } => {
                    let yv = node.value.values();
                    let k = *node.value.shape().last().unwrap();
                    let n = yv.len();
                    let mut gpart = vec![0.0; n];
                    for r in 0..n / k {
                        let y_row = &yv[r * k..(r + 1) * k];
                        let g_row = &grad[r * k..(r + 1) * k];
                        let dot: f64 = y_row.iter().zip(g_row).map(|(&y, &g)| y * g).sum();
                        for j in 0..k {
                            gpart[r * k + j] = y_row[j] * (g_row[j] - dot);
                        }
                    }
                    let gx = Self::grad_buf(&mut grads, x, n);
                    for (g, d) in gx.iter_mut().zip(gpart) {
                        *g += d;
                    }
                }
                Op::LogSoftmax { x } => {
                    let yv = node.value.values();
                    let k = *node.value.shape().last().unwrap();
                    let n = yv.len();
                    let mut gpart = vec![0.0; n];
                    for r in 0..n / k {
                        let y_row = &yv[r * k..(r + 1) * k];
                        let g_row = &grad[r * k..(r + 1) * k];
                        let gsum: f64 = g_row.iter().sum();
                        for j in 0..k {
                            gpart[r * k + j] = g_row[j] - y_row[j].exp() * gsum;
                        }
                    }
                    let gx = Self::grad_buf(&mut grads, x, n);
                    for (g, d) in gx.iter_mut().zip(gpart) {
                        *g += d;
                    }
                }
                Op::Sum { x } => {
                    let n = self.value(x).len();
                    let gx = Self::grad_buf(&mut grads, x, n);
                    for g in gx.iter_mut() {
                        *g += grad[0];
                    }
                }
                Op::Mean { x } => {
                    let n = self.value(x).len();
                    let d = grad[0] / n as f64;
                    let gx = Self::grad_buf(&mut grads, x, n);
                    for g in gx.iter_mut() {
                        *g += d;
                    }
                }
                Op::Reshape { x } => {
                    let gx = Self::grad_buf(&mut grads, x, grad.len());
                    for (g, &d) in gx.iter_mut().zip(&grad) {
                        *g += d;
                    }
                }
            }
        }

        let mut entries = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let values = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                entries.insert(idx, Tensor::new(node.value.shape().to_vec(), values)?);
            }
        }
        Ok(GradientMap { entries })
    }

    fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// `(leaf position, element index)` of the worst disagreement, if any
    /// element was checked.
    pub worst: Option<(usize, usize)>,
    pub elements_checked: usize,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Relative disagreement with a floor so near-zero gradients are compared
/// absolutely at 1e-3 scale.
pub fn gradient_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central difference of the scalar `build` output with respect to one
/// element of one leaf.
pub fn central_difference<F>(
    build: &F,
    leaves: &[Tensor],
    leaf_idx: usize,
    elem_idx: usize,
    step: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |shift: f64| -> Result<f64> {
        let mut perturbed: Vec<Tensor> = leaves.to_vec();
        let mut values = perturbed[leaf_idx].values().to_vec();
        values[elem_idx] += shift;
        perturbed[leaf_idx] = Tensor::new(perturbed[leaf_idx].shape().to_vec(), values)?;
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        tape.value(out).item()
    };
    Ok((eval(step)? - eval(-step)?) / (2.0 * step))
}

/// Checks the backward pass of `build` against central differences on the
/// listed `(leaf, element)` coordinates.
pub fn finite_difference_check_at<F>(
    build: F,
    leaves: &[Tensor],
    coords: &[(usize, usize)],
    step: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let grads = tape.backward(out)?;

    let mut report = FdReport {
        max_rel_error: 0.0,
        tolerance,
        worst: None,
        elements_checked: 0,
    };
    for &(li, ei) in coords {
        let analytic = grads.get(ids[li])?.values()[ei];
        let numeric = central_difference(&build, leaves, li, ei, step)?;
        let rel = gradient_rel_error(analytic, numeric);
        report.elements_checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((li, ei));
        }
    }
    Ok(report)
}

/// [`finite_difference_check_at`] over every element of every leaf.
pub fn finite_difference_check<F>(
    build: F,
    leaves: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut coords = Vec::new();
    for (li, leaf) in leaves.iter().enumerate() {
        for ei in 0..leaf.len() {
            coords.push((li, ei));
        }
    }
    finite_difference_check_at(build, leaves, &coords, step, tolerance)
}
