//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node indices
//! are already a topological order and the backward pass is a single reverse
//! sweep. Values are never mutated once recorded.
//!
//! Gradients accumulate on leaves across repeated [`Graph::backward`] calls
//! until [`Graph::zero_grad`] is called. Intermediate gradients are scratch
//! space local to one backward call.

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Clamp applied to probabilities before taking logarithms in [`Graph::bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    GapSpatial(Var),
    GmpSpatial {
        input: Var,
        argmax: Vec<usize>,
    },
    ChannelMeanMax {
        input: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: T,
    },
    Sigmoid(Var),
    Relu(Var),
    ConcatChannels(Var, Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Bce {
        probs: Var,
        targets: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(Error::Rank {
                op,
                expected: 4,
                shape: s.to_vec(),
            });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Cross-correlation of an `(N, C, H, W)` input with `(O, C, kh, kw)` filters.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = self.dims4(input, OP)?;
        let [o, wc, kh, kw] = self.dims4(weight, OP)?;
        if wc != c {
            return Err(Error::Dimension {
                op: OP,
                axis: 1,
                name: "input channels",
                expected: wc,
                actual: c,
            });
        }
        if self.shape(bias) != [o] {
            return Err(Error::Dimension {
                op: OP,
                axis: 0,
                name: "bias length",
                expected: o,
                actual: self.value(bias).numel(),
            });
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        if h + 2 * padding < kh {
            return Err(Error::Dimension {
                op: OP,
                axis: 2,
                name: "padded height",
                expected: kh,
                actual: h + 2 * padding,
            });
        }
        if w + 2 * padding < kw {
            return Err(Error::Dimension {
                op: OP,
                axis: 3,
                name: "padded width",
                expected: kw,
                actual: w + 2 * padding,
            });
        }
        let geometry = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let data = conv::forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new([n, o, geometry.out_h, geometry.out_w], data)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            rg,
        ))
    }

    /// 1x1 convolution: mixes channels independently at each position.
    pub fn pointwise_conv(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ws = self.shape(weight);
        if ws.len() == 4 && (ws[2] != 1 || ws[3] != 1) {
            return Err(Error::Dimension {
                op: "pointwise_conv",
                axis: 2,
                name: "kernel height",
                expected: 1,
                actual: ws[2],
            });
        }
        self.conv2d(input, weight, bias, 1, 0)
    }

    /// Per-channel spatial mean, `(N, C, H, W) -> (N, C, 1, 1)`.
    pub fn gap_spatial(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "gap_spatial")?;
        let plane = h * w;
        let inv = T::one() / T::of(plane as f64);
        let data: Vec<T> = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let value = Tensor::new([n, c, 1, 1], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::GapSpatial(input), rg))
    }

    /// Per-channel spatial max. The gradient goes to the first maximal
    /// element in row-major order.
    pub fn gmp_spatial(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "gmp_spatial")?;
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (i, p) in self.value(input).data().chunks(plane).enumerate() {
            let (best, _) = p
                .iter()
                .enumerate()
                .fold((0, p[0]), |(bi, bv), (j, &v)| if v > bv || (v.is_nan() && !bv.is_nan()) { (j, v) } else { (bi, bv) });
            data.push(p[best]);
            argmax.push(i * plane + best);
        }
        let value = Tensor::new([n, c, 1, 1], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::GmpSpatial { input, argmax }, rg))
    }

    /// Mean and max across channels at every position, `(N, C, H, W) -> (N, 2, H, W)`.
    pub fn channel_mean_max(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "channel_mean_max")?;
        let plane = h * w;
        let x = self.value(input).data();
        let inv = T::one() / T::of(c as f64);
        let mut data = vec![T::zero(); n * 2 * plane];
        let mut argmax = vec![0usize; n * plane];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let mut sum = T::zero();
                let mut best = x[base + p];
                let mut best_c = 0;
                for ch in 0..c {
                    let v = x[base + ch * plane + p];
                    sum = sum + v;
                    if v > best || (v.is_nan() && !best.is_nan()) {
                        best = v;
                        best_c = ch;
                    }
                }
                data[b * 2 * plane + p] = sum * inv;
                data[b * 2 * plane + plane + p] = best;
                argmax[b * plane + p] = base + best_c * plane + p;
            }
        }
        let value = Tensor::new([n, 2, h, w], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::ChannelMeanMax { input, argmax }, rg))
    }

    /// Elementwise sum with size-1 axes broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Alias of [`Graph::add`].
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add(a, b)
    }

    /// Elementwise product with size-1 axes broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::of(scale), T::of(shift));
        let value = self.value(input).map(|v| s * v + t);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Affine { input, scale: s }, rg)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, input: Var) -> Var {
        self.affine(input, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sigmoid(input), rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v < T::zero() { T::zero() } else { v });
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [n, ca, h, w] = self.dims4(a, OP)?;
        let sb = self.dims4(b, OP)?;
        for (axis, (name, expected)) in [(0, ("batch", n)), (2, ("height", h)), (3, ("width", w))] {
            if sb[axis] != expected {
                return Err(Error::Dimension {
                    op: OP,
                    axis,
                    name,
                    expected,
                    actual: sb[axis],
                });
            }
        }
        let cb = sb[1];
        let plane = h * w;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&xa[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&xb[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new([n, ca + cb, h, w], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    /// `(N, in) x (out, in)^T + (out)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 2 {
            return Err(Error::Rank {
                op: OP,
                expected: 2,
                shape: xs.to_vec(),
            });
        }
        if ws.len() != 2 {
            return Err(Error::Rank {
                op: OP,
                expected: 2,
                shape: ws.to_vec(),
            });
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if ws[1] != fin {
            return Err(Error::Dimension {
                op: OP,
                axis: 1,
                name: "input features",
                expected: ws[1],
                actual: fin,
            });
        }
        if self.shape(bias) != [fout] {
            return Err(Error::Dimension {
                op: OP,
                axis: 0,
                name: "bias length",
                expected: fout,
                actual: self.value(bias).numel(),
            });
        }
        let bias_v = self.value(bias).data();
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(bias_v);
        }
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            self.value(input).data(),
            (fin as isize, 1),
            self.value(weight).data(),
            (1, fin as isize),
            T::one(),
            &mut out,
            (fout as isize, 1),
        );
        let value = Tensor::new([n, fout], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel();
        let s = self.sum(input);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Batch-mean softmax cross-entropy of `(N, K)` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(Error::Rank {
                op: OP,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        let (n, k) = (s[0], s[1]);
        if targets.len() != n {
            return Err(Error::Dimension {
                op: OP,
                axis: 0,
                name: "target count",
                expected: n,
                actual: targets.len(),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::contract(format!("class index {t} out of range for {k} classes")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let mut loss = T::zero();
        for (row, &t) in probs.chunks(k).zip(targets) {
            let p = if row[t].is_nan() { row[t] } else { row[t].max(T::min_positive_value()) };
            loss = loss - p.ln();
        }
        loss = loss / T::of(n as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Elementwise binary cross-entropy `-(t ln p + (1 - t) ln(1 - p))`.
    ///
    /// `p` is clamped to `[BCE_EPS, 1 - BCE_EPS]`; the backward pass
    /// evaluates the derivative at the clamped value.
    pub fn bce(&mut self, probs: Var, targets: &[T]) -> Result<Var> {
        let p = self.value(probs);
        if p.numel() != targets.len() {
            return Err(Error::contract(format!(
                "bce: {} probabilities but {} targets",
                p.numel(),
                targets.len()
            )));
        }
        let value = Tensor::new(
            p.shape().to_vec(),
            p.data()
                .iter()
                .zip(targets)
                .map(|(&p, &t)| bce_value(p, t))
                .collect(),
        )?;
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            value,
            Op::Bce {
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    fn broadcast_binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(va.shape().to_vec(), data);
        }
        let plan = BroadcastPlan::new(va.shape(), vb.shape())?;
        let (xa, xb) = (va.data(), vb.data());
        let mut data = Vec::with_capacity(plan.numel());
        plan.for_each(|_, ia, ib| data.push(f(xa[ia], xb[ib])));
        Tensor::new(plan.out_shape.clone(), data)
    }

    /// Populates leaf gradients with `d loss / d leaf`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                match &mut self.grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v),
                    slot => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut scratch);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], scratch: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let mut gi = wants(*input).then(|| take_or_zeros(scratch, *input, val(*input).numel()));
                let mut gw = wants(*weight).then(|| take_or_zeros(scratch, *weight, val(*weight).numel()));
                let mut gb = wants(*bias).then(|| take_or_zeros(scratch, *bias, val(*bias).numel()));
                conv::backward(
                    geometry,
                    val(*input).data(),
                    val(*weight).data(),
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, buf) in [(*input, gi), (*weight, gw), (*bias, gb)] {
                    if let Some(buf) = buf {
                        scratch[v.0] = Some(buf);
                    }
                }
            }
            Op::GapSpatial(input) => {
                let x = val(*input);
                let plane = x.shape()[2] * x.shape()[3];
                let inv = T::one() / T::of(plane as f64);
                accumulate(scratch, *input, x.numel(), |buf| {
                    for (chunk, &gv) in buf.chunks_mut(plane).zip(g) {
                        let d = gv * inv;
                        chunk.iter_mut().for_each(|b| *b = *b + d);
                    }
                });
            }
            Op::GmpSpatial { input, argmax } => {
                accumulate(scratch, *input, val(*input).numel(), |buf| {
                    for (&idx, &gv) in argmax.iter().zip(g) {
                        buf[idx] = buf[idx] + gv;
                    }
                });
            }
            Op::ChannelMeanMax { input, argmax } => {
                let s = val(*input).shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let inv = T::one() / T::of(c as f64);
                accumulate(scratch, *input, val(*input).numel(), |buf| {
                    for b in 0..n {
                        for p in 0..plane {
                            let gm = g[b * 2 * plane + p] * inv;
                            for ch in 0..c {
                                let idx = (b * c + ch) * plane + p;
                                buf[idx] = buf[idx] + gm;
                            }
                            let idx = argmax[b * plane + p];
                            buf[idx] = buf[idx] + g[b * 2 * plane + plane + p];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        reduce_broadcast(scratch, v, val(v).shape(), out.shape(), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !wants(v) {
                        continue;
                    }
                    let ov = val(other);
                    if ov.shape() == out.shape() {
                        let o = ov.data();
                        accumulate(scratch, v, val(v).numel(), |buf| {
                            if buf.len() == g.len() {
                                for ((b, &gv), &w) in buf.iter_mut().zip(g).zip(o) {
                                    *b = *b + gv * w;
                                }
                            } else {
                                let plan = BroadcastPlan::new(val(v).shape(), out.shape()).unwrap();
                                plan.for_each(|k, iv, _| buf[iv] = buf[iv] + g[k] * o[k]);
                            }
                        });
                    } else {
                        let plan = BroadcastPlan::new(val(v).shape(), ov.shape()).unwrap();
                        let o = ov.data();
                        accumulate(scratch, v, val(v).numel(), |buf| {
                            plan.for_each(|k, iv, io| buf[iv] = buf[iv] + g[k] * o[io]);
                        });
                    }
                }
            }
            Op::Affine { input, scale } => {
                accumulate(scratch, *input, g.len(), |buf| {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b = *b + gv * *scale;
                    }
                });
            }
            Op::Sigmoid(input) => {
                let y = out.data();
                accumulate(scratch, *input, g.len(), |buf| {
                    for ((b, &gv), &s) in buf.iter_mut().zip(g).zip(y) {
                        *b = *b + gv * s * (T::one() - s);
                    }
                });
            }
            Op::Relu(input) => {
                let x = val(*input).data();
                accumulate(scratch, *input, g.len(), |buf| {
                    for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *b = *b + gv;
                        }
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let sa = val(*a).shape();
                let (n, ca, plane) = (sa[0], sa[1], sa[2] * sa[3]);
                let cb = val(*b).shape()[1];
                let stride = (ca + cb) * plane;
                if wants(*a) {
                    accumulate(scratch, *a, val(*a).numel(), |buf| {
                        for s in 0..n {
                            let src = &g[s * stride..s * stride + ca * plane];
                            let dst = &mut buf[s * ca * plane..(s + 1) * ca * plane];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                        }
                    });
                }
                if wants(*b) {
                    accumulate(scratch, *b, val(*b).numel(), |buf| {
                        for s in 0..n {
                            let src = &g[s * stride + ca * plane..(s + 1) * stride];
                            let dst = &mut buf[s * cb * plane..(s + 1) * cb * plane];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                        }
                    });
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, fin) = (val(*input).shape()[0], val(*input).shape()[1]);
                let fout = val(*weight).shape()[0];
                if wants(*input) {
                    let w = val(*weight).data();
                    accumulate(scratch, *input, n * fin, |buf| {
                        T::gemm(
                            n,
                            fout,
                            fin,
                            T::one(),
                            g,
                            (fout as isize, 1),
                            w,
                            (fin as isize, 1),
                            T::one(),
                            buf,
                            (fin as isize, 1),
                        );
                    });
                }
                if wants(*weight) {
                    let x = val(*input).data();
                    accumulate(scratch, *weight, fout * fin, |buf| {
                        T::gemm(
                            fout,
                            n,
                            fin,
                            T::one(),
                            g,
                            (1, fout as isize),
                            x,
                            (fin as isize, 1),
                            T::one(),
                            buf,
                            (fin as isize, 1),
                        );
                    });
                }
                if wants(*bias) {
                    accumulate(scratch, *bias, fout, |buf| {
                        for row in g.chunks(fout) {
                            buf.iter_mut().zip(row).for_each(|(b, &v)| *b = *b + v);
                        }
                    });
                }
            }
            Op::Reshape(input) => {
                accumulate(scratch, *input, g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, &v)| *b = *b + v);
                });
            }
            Op::Sum(input) => {
                let gv = g[0];
                accumulate(scratch, *input, val(*input).numel(), |buf| {
                    buf.iter_mut().for_each(|b| *b = *b + gv);
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = val(*logits).shape()[1];
                let scale = g[0] / T::of(targets.len() as f64);
                accumulate(scratch, *logits, probs.len(), |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            buf[r * k + j] = buf[r * k + j] + scale * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::Bce { probs, targets } => {
                let p = val(*probs).data();
                accumulate(scratch, *probs, p.len(), |buf| {
                    for (((b, &gv), &pv), &t) in buf.iter_mut().zip(g).zip(p).zip(targets) {
                        *b = *b + gv * bce_derivative(pv, t);
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - m).exp();
            z = z + e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e = *e / z);
    }
    out
}

fn clamp_prob<T: Real>(p: T) -> T {
    if p.is_nan() {
        return p;
    }
    let eps = T::of(BCE_EPS);
    p.max(eps).min(T::one() - eps)
}

fn bce_value<T: Real>(p: T, t: T) -> T {
    let p = clamp_prob(p);
    -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
}

fn bce_derivative<T: Real>(p: T, t: T) -> T {
    let p = clamp_prob(p);
    -t / p + (T::one() - t) / (T::one() - p)
}

fn take_or_zeros<T: Real>(scratch: &mut [Option<Vec<T>>], v: Var, numel: usize) -> Vec<T> {
    scratch[v.0].take().unwrap_or_else(|| vec![T::zero(); numel])
}

fn accumulate<T: Real>(scratch: &mut [Option<Vec<T>>], v: Var, numel: usize, f: impl FnOnce(&mut [T])) {
    let buf = scratch[v.0].get_or_insert_with(|| vec![T::zero(); numel]);
    f(buf);
}

/// Sums `g` (shaped like the broadcast output) back down to `shape`.
fn reduce_broadcast<T: Real>(
    scratch: &mut [Option<Vec<T>>],
    v: Var,
    shape: &[usize],
    out_shape: &[usize],
    g: &[T],
) {
    let numel: usize = shape.iter().product();
    accumulate(scratch, v, numel, |buf| {
        if shape == out_shape {
            buf.iter_mut().zip(g).for_each(|(b, &gv)| *b = *b + gv);
        } else {
            let plan = BroadcastPlan::new(shape, out_shape).expect("shapes validated in forward");
            plan.for_each(|k, iv, _| buf[iv] = buf[iv] + g[k]);
        }
    });
}

/// Index mapping from a broadcast output back to both operands.
struct BroadcastPlan {
    out_shape: Vec<usize>,
    strides_a: Vec<usize>,
    strides_b: Vec<usize>,
}

impl BroadcastPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::Broadcast {
            left: a.to_vec(),
            right: b.to_vec(),
        };
        if a.len() != b.len() {
            return Err(err());
        }
        let mut out_shape = Vec::with_capacity(a.len());
        for (&da, &db) in a.iter().zip(b) {
            out_shape.push(match (da, db) {
                _ if da == db => da,
                (1, _) => db,
                (_, 1) => da,
                _ => return Err(err()),
            });
        }
        Ok(BroadcastPlan {
            strides_a: broadcast_strides(a, &out_shape),
            strides_b: broadcast_strides(b, &out_shape),
            out_shape,
        })
    }

    fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` in row-major output order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for k in 0..self.numel() {
            f(k, ia, ib);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                ia += self.strides_a[ax];
                ib += self.strides_b[ax];
                if idx[ax] < self.out_shape[ax] {
                    break;
                }
                ia -= self.strides_a[ax] * idx[ax];
                ib -= self.strides_b[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        strides[ax] = if shape[ax] == 1 && out[ax] != 1 { 0 } else { acc };
        acc *= shape[ax];
    }
    strides
}
