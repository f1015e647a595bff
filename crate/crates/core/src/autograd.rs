//! Reverse-mode differentiation over a dynamic tape.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are appended in evaluation order, so the
//! tape is already topologically sorted and [`Tape::backward`] walks it once in
//! reverse.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MatMul(Var, Var),
    Hadamard(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log { x: Var, floor: f64 },
    SoftmaxLast(Var),
    ConcatLast(Vec<Var>),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var },
    BatchNorm(Box<BatchNormSaved>),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    AdaptiveAvgPool { x: Var, out_h: usize, out_w: usize },
    Nll { probs: Var, labels: Vec<usize>, floor: f64 },
}

#[derive(Debug)]
struct BatchNormSaved {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Statistics of one batch-norm forward pass in training mode.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.backward_done {
            return Err(Error::State(
                "tape already differentiated; reset before recording".into(),
            ));
        }
        if cfg!(debug_assertions) {
            if let Some(pos) = value.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "element {pos} of {} output {:?}",
                    op_name(&op),
                    value.shape()
                )));
            }
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. It is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).scale(s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let t = Tensor::scalar(self.value(a).sum() / n as f64);
        self.push(t, Op::Mean(a), &[a])
    }

    /// Sums over the last axis: `[.., k] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (&k, lead) = shape
            .split_last()
            .ok_or_else(|| Error::contract("sum_last on a scalar"))?;
        let out: Vec<f64> = if k == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            self.data(a).chunks(k).map(|c| c.iter().sum()).collect()
        };
        let t = Tensor::new(lead, out)?;
        self.push(t, Op::SumLast(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    /// Channel-broadcast gating `a[.., c] * h[.., 0]`.
    pub fn hadamard(&mut self, a: Var, h: Var) -> Result<Var> {
        let t = self.value(a).hadamard(self.value(h))?;
        self.push(t, Op::Hadamard(a, h), &[a, h])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v.max(floor).ln());
        self.push(t, Op::Log { x: a, floor }, &[a])
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = *shape
            .last()
            .ok_or_else(|| Error::contract("softmax on a scalar"))?;
        let mut out = self.data(a).to_vec();
        if k > 0 {
            for row in out.chunks_mut(k) {
                softmax_in_place(row);
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::SoftmaxLast(a), &[a])
    }

    /// Concatenates `[N, k_i]` tensors into `[N, Σ k_i]`.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rows = match *self.shape(first) {
            [n, _] => n,
            _ => return Err(Error::dim("concat_last", self.shape(first), &[])),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match *self.shape(p) {
                [n, k] if n == rows => widths.push(k),
                _ => return Err(Error::dim("concat_last", self.shape(first), self.shape(p))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &k) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * k..(r + 1) * k]);
            }
        }
        let t = Tensor::new(&[rows, total], out)?;
        self.push(t, Op::ConcatLast(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Fully-connected layer: `x[N, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fin) = match *self.shape(x) {
            [n, f] => (n, f),
            _ => return Err(Error::dim("linear", self.shape(x), self.shape(w))),
        };
        let fout = match *self.shape(w) {
            [i, o] if i == fin => o,
            _ => return Err(Error::dim("linear", self.shape(x), self.shape(w))),
        };
        if self.shape(b) != [fout] {
            return Err(Error::dim("linear bias", self.shape(w), self.shape(b)));
        }
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(self.data(b));
        }
        gemm(n, fin, fout, self.data(x), false, self.data(w), false, &mut out, 1.0);
        let t = Tensor::new(&[n, fout], out)?;
        self.push(t, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    ///
    /// `x` is `H×W×Cin` or `N×H×W×Cin`, `k` is `3×3×Cin×Cout`, `b` is `Cout`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (n, h, w, cin) = self.value(x).nhwc()?;
        let cout = match *self.shape(k) {
            [3, 3, ci, co] if ci == cin => co,
            _ => return Err(Error::dim("conv2d", self.shape(x), self.shape(k))),
        };
        if self.shape(b) != [cout] {
            return Err(Error::dim("conv2d bias", self.shape(k), self.shape(b)));
        }
        let cols = im2col(self.data(x), n, h, w, cin);
        let m = n * h * w;
        let mut out = Vec::with_capacity(m * cout);
        for _ in 0..m {
            out.extend_from_slice(self.data(b));
        }
        gemm(m, 9 * cin, cout, &cols, false, self.data(k), false, &mut out, 1.0);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = cout;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Conv2d { x, k, b }, &[x, k, b])
    }

    /// Batch normalization over every axis but the last, using batch
    /// statistics. Requires a leading batch axis of at least 2.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[0] < 2 {
            return Err(Error::contract(format!(
                "batch norm in train mode needs a batch of at least 2, got shape {shape:?}"
            )));
        }
        let c = *shape.last().unwrap();
        self.check_affine(x, gamma, beta, c)?;
        let data = self.data(x);
        let m = data.len() / c;
        let mut mean = vec![0.0; c];
        for px in data.chunks(c) {
            for (s, v) in mean.iter_mut().zip(px) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|s| *s /= m as f64);
        let mut var = vec![0.0; c];
        for px in data.chunks(c) {
            for ((s, v), mu) in var.iter_mut().zip(px).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / m as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|s| s / (m as f64 - 1.0)).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let t = Tensor::new(&shape, y)?;
        let saved = BatchNormSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: true,
        };
        let out = self.push(t, Op::BatchNorm(Box::new(saved)), &[x, gamma, beta])?;
        Ok((
            out,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::contract("batch norm on a scalar"))?;
        self.check_affine(x, gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batchnorm running stats", &shape, &[running_mean.len()]));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = self.normalize(x, gamma, beta, running_mean, &inv_std);
        let t = Tensor::new(&shape, y)?;
        let saved = BatchNormSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: false,
        };
        self.push(t, Op::BatchNorm(Box::new(saved)), &[x, gamma, beta])
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batchnorm affine", self.shape(x), self.shape(gamma)));
        }
        Ok(())
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let c = mean.len();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let data = self.data(x);
        let mut xhat = Vec::with_capacity(data.len());
        let mut y = Vec::with_capacity(data.len());
        for px in data.chunks(c) {
            for ch in 0..c {
                let xh = (px[ch] - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                y.push(g[ch] * xh + bt[ch]);
            }
        }
        (y, xhat)
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, h, w, c) = self.value(x).nhwc()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::contract(format!(
                "max pool needs spatial size ≥ 2, got {h}×{w}"
            )));
        }
        let data = self.data(x);
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            if data[idx] > best_v {
                                best_v = data[idx];
                                best = idx;
                            }
                        }
                        out.push(best_v);
                        argmax.push(best as u32);
                    }
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 3] = oh;
        shape[r - 2] = ow;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Adaptive average pooling to `out_h × out_w`. Bin `i` along an axis of
    /// length `L` spans `[floor(i·L/out), floor((i+1)·L/out))`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, h, w, c) = self.value(x).nhwc()?;
        if h < out_h || w < out_w || out_h == 0 || out_w == 0 {
            return Err(Error::contract(format!(
                "adaptive average pool to {out_h}×{out_w} needs input at least that large, got {h}×{w}; upscale the fragment"
            )));
        }
        let data = self.data(x);
        let mut out = vec![0.0; n * out_h * out_w * c];
        for b in 0..n {
            for oi in 0..out_h {
                let (r0, r1) = bin(oi, h, out_h);
                for oj in 0..out_w {
                    let (c0, c1) = bin(oj, w, out_w);
                    let area = ((r1 - r0) * (c1 - c0)) as f64;
                    let o = ((b * out_h + oi) * out_w + oj) * c;
                    for i in r0..r1 {
                        for j in c0..c1 {
                            let src = ((b * h + i) * w + j) * c;
                            for ch in 0..c {
                                out[o + ch] += data[src + ch];
                            }
                        }
                    }
                    for v in &mut out[o..o + c] {
                        *v /= area;
                    }
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 3] = out_h;
        shape[r - 2] = out_w;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::AdaptiveAvgPool { x, out_h, out_w }, &[x])
    }

    /// Mean negative log-likelihood of `probs[N, C]` at `labels`, with
    /// probabilities clamped below at `floor` before the logarithm.
    pub fn nll(&mut self, probs: Var, labels: &[usize], floor: f64) -> Result<Var> {
        let (n, c) = match *self.shape(probs) {
            [c] => (1, c),
            [n, c] => (n, c),
            _ => return Err(Error::dim("nll", self.shape(probs), &[labels.len()])),
        };
        if labels.len() != n || n == 0 {
            return Err(Error::dim("nll", self.shape(probs), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!(
                "label {bad} outside 0..{c}"
            )));
        }
        let p = self.data(probs);
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -p[i * c + y].max(floor).ln())
            .sum::<f64>()
            / n as f64;
        let op = Op::Nll {
            probs,
            labels: labels.to_vec(),
            floor,
        };
        self.push(Tensor::scalar(loss), op, &[probs])
    }

    /// Populates the gradient of every `requires_grad` leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.grad = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g / y;
                    }
                });
                acc(*b, &mut |d| {
                    for (((d, g), x), y) in d.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= g * x / (y * y);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)
            }),
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::SumLast(a) => {
                let k = *self.shape(*a).last().unwrap();
                acc(*a, &mut |d| {
                    for (row, gv) in d.chunks_mut(k.max(1)).zip(g) {
                        row.iter_mut().for_each(|d| *d += gv);
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| gemm(m, n, k, g, false, bv, true, d, 1.0));
                acc(*b, &mut |d| gemm(k, m, n, av, true, g, false, d, 1.0));
            }
            Op::Hadamard(a, h) => {
                let (av, hv) = (self.data(*a), self.data(*h));
                let c = *self.shape(*a).last().unwrap();
                acc(*a, &mut |d| {
                    for ((dpx, gpx), m) in d.chunks_mut(c).zip(g.chunks(c)).zip(hv) {
                        dpx.iter_mut().zip(gpx).for_each(|(d, g)| *d += g * m);
                    }
                });
                acc(*h, &mut |d| {
                    for ((dm, gpx), apx) in d.iter_mut().zip(g.chunks(c)).zip(av.chunks(c)) {
                        *dm += gpx.iter().zip(apx).map(|(g, a)| g * a).sum::<f64>();
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.data(*a);
                acc(*a, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                })
            }
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for ((d, g), s) in d.iter_mut().zip(g).zip(out) {
                    *d += g * s * (1.0 - s);
                }
            }),
            Op::Log { x, floor } => {
                let xv = self.data(*x);
                acc(*x, &mut |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        if *v > *floor {
                            *d += g / v;
                        }
                    }
                })
            }
            Op::SoftmaxLast(a) => {
                let k = *self.shape(*a).last().unwrap();
                acc(*a, &mut |d| {
                    for ((drow, grow), prow) in
                        d.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k))
                    {
                        let dot: f64 = grow.iter().zip(prow).map(|(g, p)| g * p).sum();
                        for ((d, g), p) in drow.iter_mut().zip(grow).zip(prow) {
                            *d += p * (g - dot);
                        }
                    }
                })
            }
            Op::ConcatLast(parts) => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let k = self.shape(p)[1];
                    acc(p, &mut |d| {
                        for (drow, grow) in d.chunks_mut(k.max(1)).zip(g.chunks(total)) {
                            add_into(drow, &grow[offset..offset + k]);
                        }
                    });
                    offset += k;
                }
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[1];
                let (xv, wv) = (self.data(*x), self.data(*w));
                acc(*x, &mut |d| gemm(n, fout, fin, g, false, wv, true, d, 1.0));
                acc(*w, &mut |d| gemm(fin, n, fout, xv, true, g, false, d, 1.0));
                acc(*b, &mut |d| {
                    for row in g.chunks(fout) {
                        add_into(d, row);
                    }
                });
            }
            Op::Conv2d { x, k, b } => {
                let (n, h, w, cin) = self.value(*x).nhwc().expect("checked in forward");
                let cout = self.shape(*k)[3];
                let m = n * h * w;
                let kdim = 9 * cin;
                let kv = self.data(*k);
                if self.nodes[k.0].needs_grad {
                    let cols = im2col(self.data(*x), n, h, w, cin);
                    acc(*k, &mut |d| gemm(kdim, m, cout, &cols, true, g, false, d, 1.0));
                }
                acc(*b, &mut |d| {
                    for row in g.chunks(cout) {
                        add_into(d, row);
                    }
                });
                acc(*x, &mut |d| {
                    let mut dcols = vec![0.0; m * kdim];
                    gemm(m, cout, kdim, g, false, kv, true, &mut dcols, 0.0);
                    col2im_add(&dcols, d, n, h, w, cin);
                });
            }
            Op::BatchNorm(s) => {
                let c = s.inv_std.len();
                let gam = self.data(s.gamma);
                let m = s.xhat.len() / c;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (gpx, xpx) in g.chunks(c).zip(s.xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_g[ch] += gpx[ch];
                        sum_gx[ch] += gpx[ch] * xpx[ch];
                    }
                }
                acc(s.gamma, &mut |d| add_into(d, &sum_gx));
                acc(s.beta, &mut |d| add_into(d, &sum_g));
                acc(s.x, &mut |d| {
                    let mf = m as f64;
                    for ((dpx, gpx), xpx) in d.chunks_mut(c).zip(g.chunks(c)).zip(s.xhat.chunks(c)) {
                        for ch in 0..c {
                            let scale = gam[ch] * s.inv_std[ch];
                            if s.train {
                                dpx[ch] += scale
                                    * (gpx[ch] - sum_g[ch] / mf - xpx[ch] * sum_gx[ch] / mf);
                            } else {
                                dpx[ch] += scale * gpx[ch];
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |d| {
                for (gv, &idx) in g.iter().zip(argmax) {
                    d[idx as usize] += gv;
                }
            }),
            Op::AdaptiveAvgPool { x, out_h, out_w } => {
                let (n, h, w, c) = self.value(*x).nhwc().expect("checked in forward");
                let (out_h, out_w) = (*out_h, *out_w);
                acc(*x, &mut |d| {
                    for b in 0..n {
                        for oi in 0..out_h {
                            let (r0, r1) = bin(oi, h, out_h);
                            for oj in 0..out_w {
                                let (c0, c1) = bin(oj, w, out_w);
                                let area = ((r1 - r0) * (c1 - c0)) as f64;
                                let o = ((b * out_h + oi) * out_w + oj) * c;
                                for i in r0..r1 {
                                    for j in c0..c1 {
                                        let dst = ((b * h + i) * w + j) * c;
                                        for ch in 0..c {
                                            d[dst + ch] += g[o + ch] / area;
                                        }
                                    }
                                }
                            }
                        }
                    }
                })
            }
            Op::Nll {
                probs,
                labels,
                floor,
            } => {
                let p = self.data(*probs);
                let c = *self.shape(*probs).last().unwrap();
                let n = labels.len() as f64;
                acc(*probs, &mut |d| {
                    for (i, &y) in labels.iter().enumerate() {
                        let v = p[i * c + y];
                        if v > *floor {
                            d[i * c + y] -= g[0] / (n * v);
                        }
                    }
                })
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SumLast(_) => "sum_last",
        Op::MatMul(..) => "matmul",
        Op::Hadamard(..) => "hadamard",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Log { .. } => "log",
        Op::SoftmaxLast(_) => "softmax",
        Op::ConcatLast(_) => "concat",
        Op::Reshape(_) => "reshape",
        Op::Linear { .. } => "linear",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm(_) => "batchnorm",
        Op::MaxPool2 { .. } => "max_pool2",
        Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
        Op::Nll { .. } => "nll",
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn bin(i: usize, len: usize, bins: usize) -> (usize, usize) {
    (i * len / bins, (i + 1) * len / bins)
}

/// Unfolds 3×3 neighbourhoods: row `(b, i, j)` holds `(ky, kx, c)` patches.
fn im2col(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let kdim = 9 * c;
    let mut cols = vec![0.0; n * h * w * kdim];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let row = ((b * h + i) * w + j) * kdim;
                for ky in 0..3 {
                    let si = i + ky;
                    if si < 1 || si > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let sj = j + kx;
                        if sj < 1 || sj > w {
                            continue;
                        }
                        let src = ((b * h + si - 1) * w + sj - 1) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], dx: &mut [f64], n: usize, h: usize, w: usize, c: usize) {
    let kdim = 9 * c;
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let row = ((b * h + i) * w + j) * kdim;
                for ky in 0..3 {
                    let si = i + ky;
                    if si < 1 || si > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let sj = j + kx;
                        if sj < 1 || sj > w {
                            continue;
                        }
                        let dst = ((b * h + si - 1) * w + sj - 1) * c;
                        let src = row + (ky * 3 + kx) * c;
                        add_into(&mut dx[dst..dst + c], &cols[src..src + c]);
                    }
                }
            }
        }
    }
}
