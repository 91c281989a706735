//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in execution order, so node indices are
//! already a topological order. [`Tape::backward`] walks the nodes once in
//! reverse, summing the gradient contributions each node receives from its
//! consumers. Only leaves keep their gradient after the pass.

pub mod gradcheck;
pub(crate) mod kernels;
mod tensor;

use rand::Rng;

pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic and batch-statistics layers run in training mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature batch statistics computed by a training-mode batch norm.
/// `var` is the population (biased) variance.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Std {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SegmentDot {
        h: Var,
        u: Var,
        segments: usize,
    },
    SegmentWeightedSum {
        h: Var,
        w: Var,
    },
    MaskTail {
        x: Var,
        valid: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of executed operations.
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

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Trainable leaf; its gradient is kept after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a vector along the last axis of `x` (row-wise bias).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap();
        if sb != [n] {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Same-padded 3×3 convolution, stride 1: `[cin, h, w] → [cout, h, w]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sx.len() != 3 {
            return Err(Error::Shape(format!("conv2d input must be [C, H, W], got {sx:?}")));
        }
        if sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(Error::Shape(format!(
                "conv2d kernel must be [Cout, Cin, 3, 3], got {sk:?}"
            )));
        }
        if sk[1] != sx[0] {
            return Err(Error::dim("conv2d (input channels)", sx, sk));
        }
        if sb != [sk[0]] {
            return Err(Error::dim("conv2d (bias)", sk, sb));
        }
        let (cin, h, w, cout) = (sx[0], sx[1], sx[2], sk[0]);
        let out = kernels::conv3_forward(
            self.value(x).data(),
            cin,
            h,
            w,
            self.value(kernel).data(),
            cout,
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![cout, h, w], out)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, bias }, &[x, kernel, bias]))
    }

    /// 2×2 max pooling, stride 2, floor semantics on odd extents.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[1] < 2 || sx[2] < 2 {
            return Err(Error::dim("maxpool2d (window 2x2)", sx, &[2, 2]));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), c, h, w);
        let value = Tensor::new(vec![c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.value(x).axis_split(axis)?;
        let mut data = self.value(x).data().to_vec();
        let mut lane = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (t, slot) in lane.iter_mut().enumerate() {
                    *slot = data[(o * n + t) * inner + i];
                }
                kernels::softmax_in_place(&mut lane);
                for (t, &v) in lane.iter().enumerate() {
                    data[(o * n + t) * inner + i] = v;
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Mean over `axis`; the axis is removed (a 1-D input yields shape `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = t.axis_split(axis)?;
        let data = reduce_axis(t.data(), outer, n, inner, |lane| {
            lane.iter().sum::<f64>() / n as f64
        });
        let value = Tensor::new(reduced_shape(t.shape(), axis), data)?;
        Ok(self.push(value, Op::Mean { x, axis }, &[x]))
    }

    /// Population standard deviation over `axis`, `sqrt(var + STD_EPS)`.
    pub fn std(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = t.axis_split(axis)?;
        let data = reduce_axis(t.data(), outer, n, inner, |lane| {
            let mean = lane.iter().sum::<f64>() / n as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            (var + STD_EPS).sqrt()
        });
        let value = Tensor::new(reduced_shape(t.shape(), axis), data)?;
        Ok(self.push(value, Op::Std { x, axis }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Batch normalization of `x: [batch, features]` with batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (b, f) = self.bn_check(x, gamma, beta)?;
        let xs = self.value(x).data();
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for row in xs.chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        for row in xs.chunks(f) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var,
        };
        let v = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, f) = self.bn_check(x, gamma, beta)?;
        if mean.len() != f || var.len() != f {
            return Err(Error::dim("batch_norm (running stats)", &[f], &[mean.len(), var.len()]));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::Shape(format!("batch_norm expects [batch, features], got {sx:?}")));
        }
        let f = sx[1];
        for p in [gamma, beta] {
            if self.shape(p) != [f] {
                return Err(Error::dim("batch_norm (affine)", sx, self.shape(p)));
            }
        }
        Ok((sx[0], f))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let f = mean.len();
        let xhat: Vec<f64> = self
            .value(x)
            .data()
            .chunks(f)
            .flat_map(|row| {
                row.iter()
                    .zip(mean)
                    .zip(&inv_std)
                    .map(|((v, m), s)| (v - m) * s)
            })
            .collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .chunks(f)
            .flat_map(|row| row.iter().zip(g).zip(bt).map(|((v, g), b)| v * g + b))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`. Eval mode is the identity
    /// and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean softmax cross-entropy of `logits: [batch, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", s, &[labels.len()]));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                index: bad,
                classes,
            });
        }
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(labels.len() * classes);
        for (row, &label) in self.value(logits).data().chunks(classes).zip(labels) {
            let lse = kernels::log_sum_exp(row);
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar(loss / labels.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Per-segment dot products of each column of `h: [d, T]` with `u: [d]`,
    /// the rows being split into `segments` equal contiguous blocks.
    /// Output `[segments, T]`, entry `(j, t) = Σ_{i ∈ block j} h[i, t]·u[i]`.
    pub fn segment_dot(&mut self, h: Var, u: Var, segments: usize) -> Result<Var> {
        let (d, t_len) = self.seg_check(h, segments)?;
        if self.shape(u) != [d] {
            return Err(Error::dim("segment_dot", self.shape(h), self.shape(u)));
        }
        let hv = self.value(h).data();
        let uv = self.value(u).data();
        let seg = d / segments;
        let mut out = vec![0.0; segments * t_len];
        for j in 0..segments {
            let row = &mut out[j * t_len..(j + 1) * t_len];
            for i in j * seg..(j + 1) * seg {
                let hrow = &hv[i * t_len..(i + 1) * t_len];
                for (o, &x) in row.iter_mut().zip(hrow) {
                    *o += x * uv[i];
                }
            }
        }
        let value = Tensor::new(vec![segments, t_len], out)?;
        Ok(self.push(value, Op::SegmentDot { h, u, segments }, &[h, u]))
    }

    /// Per-segment weighted sums over time: `h: [d, T]`, `w: [k, T]`,
    /// output `[d]` with entry `i = Σ_t w[block(i), t]·h[i, t]`.
    pub fn segment_weighted_sum(&mut self, h: Var, w: Var) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 {
            return Err(Error::Shape(format!("weights must be [k, T], got {sw:?}")));
        }
        let (d, t_len) = self.seg_check(h, sw[0])?;
        if sw[1] != t_len {
            return Err(Error::dim("segment_weighted_sum", self.shape(h), &sw));
        }
        let seg = d / sw[0];
        let hv = self.value(h).data();
        let wv = self.value(w).data();
        let out = (0..d)
            .map(|i| {
                let wrow = &wv[(i / seg) * t_len..][..t_len];
                let hrow = &hv[i * t_len..][..t_len];
                hrow.iter().zip(wrow).fold(0.0, |acc, (x, w)| acc + w * x)
            })
            .collect();
        let value = Tensor::new(vec![d], out)?;
        Ok(self.push(value, Op::SegmentWeightedSum { h, w }, &[h, w]))
    }

    fn seg_check(&self, h: Var, segments: usize) -> Result<(usize, usize)> {
        let sh = self.shape(h);
        if sh.len() != 2 {
            return Err(Error::Shape(format!("sequence must be [d, T], got {sh:?}")));
        }
        if segments == 0 || !sh[0].is_multiple_of(segments) {
            return Err(Error::Config(format!(
                "dimension d={} is not divisible by k={segments} heads",
                sh[0]
            )));
        }
        Ok((sh[0], sh[1]))
    }

    /// Replaces columns `valid..` of a `[k, T]` matrix with `-inf`, so a
    /// following softmax over time ignores them.
    pub fn mask_tail(&mut self, x: Var, valid: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || valid == 0 || valid > s[1] {
            return Err(Error::Shape(format!(
                "cannot keep {valid} leading columns of {s:?}"
            )));
        }
        let t_len = s[1];
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(t_len) {
            row[valid..].fill(f64::NEG_INFINITY);
        }
        let value = Tensor::new(s.to_vec(), data)?;
        Ok(self.push(value, Op::MaskTail { x, valid }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from a single-element output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let shape = self.shape(output).to_vec();
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {shape:?}; use backward_with"
            )));
        }
        self.backward_with(output, Tensor::full(shape, 1.0))
    }

    /// Backpropagates an explicit upstream gradient `seed` from `output`.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward_with(&mut self, output: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.shape(output) {
            return Err(Error::dim("backward seed", self.shape(output), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.accumulate(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.accumulate(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v).to_vec(), data);
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, false, self.value(*b).data(), true, 0.0, &mut da);
                    out.push((*a, like(*a, da)?));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(*a).data(), true, gd, false, 0.0, &mut db);
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddBias { x, bias } => {
                out.push((*x, g.clone()));
                let n = self.shape(*bias)[0];
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                out.push((*bias, like(*bias, db)?));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                out.push((*a, like(*a, zip_map(g, bv, |g, b| g * b))?));
                out.push((*b, like(*b, zip_map(g, av, |g, a| g * a))?));
            }
            Op::Scale(x, f) => out.push((*x, g.map(|v| v * f))),
            Op::Relu(x) => {
                let dx = zip_map(g, self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 });
                out.push((*x, like(*x, dx)?));
            }
            Op::Reshape(x) => out.push((*x, like(*x, gd.to_vec())?)),
            Op::Conv2d { x, kernel, bias } => {
                let s = self.shape(*x);
                let (cin, h, w) = (s[0], s[1], s[2]);
                let cout = self.shape(*kernel)[0];
                let grads = kernels::conv3_backward(
                    self.value(*x).data(),
                    cin,
                    h,
                    w,
                    self.value(*kernel).data(),
                    cout,
                    gd,
                    self.needs(*x),
                );
                if self.needs(*x) {
                    out.push((*x, like(*x, grads.input)?));
                }
                out.push((*kernel, like(*kernel, grads.kernel)?));
                out.push((*bias, like(*bias, grads.bias)?));
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = y.axis_split(*axis)?;
                let yd = y.data();
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |t: usize| (o * n + t) * inner + ii;
                        // softmax lanes can hold exact zeros (masked steps)
                        let dot: f64 = (0..n).map(|t| gd[idx(t)] * yd[idx(t)]).sum();
                        for t in 0..n {
                            dx[idx(t)] = yd[idx(t)] * (gd[idx(t)] - dot);
                        }
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Mean { x, axis } => {
                let (outer, n, inner) = self.value(*x).axis_split(*axis)?;
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for t in 0..n {
                        for ii in 0..inner {
                            dx[(o * n + t) * inner + ii] = gd[o * inner + ii] / n as f64;
                        }
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Std { x, axis } => {
                let xv = self.value(*x);
                let (outer, n, inner) = xv.axis_split(*axis)?;
                let xd = xv.data();
                let sd = node.value.data();
                let mut dx = vec![0.0; xd.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |t: usize| (o * n + t) * inner + ii;
                        let mean = (0..n).map(|t| xd[idx(t)]).sum::<f64>() / n as f64;
                        let r = o * inner + ii;
                        let scale = gd[r] / (n as f64 * sd[r]);
                        for t in 0..n {
                            dx[idx(t)] = scale * (xd[idx(t)] - mean);
                        }
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    let mut dp = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        dp.extend_from_slice(&gd[o * total + offset..][..len]);
                    }
                    offset += len;
                    out.push((p, like(p, dp)?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = inv_std.len();
                let b = xhat.len() / f;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for (grow, hrow) in gd.chunks(f).zip(xhat.chunks(f)) {
                    for c in 0..f {
                        dgamma[c] += grow[c] * hrow[c];
                        dbeta[c] += grow[c];
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    if *batch_stats {
                        // dx = inv_std/B · (B·dxhat − Σ dxhat − xhat·Σ(dxhat·xhat))
                        // with dxhat = g·γ, so Σ dxhat = γ·dβ and Σ dxhat·xhat = γ·dγ.
                        let bf = b as f64;
                        for (r, (grow, hrow)) in gd.chunks(f).zip(xhat.chunks(f)).enumerate() {
                            for c in 0..f {
                                let dxhat = grow[c] * gam[c];
                                dx[r * f + c] = inv_std[c] / bf
                                    * (bf * dxhat - gam[c] * dbeta[c] - hrow[c] * gam[c] * dgamma[c]);
                            }
                        }
                    } else {
                        for (r, grow) in gd.chunks(f).enumerate() {
                            for c in 0..f {
                                dx[r * f + c] = grow[c] * gam[c] * inv_std[c];
                            }
                        }
                    }
                    out.push((*x, like(*x, dx)?));
                }
                out.push((*gamma, like(*gamma, dgamma)?));
                out.push((*beta, like(*beta, dbeta)?));
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                out.push((*x, like(*x, dx)?));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = gd[0] / labels.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * classes + l] -= scale;
                }
                out.push((*logits, like(*logits, dl)?));
            }
            Op::SegmentDot { h, u, segments } => {
                let (d, t_len) = (self.shape(*h)[0], self.shape(*h)[1]);
                let seg = d / segments;
                let (hv, uv) = (self.value(*h).data(), self.value(*u).data());
                if self.needs(*h) {
                    let mut dh = vec![0.0; d * t_len];
                    for i in 0..d {
                        let grow = &gd[(i / seg) * t_len..][..t_len];
                        for (o, gv) in dh[i * t_len..][..t_len].iter_mut().zip(grow) {
                            *o = gv * uv[i];
                        }
                    }
                    out.push((*h, like(*h, dh)?));
                }
                let du = (0..d)
                    .map(|i| {
                        let grow = &gd[(i / seg) * t_len..][..t_len];
                        let hrow = &hv[i * t_len..][..t_len];
                        grow.iter().zip(hrow).map(|(g, x)| g * x).sum()
                    })
                    .collect();
                out.push((*u, like(*u, du)?));
            }
            Op::SegmentWeightedSum { h, w } => {
                let (d, t_len) = (self.shape(*h)[0], self.shape(*h)[1]);
                let k = self.shape(*w)[0];
                let seg = d / k;
                let (hv, wv) = (self.value(*h).data(), self.value(*w).data());
                if self.needs(*h) {
                    let mut dh = vec![0.0; d * t_len];
                    for i in 0..d {
                        let wrow = &wv[(i / seg) * t_len..][..t_len];
                        for (o, wt) in dh[i * t_len..][..t_len].iter_mut().zip(wrow) {
                            *o = gd[i] * wt;
                        }
                    }
                    out.push((*h, like(*h, dh)?));
                }
                let mut dw = vec![0.0; k * t_len];
                for i in 0..d {
                    let hrow = &hv[i * t_len..][..t_len];
                    for (o, x) in dw[(i / seg) * t_len..][..t_len].iter_mut().zip(hrow) {
                        *o += gd[i] * x;
                    }
                }
                out.push((*w, like(*w, dw)?));
            }
            Op::MaskTail { x, valid } => {
                let t_len = self.shape(*x)[1];
                let mut dx = gd.to_vec();
                for row in dx.chunks_mut(t_len) {
                    row[*valid..].fill(0.0);
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x).to_vec(), gd[0]))),
        }
        Ok(out)
    }
}

/// Variance floor used by [`Tape::std`].
pub const STD_EPS: f64 = 1e-8;

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn reduce_axis(
    data: &[f64],
    outer: usize,
    n: usize,
    inner: usize,
    f: impl Fn(&[f64]) -> f64,
) -> Vec<f64> {
    let mut lane = vec![0.0; n];
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            for (t, slot) in lane.iter_mut().enumerate() {
                *slot = data[(o * n + t) * inner + i];
            }
            out.push(f(&lane));
        }
    }
    out
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}
