//! Reverse-mode differentiation over a recorded sequence of layer calls.
//!
//! Every forward operation appends a node holding its output and whatever
//! it needs to run backwards. [`Tape::backward`] walks the nodes in reverse
//! and accumulates parameter gradients into the [`ParamStore`]. Parameter
//! gradients accumulate across calls until [`ParamStore::zero_grads`];
//! intermediate node gradients are recomputed from scratch on every call.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::params::{BatchNormIds, Conv1dBlock, LinearParams, ParamId, ParamStore};
use crate::tensor::{gemm, Real, Tensor, View};

/// Batch-norm numerical floor added to the variance.
pub const BN_EPS: f64 = 1e-5;
/// Probability clamp applied before the logarithms of the loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Input,
    Conv1d {
        x: NodeId,
        kernel: ParamId,
        bias: ParamId,
        k: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    Dropout {
        x: NodeId,
        mask: Option<Vec<T>>,
    },
    Linear {
        x: NodeId,
        weight: ParamId,
        bias: ParamId,
    },
    Softmax {
        x: NodeId,
    },
    CrossEntropy {
        probs: NodeId,
        targets: Vec<T>,
    },
    /// `weighted` holds `p_j · ∂ℓ/∂p_j` per element, zero where clamped.
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Vec<T>,
        weighted: Vec<T>,
    },
    Add {
        inputs: Vec<NodeId>,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    AvgPool {
        x: NodeId,
    },
    Tile {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    GlobalAvgPool {
        x: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded forward graph of one pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adaptive average-pooling window `[start, end)` for output index `i`.
fn pool_window(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end)
}

fn im2col<T: Real>(x: &[T], c_in: usize, len: usize, k: usize, cols: &mut [T]) {
    let pad = (k - 1) / 2;
    for ci in 0..c_in {
        let src = &x[ci * len..(ci + 1) * len];
        for j in 0..k {
            let row = &mut cols[(ci * k + j) * len..(ci * k + j + 1) * len];
            for (t, slot) in row.iter_mut().enumerate() {
                let s = t + j;
                *slot = if s >= pad && s - pad < len { src[s - pad] } else { T::zero() };
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], c_in: usize, len: usize, k: usize, dx: &mut [T]) {
    let pad = (k - 1) / 2;
    for ci in 0..c_in {
        let dst = &mut dx[ci * len..(ci + 1) * len];
        for j in 0..k {
            let row = &cols[(ci * k + j) * len..(ci * k + j + 1) * len];
            for (t, &g) in row.iter().enumerate() {
                let s = t + j;
                if s >= pad && s - pad < len {
                    dst[s - pad] += g;
                }
            }
        }
    }
}

/// One-hot encoding of integer labels as a `B × classes` tensor.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new(&[labels.len(), classes], data)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    /// Which side of zero every rectifier input lies on, in recording order.
    /// Two passes with equal patterns ran through the same linear pieces.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } | Op::LeakyRelu { x, .. } => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Zero-padded "same" cross-correlation plus bias: `B × C_in × L` to
    /// `B × C_out × L`. The kernel size must be odd.
    pub fn conv1d(&mut self, x: NodeId, params: &ParamStore<T>, kernel: ParamId, bias: ParamId) -> Result<NodeId> {
        let xv = self.value(x);
        xv.expect_rank(3, "conv1d input")?;
        let w = params.param(kernel);
        w.expect_rank(3, "conv1d kernel")?;
        let (b, c_in, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (c_out, wc_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wc_in != c_in {
            return Err(Error::Shape(format!("conv1d: input has {c_in} channels, kernel expects {wc_in}")));
        }
        if k % 2 == 0 {
            return Err(Error::Shape(format!("conv1d: kernel size {k} must be odd")));
        }
        let bias_v = params.param(bias).data();
        if bias_v.len() != c_out {
            return Err(Error::Shape("conv1d: bias length".into()));
        }
        let mut out = vec![T::zero(); b * c_out * len];
        let mut cols = vec![T::zero(); c_in * k * len];
        for s in 0..b {
            im2col(&xv.data()[s * c_in * len..(s + 1) * c_in * len], c_in, len, k, &mut cols);
            let o = &mut out[s * c_out * len..(s + 1) * c_out * len];
            for (co, row) in o.chunks_mut(len).enumerate() {
                row.iter_mut().for_each(|v| *v = bias_v[co]);
            }
            gemm(w.data(), View::row_major(c_out, c_in * k), &cols, View::row_major(c_in * k, len), T::one(), o);
        }
        let value = Tensor::from_parts(vec![b, c_out, len], out);
        Ok(self.push(value, Op::Conv1d { x, kernel, bias, k }))
    }

    /// Per-channel normalization over batch and time. Train mode uses batch
    /// statistics (biased variance) and updates the running statistics with
    /// `running = (1 − momentum)·running + momentum·batch` (unbiased variance);
    /// eval mode uses the running statistics.
    pub fn batchnorm1d(
        &mut self,
        x: NodeId,
        params: &mut ParamStore<T>,
        ids: &BatchNormIds,
        mode: Mode,
        momentum: f64,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        xv.expect_rank(3, "batchnorm input")?;
        let (b, c, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if params.param(ids.gamma).len() != c {
            return Err(Error::Shape(format!(
                "batchnorm: {c} channels, parameters for {}",
                params.param(ids.gamma).len()
            )));
        }
        let n = b * len;
        let eps = T::of(BN_EPS);
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::DegenerateBatch);
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let nt = T::of(n as f64);
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for s in 0..b {
                        sum += xv.data()[(s * c + ch) * len..(s * c + ch + 1) * len]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum::<f64>();
                    }
                    let m = sum / n as f64;
                    let mut sq = 0.0f64;
                    for s in 0..b {
                        sq += xv.data()[(s * c + ch) * len..(s * c + ch + 1) * len]
                            .iter()
                            .map(|v| (v.as_f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::of(m);
                    var[ch] = T::of(sq / n as f64);
                }
                let mom = T::of(momentum);
                let unbias = nt / (nt - T::one());
                let rm = params.buffer_mut(ids.running_mean).data_mut();
                for (r, &m) in rm.iter_mut().zip(&mean) {
                    *r = (T::one() - mom) * *r + mom * m;
                }
                let rv = params.buffer_mut(ids.running_var).data_mut();
                for (r, &v) in rv.iter_mut().zip(&var) {
                    *r = (T::one() - mom) * *r + mom * v * unbias;
                }
                (mean, var)
            }
            Mode::Eval => {
                (params.buffer(ids.running_mean).data().to_vec(), params.buffer(ids.running_var).data().to_vec())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = params.param(ids.gamma).data();
        let beta = params.param(ids.beta).data();
        let xv = self.value(x);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..b {
            for ch in 0..c {
                let base = (s * c + ch) * len;
                for t in 0..len {
                    let h = (xv.data()[base + t] - mean[ch]) * inv_std[ch];
                    xhat[base + t] = h;
                    out[base + t] = gamma[ch] * h + beta[ch];
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, len], out);
        Ok(self.push(
            value,
            Op::BatchNorm { x, gamma: ids.gamma, beta: ids.beta, xhat, inv_std, train: mode == Mode::Train },
        ))
    }

    /// Convolution, batch normalization and ReLU.
    pub fn conv_block(
        &mut self,
        x: NodeId,
        params: &mut ParamStore<T>,
        block: &Conv1dBlock,
        mode: Mode,
        momentum: f64,
    ) -> Result<NodeId> {
        let h = self.conv1d(x, params, block.kernel, block.bias)?;
        let h = self.batchnorm1d(h, params, &block.bn, mode, momentum)?;
        Ok(self.relu(h))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu { x })
    }

    /// `max(0, x) + slope · min(0, x)`.
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!("leaky slope {slope} outside [0, 1)")));
        }
        let l = T::of(slope);
        let value = self.value(x).map(|v| v.max(T::zero()) + l * v.min(T::zero()));
        Ok(self.push(value, Op::LeakyRelu { x, slope: l }))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 − p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            let value = self.value(x).clone();
            return Ok(self.push(value, Op::Dropout { x, mask: None }));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(value, Op::Dropout { x, mask: Some(mask) }))
    }

    /// `y = x Wᵀ + b` for `x` of shape `B × in`.
    pub fn linear(&mut self, x: NodeId, params: &ParamStore<T>, layer: &LinearParams) -> Result<NodeId> {
        let xv = self.value(x);
        xv.expect_rank(2, "linear input")?;
        let w = params.param(layer.weight);
        let (b, inp) = (xv.shape()[0], xv.shape()[1]);
        let (out, w_in) = (w.shape()[0], w.shape()[1]);
        if inp != w_in {
            return Err(Error::Shape(format!("linear: input width {inp}, weight expects {w_in}")));
        }
        let bias = params.param(layer.bias).data();
        let mut y: Vec<T> = (0..b).flat_map(|_| bias.iter().copied()).collect();
        gemm(xv.data(), View::row_major(b, inp), w.data(), View::row_major(out, inp).t(), T::one(), &mut y);
        let value = Tensor::from_parts(vec![b, out], y);
        Ok(self.push(value, Op::Linear { x, weight: layer.weight, bias: layer.bias }))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        xv.expect_rank(2, "softmax input")?;
        let k = xv.shape()[1];
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Batch mean of `−Σ_k [y_k ln p_k + (1 − y_k) ln(1 − p_k)]` with
    /// probabilities clamped to `[ε, 1 − ε]`. Output is a one-element tensor.
    pub fn cross_entropy(&mut self, probs: NodeId, targets: &Tensor<T>) -> Result<NodeId> {
        let pv = self.value(probs);
        check_targets(pv, targets, "probabilities")?;
        let loss = cross_entropy_value(pv.data(), targets.data(), pv.shape()[0]);
        let value = Tensor::from_parts(vec![1], vec![loss]);
        Ok(self.push(value, Op::CrossEntropy { probs, targets: targets.data().to_vec() }))
    }

    /// [`softmax`](Self::softmax) followed by [`cross_entropy`](Self::cross_entropy),
    /// evaluated in the log domain. Same value and clamp, but the loss keeps
    /// its relative accuracy when the predictions are confident.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &Tensor<T>) -> Result<NodeId> {
        let zv = self.value(logits);
        check_targets(zv, targets, "logits")?;
        let (b, k) = (zv.shape()[0], zv.shape()[1]);
        let eps = T::of(PROB_EPS);
        let (lo, hi) = (eps.ln(), (-eps).ln_1p());
        let mut probs = Vec::with_capacity(zv.len());
        let mut weighted = Vec::with_capacity(zv.len());
        let mut total = T::zero();
        for (z, y) in zv.data().chunks(k).zip(targets.data().chunks(k)) {
            let top = (0..k).fold(0, |best, j| if z[j] > z[best] { j } else { best });
            let rest: T = (0..k).filter(|&j| j != top).map(|j| (z[j] - z[top]).exp()).sum();
            let log_norm = rest.ln_1p();
            let mut row = T::zero();
            for j in 0..k {
                let log_p = if j == top { -log_norm } else { z[j] - z[top] - log_norm };
                let p = log_p.exp();
                let log_q = if j == top { rest.ln() - log_norm } else { (-p).ln_1p() };
                let target = y[j] == T::one();
                let (log_term, inside) =
                    if target { (log_p, log_p >= lo && log_p <= hi) } else { (log_q, log_q >= lo && log_q <= hi) };
                row += log_term.max(lo).min(hi);
                probs.push(p);
                weighted.push(match (inside, target) {
                    (false, _) => T::zero(),
                    (true, true) => -T::one(),
                    (true, false) => (log_p - log_q).exp(),
                });
            }
            total += row;
        }
        let value = Tensor::from_parts(vec![1], vec![-total / T::of(b as f64)]);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, probs, weighted }))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs.first().ok_or(Error::EmptyInput)?;
        let shape = self.value(*first).shape().to_vec();
        let mut out = self.value(*first).data().to_vec();
        for &id in &inputs[1..] {
            let v = self.value(id);
            if v.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("add: {:?} vs {:?}", shape, v.shape())));
            }
            out.iter_mut().zip(v.data()).for_each(|(o, &a)| *o += a);
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Add { inputs: inputs.to_vec() }))
    }

    /// Concatenation of `B × C_i × L` nodes along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = self.value(*inputs.first().ok_or(Error::EmptyInput)?);
        first.expect_rank(3, "concat input")?;
        let (b, len) = (first.shape()[0], first.shape()[2]);
        let mut channels = 0;
        for &id in inputs {
            let v = self.value(id);
            v.expect_rank(3, "concat input")?;
            if v.shape()[0] != b || v.shape()[2] != len {
                return Err(Error::Shape(format!("concat: {:?} incompatible with batch {b}, length {len}", v.shape())));
            }
            channels += v.shape()[1];
        }
        let mut out = Vec::with_capacity(b * channels * len);
        for s in 0..b {
            for &id in inputs {
                let v = self.value(id);
                let per = v.shape()[1] * len;
                out.extend_from_slice(&v.data()[s * per..(s + 1) * per]);
            }
        }
        let value = Tensor::from_parts(vec![b, channels, len], out);
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec() }))
    }

    /// Adaptive average pooling of the time axis to `out_len` bins.
    pub fn adaptive_avg_pool(&mut self, x: NodeId, out_len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        xv.expect_rank(3, "pool input")?;
        let (b, c, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if out_len == 0 || out_len > len {
            return Err(Error::Shape(format!("cannot pool length {len} to {out_len}")));
        }
        let mut out = vec![T::zero(); b * c * out_len];
        for (row_in, row_out) in xv.data().chunks(len).zip(out.chunks_mut(out_len)) {
            for (i, o) in row_out.iter_mut().enumerate() {
                let (s, e) = pool_window(i, len, out_len);
                *o = row_in[s..e].iter().copied().sum::<T>() / T::of((e - s) as f64);
            }
        }
        let value = Tensor::from_parts(vec![b, c, out_len], out);
        Ok(self.push(value, Op::AvgPool { x }))
    }

    /// Repeats a `B × F` node along a new time axis: `B × F × len`.
    pub fn tile_time(&mut self, x: NodeId, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        xv.expect_rank(2, "tile input")?;
        let (b, f) = (xv.shape()[0], xv.shape()[1]);
        let out = xv.data().iter().flat_map(|&v| std::iter::repeat_n(v, len)).collect();
        let value = Tensor::from_parts(vec![b, f, len], out);
        Ok(self.push(value, Op::Tile { x }))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let b = xv.shape()[0];
        let rest = xv.len() / b;
        let value = Tensor::from_parts(vec![b, rest], xv.data().to_vec());
        self.push(value, Op::Reshape { x })
    }

    /// Mean over the time axis: `B × C × L` to `B × C`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        xv.expect_rank(3, "global pool input")?;
        let (b, c, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let inv = T::of(1.0 / len as f64);
        let out = xv.data().chunks(len).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_parts(vec![b, c], out);
        Ok(self.push(value, Op::GlobalAvgPool { x }))
    }

    /// Back-propagates from the scalar node `loss`, storing node gradients on
    /// the tape and adding parameter gradients into `params`.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads, params);
            grads[i] = Some(gy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>], params: &mut ParamStore<T>) {
        let node = &self.nodes[i];
        let y = &node.value;
        let accumulate = |grads: &mut [Option<Vec<T>>], id: NodeId, n: usize| -> Vec<T> {
            grads[id.0].take().unwrap_or_else(|| vec![T::zero(); n])
        };
        match &node.op {
            Op::Input => {}
            Op::Conv1d { x, kernel, bias, k } => {
                let xv = self.value(*x);
                let (b, c_in, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let c_out = y.shape()[1];
                let k = *k;
                let mut dx = accumulate(grads, *x, xv.len());
                let w = params.param(*kernel).data().to_vec();
                let mut dw = vec![T::zero(); w.len()];
                let mut cols = vec![T::zero(); c_in * k * len];
                let mut dcols = vec![T::zero(); c_in * k * len];
                let mut db = vec![T::zero(); c_out];
                for s in 0..b {
                    let g = &gy[s * c_out * len..(s + 1) * c_out * len];
                    for (co, row) in g.chunks(len).enumerate() {
                        db[co] += row.iter().copied().sum::<T>();
                    }
                    im2col(&xv.data()[s * c_in * len..(s + 1) * c_in * len], c_in, len, k, &mut cols);
                    gemm(g, View::row_major(c_out, len), &cols, View::row_major(c_in * k, len).t(), T::one(), &mut dw);
                    gemm(
                        &w,
                        View::row_major(c_out, c_in * k).t(),
                        g,
                        View::row_major(c_out, len),
                        T::zero(),
                        &mut dcols,
                    );
                    col2im_add(&dcols, c_in, len, k, &mut dx[s * c_in * len..(s + 1) * c_in * len]);
                }
                add_into(params.param_mut(*kernel).grad_mut(), &dw);
                add_into(params.param_mut(*bias).grad_mut(), &db);
                grads[x.0] = Some(dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (b, c, len) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                let n = T::of((b * len) as f64);
                let gam = params.param(*gamma).data().to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..b {
                    for ch in 0..c {
                        let base = (s * c + ch) * len;
                        for t in 0..len {
                            dgamma[ch] += gy[base + t] * xhat[base + t];
                            dbeta[ch] += gy[base + t];
                        }
                    }
                }
                let mut dx = accumulate(grads, *x, y.len());
                for s in 0..b {
                    for ch in 0..c {
                        let base = (s * c + ch) * len;
                        let scale = gam[ch] * inv_std[ch];
                        for t in 0..len {
                            dx[base + t] += if *train {
                                scale * (gy[base + t] - (dbeta[ch] + xhat[base + t] * dgamma[ch]) / n)
                            } else {
                                scale * gy[base + t]
                            };
                        }
                    }
                }
                add_into(params.param_mut(*gamma).grad_mut(), &dgamma);
                add_into(params.param_mut(*beta).grad_mut(), &dbeta);
                grads[x.0] = Some(dx);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut dx = accumulate(grads, *x, xv.len());
                for ((d, &g), &v) in dx.iter_mut().zip(gy).zip(xv.data()) {
                    if v > T::zero() {
                        *d += g;
                    }
                }
                grads[x.0] = Some(dx);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let mut dx = accumulate(grads, *x, xv.len());
                for ((d, &g), &v) in dx.iter_mut().zip(gy).zip(xv.data()) {
                    *d += if v > T::zero() { g } else { g * *slope };
                }
                grads[x.0] = Some(dx);
            }
            Op::Dropout { x, mask } => {
                let mut dx = accumulate(grads, *x, y.len());
                match mask {
                    Some(m) => dx.iter_mut().zip(gy).zip(m).for_each(|((d, &g), &m)| *d += g * m),
                    None => add_into(&mut dx, gy),
                }
                grads[x.0] = Some(dx);
            }
            Op::Linear { x, weight, bias } => {
                let xv = self.value(*x);
                let (b, inp) = (xv.shape()[0], xv.shape()[1]);
                let out = y.shape()[1];
                let w = params.param(*weight).data().to_vec();
                let mut dw = vec![T::zero(); out * inp];
                gemm(gy, View::row_major(b, out).t(), xv.data(), View::row_major(b, inp), T::zero(), &mut dw);
                let mut db = vec![T::zero(); out];
                for row in gy.chunks(out) {
                    add_into(&mut db, row);
                }
                let mut dx = accumulate(grads, *x, xv.len());
                gemm(gy, View::row_major(b, out), &w, View::row_major(out, inp), T::one(), &mut dx);
                add_into(params.param_mut(*weight).grad_mut(), &dw);
                add_into(params.param_mut(*bias).grad_mut(), &db);
                grads[x.0] = Some(dx);
            }
            Op::Softmax { x } => {
                let k = y.shape()[1];
                let mut dx = accumulate(grads, *x, y.len());
                for ((d, yr), gr) in dx.chunks_mut(k).zip(y.data().chunks(k)).zip(gy.chunks(k)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((dv, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
                        *dv += yv * (gv - dot);
                    }
                }
                grads[x.0] = Some(dx);
            }
            Op::CrossEntropy { probs, targets } => {
                let pv = self.value(*probs);
                let b = pv.shape()[0];
                let eps = T::of(PROB_EPS);
                let hi = T::one() - eps;
                let scale = gy[0] / T::of(b as f64);
                let mut dp = accumulate(grads, *probs, pv.len());
                for ((d, &p), &t) in dp.iter_mut().zip(pv.data()).zip(targets) {
                    // the clamp is flat outside [eps, 1 - eps]
                    if p >= eps && p <= hi {
                        *d -= scale * (t / p - (T::one() - t) / (T::one() - p));
                    }
                }
                grads[probs.0] = Some(dp);
            }
            Op::SoftmaxCrossEntropy { logits, probs, weighted } => {
                let zv = self.value(*logits);
                let k = zv.shape()[1];
                let scale = gy[0] / T::of(zv.shape()[0] as f64);
                let mut dz = accumulate(grads, *logits, zv.len());
                for ((d, p), w) in dz.chunks_mut(k).zip(probs.chunks(k)).zip(weighted.chunks(k)) {
                    let sum: T = w.iter().copied().sum();
                    for ((dv, &pv), &wv) in d.iter_mut().zip(p).zip(w) {
                        *dv += scale * (wv - pv * sum);
                    }
                }
                grads[logits.0] = Some(dz);
            }
            Op::Add { inputs } => {
                for &id in inputs {
                    let mut d = accumulate(grads, id, y.len());
                    add_into(&mut d, gy);
                    grads[id.0] = Some(d);
                }
            }
            Op::Concat { inputs } => {
                let (b, len) = (y.shape()[0], y.shape()[2]);
                let total = y.shape()[1] * len;
                let mut offset = 0;
                for &id in inputs {
                    let per = self.value(id).shape()[1] * len;
                    let mut d = accumulate(grads, id, b * per);
                    for s in 0..b {
                        add_into(&mut d[s * per..(s + 1) * per], &gy[s * total + offset..s * total + offset + per]);
                    }
                    offset += per;
                    grads[id.0] = Some(d);
                }
            }
            Op::AvgPool { x } => {
                let len = self.value(*x).shape()[2];
                let out_len = y.shape()[2];
                let mut dx = accumulate(grads, *x, self.value(*x).len());
                for (row_d, row_g) in dx.chunks_mut(len).zip(gy.chunks(out_len)) {
                    for (i, &g) in row_g.iter().enumerate() {
                        let (s, e) = pool_window(i, len, out_len);
                        let share = g / T::of((e - s) as f64);
                        row_d[s..e].iter_mut().for_each(|d| *d += share);
                    }
                }
                grads[x.0] = Some(dx);
            }
            Op::Tile { x } => {
                let len = y.shape()[2];
                let mut dx = accumulate(grads, *x, self.value(*x).len());
                for (d, row) in dx.iter_mut().zip(gy.chunks(len)) {
                    *d += row.iter().copied().sum::<T>();
                }
                grads[x.0] = Some(dx);
            }
            Op::Reshape { x } => {
                let mut dx = accumulate(grads, *x, y.len());
                add_into(&mut dx, gy);
                grads[x.0] = Some(dx);
            }
            Op::GlobalAvgPool { x } => {
                let len = self.value(*x).shape()[2];
                let inv = T::of(1.0 / len as f64);
                let mut dx = accumulate(grads, *x, self.value(*x).len());
                for (row, &g) in dx.chunks_mut(len).zip(gy) {
                    row.iter_mut().for_each(|d| *d += g * inv);
                }
                grads[x.0] = Some(dx);
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn check_targets<T: Real>(input: &Tensor<T>, targets: &Tensor<T>, what: &str) -> Result<()> {
    input.expect_rank(2, what)?;
    if input.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "cross_entropy: {what} {:?} vs targets {:?}",
            input.shape(),
            targets.shape()
        )));
    }
    let k = input.shape()[1];
    for (i, row) in targets.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::NotOneHot(format!("row {i}")));
        }
    }
    Ok(())
}

pub(crate) fn cross_entropy_value<T: Real>(probs: &[T], targets: &[T], batch: usize) -> T {
    let eps = T::of(PROB_EPS);
    let hi = T::one() - eps;
    let total: T = probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.max(eps).min(hi);
            t * p.ln() + (T::one() - t) * (T::one() - p).ln()
        })
        .sum();
    -total / T::of(batch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with_conv(kernel: &[f64], shape: [usize; 3]) -> (ParamStore<f64>, ParamId, ParamId) {
        let mut store = ParamStore::new();
        let w = store.add_param("w", Tensor::from_f64(&shape, kernel).unwrap());
        let b = store.add_param("b", Tensor::zeros(&[shape[0]]));
        (store, w, b)
    }

    #[test]
    fn conv_identity_kernel() {
        let (store, w, b) = store_with_conv(&[0.0, 1.0, 0.0], [1, 1, 3]);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_f64(&[1, 1, 3], &[0.0, 1.0, 0.0]).unwrap());
        let y = tape.conv1d(x, &store, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn conv_box_kernel_with_zero_padding() {
        let (store, w, b) = store_with_conv(&[1.0, 1.0, 1.0], [1, 1, 3]);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_f64(&[1, 1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let y = tape.conv1d(x, &store, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_shape_contract_and_channel_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let block = Conv1dBlock::register(&mut store, "c", 6, 128, 7, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 6, 24]));
        let y = tape.conv1d(x, &store, block.kernel, block.bias).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 128, 24]);
        let bad = tape.input(Tensor::zeros(&[2, 5, 24]));
        assert!(matches!(tape.conv1d(bad, &store, block.kernel, block.bias), Err(Error::Shape(_))));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let ids = BatchNormIds::register(&mut store, "bn", 3);
        let data: Vec<f64> = (0..4 * 3 * 8).map(|_| rng.random_range(-3.0..5.0)).collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[4, 3, 8], data).unwrap());
        let y = tape.batchnorm1d(x, &mut store, &ids, Mode::Train, 0.1).unwrap();
        let out = tape.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|s| out[(s * 3 + ch) * 8..(s * 3 + ch + 1) * 8].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3, "variance {var} (eps shrinks it slightly)");
        }
        // running statistics moved towards the batch statistics
        assert!(store.buffer(ids.running_mean).data().iter().all(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_scale_shift_and_degenerate_batch() {
        let mut store = ParamStore::<f64>::new();
        let ids = BatchNormIds::register(&mut store, "bn", 1);
        store.param_mut(ids.gamma).data_mut()[0] = 2.0;
        store.param_mut(ids.beta).data_mut()[0] = 3.0;
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_f64(&[1, 1, 2], &[-1.0, 1.0]).unwrap());
        let y = tape.batchnorm1d(x, &mut store, &ids, Mode::Train, 0.1).unwrap();
        let out = tape.value(y).data();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((out[0] - (3.0 - 2.0 * s)).abs() < 1e-12);
        assert!((out[1] - (3.0 + 2.0 * s)).abs() < 1e-12);
        let single = tape.input(Tensor::from_f64(&[1, 1, 1], &[4.0]).unwrap());
        assert!(matches!(tape.batchnorm1d(single, &mut store, &ids, Mode::Train, 0.1), Err(Error::DegenerateBatch)));
        assert!(tape.batchnorm1d(single, &mut store, &ids, Mode::Eval, 0.1).is_ok());
    }

    #[test]
    fn leaky_relu_values_and_relu_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(&[3], &[5.0, -2.0, 0.0]).unwrap());
        let y = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -0.02, 0.0]);
        let r = tape.relu(x);
        let l0 = tape.leaky_relu(x, 0.0).unwrap();
        assert_eq!(tape.value(r).data(), tape.value(l0).data());
        assert!(tape.leaky_relu(x, 1.0).is_err());
        let neg = tape.input(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(neg);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::full(&[100_000], 1.0));
        for mode in [Mode::Train, Mode::Eval] {
            let y = tape.dropout(x, 0.0, mode, &mut rng).unwrap();
            assert_eq!(tape.value(y).data(), tape.value(x).data());
        }
        let y = tape.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let v = tape.value(y).data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        // each element is 0 or 2 with equal probability: sigma of the mean is 1/sqrt(n)
        let sigma = 1.0 / (v.len() as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn linear_hand_arithmetic() {
        let mut store = ParamStore::<f64>::new();
        let layer = LinearParams {
            weight: store.add_param("w", Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap()),
            bias: store.add_param("b", Tensor::from_f64(&[1], &[1.0]).unwrap()),
            in_features: 2,
            out_features: 1,
        };
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_f64(&[1, 2], &[2.0, 3.0]).unwrap());
        let y = tape.linear(x, &store, &layer).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
        let bad = tape.input(Tensor::zeros(&[1, 3]));
        assert!(tape.linear(bad, &store, &layer).is_err());
    }

    #[test]
    fn softmax_basics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(&[3, 2], &[0.0, 0.0, 1000.0, 0.0, 3.0, 1.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        let out = tape.value(y).data().to_vec();
        assert_eq!(&out[..2], &[0.5, 0.5]);
        assert!((out[2] - 1.0).abs() < 1e-12 && out[3] < 1e-300);
        let shifted = tape.input(Tensor::from_f64(&[1, 2], &[13.0, 11.0]).unwrap());
        let ys = tape.softmax(shifted).unwrap();
        for (a, b) in tape.value(ys).data().iter().zip(&out[4..]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_binary() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap());
        let y = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let l = tape.cross_entropy(p, &y).unwrap();
        assert!((tape.value(l).data()[0] - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_perfect_prediction_and_validation() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(Tensor::from_f64(&[1, 3], &[0.0, 1.0, 0.0]).unwrap());
        let y = Tensor::from_f64(&[1, 3], &[0.0, 1.0, 0.0]).unwrap();
        let l = tape.cross_entropy(p, &y).unwrap();
        assert!(tape.value(l).data()[0] < 1e-5);
        let not_one_hot = Tensor::from_f64(&[1, 3], &[0.5, 0.5, 0.0]).unwrap();
        assert!(matches!(tape.cross_entropy(p, &not_one_hot), Err(Error::NotOneHot(_))));
    }

    #[test]
    fn fused_loss_matches_softmax_then_cross_entropy() {
        let cases: [&[f64]; 4] = [
            &[0.3, -1.2, 2.0, 0.5, 0.5, -0.1],
            &[12.0, -3.0, 1.0, -20.0, 25.0, 0.0],
            &[40.0, 0.0, -40.0, 0.0, 0.0, 0.0],
            &[1.0, 1.0, 1.0, -5.0, 30.0, -5.0],
        ];
        let y = one_hot::<f64>(&[0, 1], 3).unwrap();
        let mut store = ParamStore::new();
        for logits in cases {
            let run = |fused: bool, store: &mut ParamStore<f64>| {
                let mut tape = Tape::<f64>::new();
                let z = tape.input(Tensor::from_f64(&[2, 3], logits).unwrap());
                let l = if fused {
                    tape.softmax_cross_entropy(z, &y).unwrap()
                } else {
                    let p = tape.softmax(z).unwrap();
                    tape.cross_entropy(p, &y).unwrap()
                };
                tape.backward(l, store).unwrap();
                (tape.value(l).data()[0], tape.grad(z).unwrap().to_vec())
            };
            let (a, ga) = run(true, &mut store);
            let (b, gb) = run(false, &mut store);
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
            for (u, v) in ga.iter().zip(&gb) {
                assert!((u - v).abs() < 1e-9, "{ga:?} vs {gb:?}");
            }
        }
    }

    #[test]
    fn fused_loss_keeps_precision_when_confident() {
        let mut tape = Tape::<f64>::new();
        let z = tape.input(Tensor::from_f64(&[1, 2], &[0.0, -14.0]).unwrap());
        let l = tape.softmax_cross_entropy(z, &one_hot(&[0], 2).unwrap()).unwrap();
        let exact = 2.0 * (-14f64).exp().ln_1p();
        assert!((tape.value(l).data()[0] - exact).abs() <= 1e-15 * exact);
    }

    #[test]
    fn backward_requires_forward() {
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::new();
        assert!(matches!(tape.backward(NodeId(0), &mut store), Err(Error::NoForward)));
    }

    #[test]
    fn leaky_relu_derivative() {
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::new();
        let x = tape.input(Tensor::from_f64(&[1], &[-2.0]).unwrap());
        let y = tape.leaky_relu(x, 0.01).unwrap();
        tape.backward(y, &mut store).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn parameter_gradients_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let layer = LinearParams {
            weight: store.add_param("w", Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap()),
            bias: store.add_param("b", Tensor::zeros(&[1])),
            in_features: 2,
            out_features: 1,
        };
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_f64(&[1, 2], &[2.0, 3.0]).unwrap());
        let y = tape.linear(x, &store, &layer).unwrap();
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.param(layer.weight).grad().unwrap(), &[2.0, 3.0]);
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.param(layer.weight).grad().unwrap(), &[4.0, 6.0]);
        store.zero_grads();
        assert_eq!(store.param(layer.weight).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn pooling_windows_cover_input() {
        assert_eq!(pool_window(0, 24, 3), (0, 8));
        assert_eq!(pool_window(2, 24, 3), (16, 24));
        assert_eq!(pool_window(1, 5, 3), (1, 4));
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(&[1, 1, 4], &[1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = tape.adaptive_avg_pool(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 6.0]);
        let t = tape.input(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let tiled = tape.tile_time(t, 3).unwrap();
        assert_eq!(tape.value(tiled).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }
}
