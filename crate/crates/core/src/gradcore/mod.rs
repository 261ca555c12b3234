//! Minimal deterministic reverse-mode differentiation engine.
//!
//! A [`Tape`] records every operation during the forward pass; [`Tape::backward`]
//! replays the records in reverse, accumulating gradients into per-node
//! buffers. The op set is exactly what the residual classifier and the
//! input-gradient attacks need: conv2d, relu, linear, batchnorm2d,
//! global_avg_pool, residual add, a fixed channel affine, softmax
//! cross-entropy, and a few scalar combinators for tests.
//!
//! Determinism: every reduction runs in a fixed order. With `jobs > 1` the
//! convolution kernels parallelize over fixed sample chunks and fold partial
//! results in chunk order, so multi-threaded runs are bit-identical to
//! single-threaded ones.

mod check;
mod kernels;

pub use check::grad_check;
pub(crate) use kernels::maybe_par_map;
#[allow(unused_imports)]
pub(crate) use kernels::chunk_ranges;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use kernels::{bn_backward, bn_batch_stats, bn_forward, conv2d_backward, conv2d_forward, ConvGeom};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Batch statistics returned by a train-mode batchnorm, for running-stat
/// updates by the owning layer.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased variance (divides by N*H*W).
    pub var: Vec<F>,
    /// Elements per channel that contributed (N*H*W).
    pub count: usize,
}

enum Op<F: Scalar> {
    Leaf,
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        geom: ConvGeom,
    },
    Relu {
        input: TensorId,
    },
    Linear {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    BatchNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    GlobalAvgPool {
        input: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        input: TensorId,
        factor: F,
    },
    Sum {
        input: TensorId,
    },
    Mean {
        input: TensorId,
    },
    ChannelAffine {
        input: TensorId,
        scale: Vec<F>,
    },
    CrossEntropyPerSample {
        logits: TensorId,
        labels: Vec<usize>,
        softmax: Vec<F>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    needs_grad: bool,
}

/// Recorded forward computation plus, after `backward`, its gradients.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    ops: Vec<Op<F>>,
    grads: Vec<Option<Vec<F>>>,
    consumed: bool,
    jobs: usize,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            jobs: 1,
        }
    }

    /// A tape whose batch kernels may use up to `jobs` workers. Results are
    /// bit-identical to `jobs = 1`.
    pub fn with_jobs(jobs: usize) -> Self {
        let mut t = Self::new();
        t.jobs = jobs.max(1);
        t
    }

    /// Registers a constant input; no gradient will be computed for it.
    pub fn leaf(&mut self, value: Tensor<F>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a differentiable input (parameters, attacked images).
    pub fn leaf_var(&mut self, value: Tensor<F>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of `id`, when backward reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, needs_grad });
        self.ops.push(op);
        TensorId(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        value: Tensor<F>,
        op: Op<F>,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- layer ops -------------------------------------------------------

    /// Cross-correlation of `input [N,C,H,W]` with `weight [K,C,kh,kw]` plus
    /// `bias [K]`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let geom = ConvGeom::resolve(
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
            stride,
            padding,
        )?;
        let out = conv2d_forward(
            &geom,
            self.value(input),
            self.value(weight),
            self.value(bias),
            self.jobs,
        );
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push_checked(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            needs,
            "conv2d",
        )
    }

    pub fn relu(&mut self, input: TensorId) -> Result<TensorId> {
        let x = self.value(input);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .map(|&v| if v > F::zero() { v } else { F::zero() })
                .collect(),
        )?;
        let needs = self.needs(input);
        self.push_checked(out, Op::Relu { input }, needs, "relu")
    }

    /// `input [N,D] @ weight [K,D]^T + bias [K]`.
    pub fn linear(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xs, ws, bs) = (
            self.value(input).shape().to_vec(),
            self.value(weight).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::ShapeMismatch(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xs, ws, bs
            )));
        }
        let (n, d, k) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(vec![n, k]);
        F::gemm(
            n,
            d,
            k,
            F::one(),
            self.value(input).data(),
            d as isize,
            1,
            self.value(weight).data(),
            1,
            d as isize,
            F::zero(),
            out.data_mut(),
            k as isize,
            1,
        );
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(k) {
            for (v, bk) in row.iter_mut().zip(&b) {
                *v = *v + *bk;
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push_checked(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
            "linear",
        )
    }

    /// Train-mode batchnorm over an NCHW tensor: normalizes with batch
    /// statistics and returns them so the caller can update running stats.
    pub fn batchnorm2d_train(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, BatchStats<F>)> {
        let (id, stats) = self.batchnorm_impl(input, gamma, beta, eps, None)?;
        Ok((id, stats))
    }

    /// Eval-mode batchnorm: normalizes with the provided running statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        running_mean: &[F],
        running_var: &[F],
    ) -> Result<TensorId> {
        let (id, _) = self.batchnorm_impl(input, gamma, beta, eps, Some((running_mean, running_var)))?;
        Ok(id)
    }

    fn batchnorm_impl(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        running: Option<(&[F], &[F])>,
    ) -> Result<(TensorId, BatchStats<F>)> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm2d expects [N,C,H,W], got {:?}",
                shape
            )));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm2d gamma/beta must have shape [{}]",
                c
            )));
        }
        let train = running.is_none();
        let (mean_f64, var_f64) = match running {
            Some((rm, rv)) => (
                rm.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                rv.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            ),
            None => bn_batch_stats(self.value(input).data(), n, c, hw),
        };
        let mean: Vec<F> = mean_f64.iter().map(|&v| F::from_f64(v)).collect();
        let inv_std: Vec<F> = var_f64
            .iter()
            .map(|&v| F::from_f64(1.0 / (v + eps).sqrt()))
            .collect();
        let out = bn_forward(
            self.value(input).data(),
            n,
            c,
            hw,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let stats = BatchStats {
            mean: mean.clone(),
            var: var_f64.iter().map(|&v| F::from_f64(v)).collect(),
            count: n * hw,
        };
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let id = self.push_checked(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            needs,
            "batchnorm2d",
        )?;
        Ok((id, stats))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "global_avg_pool expects [N,C,H,W], got {:?}",
                shape
            )));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = self.value(input).data();
        let mut out = Tensor::zeros(vec![n, c]);
        {
            let o = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let mut s = 0.0f64;
                    for v in &x[base..base + hw] {
                        s += v.as_f64();
                    }
                    o[ni * c + ci] = F::from_f64(s / hw as f64);
                }
            }
        }
        let needs = self.needs(input);
        self.push_checked(out, Op::GlobalAvgPool { input }, needs, "global_avg_pool")
    }

    /// Elementwise sum of two same-shape tensors (the residual join).
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        self.push_checked(out, Op::Add { a, b }, needs, "add")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        self.push_checked(out, Op::Mul { a, b }, needs, "mul")
    }

    pub fn scale(&mut self, input: TensorId, factor: F) -> Result<TensorId> {
        let out = Tensor::new(
            self.value(input).shape().to_vec(),
            self.value(input).data().iter().map(|&v| v * factor).collect(),
        )?;
        let needs = self.needs(input);
        self.push_checked(out, Op::Scale { input, factor }, needs, "scale")
    }

    /// Full reduction to a scalar `[1]`.
    pub fn sum(&mut self, input: TensorId) -> Result<TensorId> {
        let mut s = 0.0f64;
        for v in self.value(input).data() {
            s += v.as_f64();
        }
        let needs = self.needs(input);
        self.push_checked(
            Tensor::scalar(F::from_f64(s)),
            Op::Sum { input },
            needs,
            "sum",
        )
    }

    /// Mean reduction to a scalar `[1]`.
    pub fn mean(&mut self, input: TensorId) -> Result<TensorId> {
        let n = self.value(input).numel();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let mut s = 0.0f64;
        for v in self.value(input).data() {
            s += v.as_f64();
        }
        let needs = self.needs(input);
        self.push_checked(
            Tensor::scalar(F::from_f64(s / n as f64)),
            Op::Mean { input },
            needs,
            "mean",
        )
    }

    /// Fixed per-channel affine `y = x * scale[c] + shift[c]` on NCHW input.
    /// The coefficients are constants, not differentiable parameters.
    pub fn channel_affine(&mut self, input: TensorId, scale: &[F], shift: &[F]) -> Result<TensorId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 || scale.len() != shape[1] || shift.len() != shape[1] {
            return Err(Error::ShapeMismatch(format!(
                "channel_affine: input {:?}, {} scales, {} shifts",
                shape,
                scale.len(),
                shift.len()
            )));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = self.value(input).data();
        let mut out = vec![F::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (a, b) = (scale[ci], shift[ci]);
                for i in base..base + hw {
                    out[i] = x[i] * a + b;
                }
            }
        }
        let needs = self.needs(input);
        self.push_checked(
            Tensor::new(shape, out)?,
            Op::ChannelAffine {
                input,
                scale: scale.to_vec(),
            },
            needs,
            "channel_affine",
        )
    }

    /// Per-sample `-log softmax(logits)[label]`, numerically stabilized by
    /// max subtraction. Output shape `[N]`.
    pub fn cross_entropy_per_sample(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: logits {:?} vs {} labels",
                shape,
                labels.len()
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        for &y in labels {
            if y >= k {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: k,
                });
            }
        }
        let ls = self.value(logits).data();
        let mut softmax = vec![F::zero(); n * k];
        let mut losses = vec![F::zero(); n];
        for i in 0..n {
            let row = &ls[i * k..(i + 1) * k];
            let m = row
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0f64;
            for (j, v) in row.iter().enumerate() {
                let e = (v.as_f64() - m).exp();
                softmax[i * k + j] = F::from_f64(e);
                z += e;
            }
            for j in 0..k {
                softmax[i * k + j] = F::from_f64(softmax[i * k + j].as_f64() / z);
            }
            losses[i] = F::from_f64(m + z.ln() - row[labels[i]].as_f64());
        }
        let needs = self.needs(logits);
        self.push_checked(
            Tensor::new(vec![n], losses)?,
            Op::CrossEntropyPerSample {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
            needs,
            "cross_entropy",
        )
    }

    /// Mean over the batch of per-sample cross-entropy; scalar output.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let per = self.cross_entropy_per_sample(logits, labels)?;
        self.mean(per)
    }

    // ---- backward --------------------------------------------------------

    /// Replays ops in reverse from `loss`, accumulating gradients. `loss`
    /// must be scalar. A tape can run backward once.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = upper[0].take().expect("grad present");
            self.backprop_op(i, &g, lower)?;
            upper[0] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Seeds backward from a vector node by summing it first; per-sample
    /// gradients of independent samples stay separated in the input grad.
    pub fn backward_sum(&mut self, vector: TensorId) -> Result<()> {
        let total = self.sum(vector)?;
        self.backward(total)
    }

    fn backprop_op(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        fn buf<'a, F: Scalar>(slot: &'a mut Option<Vec<F>>, len: usize) -> &'a mut [F] {
            slot.get_or_insert_with(|| vec![F::zero(); len]).as_mut_slice()
        }

        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need_dx = self.needs(*input);
                let res = conv2d_backward(
                    geom,
                    self.value(*input),
                    self.value(*weight),
                    g,
                    need_dx,
                    self.jobs,
                );
                if self.needs(*weight) {
                    let dw = buf(&mut grads[weight.0], self.value(*weight).numel());
                    for (d, p) in dw.iter_mut().zip(res.dw) {
                        *d = *d + p;
                    }
                }
                if self.needs(*bias) {
                    let db = buf(&mut grads[bias.0], self.value(*bias).numel());
                    for (d, p) in db.iter_mut().zip(res.db) {
                        *d = *d + p;
                    }
                }
                if let Some(dx) = res.dx {
                    let dst = buf(&mut grads[input.0], self.value(*input).numel());
                    for (d, p) in dst.iter_mut().zip(dx) {
                        *d = *d + p;
                    }
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    let x = self.value(*input).data();
                    let dst = buf(&mut grads[input.0], x.len());
                    for j in 0..x.len() {
                        if x[j] > F::zero() {
                            dst[j] = dst[j] + g[j];
                        }
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.value(*input).shape();
                let (n, d) = (xs[0], xs[1]);
                let k = self.value(*weight).shape()[0];
                if self.needs(*input) {
                    // dX[N x D] += dY[N x K] @ W[K x D]
                    let w = self.value(*weight).data();
                    let dst = buf(&mut grads[input.0], n * d);
                    F::gemm(
                        n,
                        k,
                        d,
                        F::one(),
                        g,
                        k as isize,
                        1,
                        w,
                        d as isize,
                        1,
                        F::one(),
                        dst,
                        d as isize,
                        1,
                    );
                }
                if self.needs(*weight) {
                    // dW[K x D] += dY^T[K x N] @ X[N x D]
                    let x = self.value(*input).data();
                    let dst = buf(&mut grads[weight.0], k * d);
                    F::gemm(
                        k,
                        n,
                        d,
                        F::one(),
                        g,
                        1,
                        k as isize,
                        x,
                        d as isize,
                        1,
                        F::one(),
                        dst,
                        d as isize,
                        1,
                    );
                }
                if self.needs(*bias) {
                    let dst = buf(&mut grads[bias.0], k);
                    for row in g.chunks(k) {
                        for (dbk, gv) in dst.iter_mut().zip(row) {
                            *dbk = *dbk + *gv;
                        }
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let shape = self.value(*input).shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let res = bn_backward(
                    self.value(*input).data(),
                    g,
                    n,
                    c,
                    hw,
                    mean,
                    inv_std,
                    self.value(*gamma).data(),
                    *train,
                );
                if self.needs(*input) {
                    let dst = buf(&mut grads[input.0], self.value(*input).numel());
                    for (d, p) in dst.iter_mut().zip(res.dx) {
                        *d = *d + p;
                    }
                }
                if self.needs(*gamma) {
                    let dst = buf(&mut grads[gamma.0], c);
                    for (d, p) in dst.iter_mut().zip(res.dgamma) {
                        *d = *d + p;
                    }
                }
                if self.needs(*beta) {
                    let dst = buf(&mut grads[beta.0], c);
                    for (d, p) in dst.iter_mut().zip(res.dbeta) {
                        *d = *d + p;
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                if self.needs(*input) {
                    let shape = self.value(*input).shape();
                    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let inv = F::from_f64(1.0 / hw as f64);
                    let dst = buf(&mut grads[input.0], n * c * hw);
                    for ni in 0..n {
                        for ci in 0..c {
                            let gv = g[ni * c + ci] * inv;
                            let base = (ni * c + ci) * hw;
                            for d in &mut dst[base..base + hw] {
                                *d = *d + gv;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if self.needs(*id) {
                        let dst = buf(&mut grads[id.0], g.len());
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d = *d + *gv;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let dst = buf(&mut grads[a.0], g.len());
                    for j in 0..g.len() {
                        dst[j] = dst[j] + g[j] * bv[j];
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let dst = buf(&mut grads[b.0], g.len());
                    for j in 0..g.len() {
                        dst[j] = dst[j] + g[j] * av[j];
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.needs(*input) {
                    let dst = buf(&mut grads[input.0], g.len());
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d = *d + *gv * *factor;
                    }
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    let len = self.value(*input).numel();
                    let gv = g[0];
                    let dst = buf(&mut grads[input.0], len);
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                }
            }
            Op::Mean { input } => {
                if self.needs(*input) {
                    let len = self.value(*input).numel();
                    let gv = g[0] * F::from_f64(1.0 / len as f64);
                    let dst = buf(&mut grads[input.0], len);
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                }
            }
            Op::ChannelAffine { input, scale } => {
                if self.needs(*input) {
                    let shape = self.value(*input).shape();
                    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let dst = buf(&mut grads[input.0], n * c * hw);
                    for ni in 0..n {
                        for ci in 0..c {
                            let a = scale[ci];
                            let base = (ni * c + ci) * hw;
                            for j in base..base + hw {
                                dst[j] = dst[j] + g[j] * a;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropyPerSample {
                logits,
                labels,
                softmax,
            } => {
                if self.needs(*logits) {
                    let k = self.value(*logits).shape()[1];
                    let dst = buf(&mut grads[logits.0], softmax.len());
                    for (i, &y) in labels.iter().enumerate() {
                        let gi = g[i];
                        for j in 0..k {
                            let indicator = if j == y { F::one() } else { F::zero() };
                            dst[i * k + j] = dst[i * k + j] + gi * (softmax[i * k + j] - indicator);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
