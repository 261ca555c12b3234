//! Dense compute kernels behind the tape ops.
//!
//! Convolution is im2col + GEMM. Batch work is split into fixed-size sample
//! chunks; partial reductions are folded in chunk order, so results are
//! bit-identical whether a chunk runs on one thread or many.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;
use std::ops::Range;

/// Fixed sample-chunk size for parallel batch work. Chunk boundaries (not
/// thread count) determine the floating-point reduction order.
pub(crate) const SAMPLE_CHUNK: usize = 8;

/// Maps over items, in parallel when `jobs > 1`. Output order is input order.
pub(crate) fn maybe_par_map<T, R, Func>(jobs: usize, items: Vec<T>, f: Func) -> Vec<R>
where
    T: Send,
    R: Send,
    Func: Fn(T) -> R + Sync + Send,
{
    if jobs > 1 {
        items.into_par_iter().map(f).collect()
    } else {
        items.into_iter().map(f).collect()
    }
}

pub(crate) fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    (0..n)
        .step_by(chunk.max(1))
        .map(|s| s..(s + chunk).min(n))
        .collect()
}

/// Geometry of one conv2d application.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn resolve(
        input_shape: &[usize],
        weight_shape: &[usize],
        bias_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<ConvGeom> {
        if input_shape.len() != 4 || weight_shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects input [N,C,H,W] and weight [K,C,kh,kw], got {:?} and {:?}",
                input_shape, weight_shape
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (n, c_in, h, w) = (
            input_shape[0],
            input_shape[1],
            input_shape[2],
            input_shape[3],
        );
        let (k_out, wc, kh, kw) = (
            weight_shape[0],
            weight_shape[1],
            weight_shape[2],
            weight_shape[3],
        );
        if wc != c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv2d weight expects {} input channels, input has {}",
                wc, c_in
            )));
        }
        if bias_shape != [k_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias shape {:?} does not match {} output channels",
                bias_shape, k_out
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel {}x{} exceeds padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            k_out,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    #[inline]
    pub fn in_stride(&self) -> usize {
        self.c_in * self.h * self.w
    }

    #[inline]
    pub fn out_stride(&self) -> usize {
        self.k_out * self.oh * self.ow
    }

    #[inline]
    pub fn cols_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    #[inline]
    pub fn cols_len(&self) -> usize {
        self.cols_rows() * self.oh * self.ow
    }
}

/// Unfolds one CHW sample into `cols[row][col]`, row = (c, ki, kj) and
/// col = (oy, ox), row-major.
fn im2col<F: Scalar>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let l = g.oh * g.ow;
    for v in cols.iter_mut() {
        *v = F::zero();
    }
    for c in 0..g.c_in {
        let x_c = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out_row = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let x_row = &x_c[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let base = oy * g.ow;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            out_row[base + ox] = x_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds column gradients back into one CHW sample gradient.
fn col2im_add<F: Scalar>(g: &ConvGeom, dcols: &[F], dx: &mut [F]) {
    let l = g.oh * g.ow;
    for c in 0..g.c_in {
        let dx_c = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let col_row = &dcols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = oy * g.ow;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let idx = iy as usize * g.w + ix as usize;
                            dx_c[idx] = dx_c[idx] + col_row[base + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Scalar>(
    g: &ConvGeom,
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    jobs: usize,
) -> Tensor<F> {
    let mut out = Tensor::zeros(vec![g.n, g.k_out, g.oh, g.ow]);
    let l = g.oh * g.ow;
    let rows = g.cols_rows();
    let in_stride = g.in_stride();
    let out_stride = g.out_stride();
    let w = weight.data();
    let b = bias.data();
    let xs = x.data();

    let work = |cols: &mut Vec<F>, i: usize, out_n: &mut [F]| {
        im2col(g, &xs[i * in_stride..(i + 1) * in_stride], cols);
        // out_n[K x L] = weight[K x rows] @ cols[rows x L]
        F::gemm(
            g.k_out,
            rows,
            l,
            F::one(),
            w,
            rows as isize,
            1,
            cols,
            l as isize,
            1,
            F::zero(),
            out_n,
            l as isize,
            1,
        );
        for k in 0..g.k_out {
            let bk = b[k];
            for v in &mut out_n[k * l..(k + 1) * l] {
                *v = *v + bk;
            }
        }
    };

    if jobs > 1 {
        out.data_mut()
            .par_chunks_mut(out_stride)
            .enumerate()
            .for_each_init(
                || vec![F::zero(); g.cols_len()],
                |cols, (i, out_n)| work(cols, i, out_n),
            );
    } else {
        let mut cols = vec![F::zero(); g.cols_len()];
        for (i, out_n) in out.data_mut().chunks_mut(out_stride).enumerate() {
            work(&mut cols, i, out_n);
        }
    }
    out
}

pub(crate) struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw: Vec<F>,
    pub db: Vec<F>,
}

/// Backward pass for a conv2d batch. `dx` is computed only when requested.
/// Weight/bias gradients are reduced over fixed sample chunks in order.
pub(crate) fn conv2d_backward<F: Scalar>(
    g: &ConvGeom,
    x: &Tensor<F>,
    weight: &Tensor<F>,
    dout: &[F],
    need_dx: bool,
    jobs: usize,
) -> ConvGrads<F> {
    let l = g.oh * g.ow;
    let rows = g.cols_rows();
    let in_stride = g.in_stride();
    let out_stride = g.out_stride();
    let w = weight.data();
    let xs = x.data();
    let w_len = weight.numel();

    let mut dx_buf = if need_dx {
        vec![F::zero(); g.n * in_stride]
    } else {
        Vec::new()
    };

    // Pair each sample-chunk range with its disjoint slice of dx.
    let ranges = chunk_ranges(g.n, SAMPLE_CHUNK);
    let dx_pieces: Vec<&mut [F]> = if need_dx {
        dx_buf.chunks_mut(SAMPLE_CHUNK * in_stride).collect()
    } else {
        ranges.iter().map(|_| &mut [][..]).collect()
    };
    let items: Vec<(Range<usize>, &mut [F])> = ranges.into_iter().zip(dx_pieces).collect();

    let partials = maybe_par_map(jobs, items, |(range, dx_piece)| {
        let mut cols = vec![F::zero(); g.cols_len()];
        let mut dcols = vec![F::zero(); g.cols_len()];
        let mut dw = vec![F::zero(); w_len];
        let mut db = vec![F::zero(); g.k_out];
        let base = range.start;
        for i in range {
            let dout_n = &dout[i * out_stride..(i + 1) * out_stride];
            im2col(g, &xs[i * in_stride..(i + 1) * in_stride], &mut cols);
            // dw[K x rows] += dout_n[K x L] @ cols^T[L x rows]
            F::gemm(
                g.k_out,
                l,
                rows,
                F::one(),
                dout_n,
                l as isize,
                1,
                &cols,
                1,
                l as isize,
                F::one(),
                &mut dw,
                rows as isize,
                1,
            );
            for k in 0..g.k_out {
                let mut s = F::zero();
                for v in &dout_n[k * l..(k + 1) * l] {
                    s = s + *v;
                }
                db[k] = db[k] + s;
            }
            if need_dx {
                // dcols[rows x L] = w^T[rows x K] @ dout_n[K x L]
                F::gemm(
                    rows,
                    g.k_out,
                    l,
                    F::one(),
                    w,
                    1,
                    rows as isize,
                    dout_n,
                    l as isize,
                    1,
                    F::zero(),
                    &mut dcols,
                    l as isize,
                    1,
                );
                let off = (i - base) * in_stride;
                col2im_add(g, &dcols, &mut dx_piece[off..off + in_stride]);
            }
        }
        (dw, db)
    });

    let mut dw = vec![F::zero(); w_len];
    let mut db = vec![F::zero(); g.k_out];
    for (pw, pb) in partials {
        for (d, p) in dw.iter_mut().zip(pw) {
            *d = *d + p;
        }
        for (d, p) in db.iter_mut().zip(pb) {
            *d = *d + p;
        }
    }

    ConvGrads {
        dx: if need_dx { Some(dx_buf) } else { None },
        dw,
        db,
    }
}

/// Per-channel mean and biased variance over (N, H, W), f64 accumulation.
pub(crate) fn bn_batch_stats<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut s = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for v in &x[base..base + hw] {
                s += v.as_f64();
            }
        }
        mean[ci] = s / m;
    }
    for ci in 0..c {
        let mu = mean[ci];
        let mut s2 = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for v in &x[base..base + hw] {
                let d = v.as_f64() - mu;
                s2 += d * d;
            }
        }
        var[ci] = s2 / m;
    }
    (mean, var)
}

/// y = gamma * (x - mean) * inv_std + beta, per channel of an NCHW tensor.
pub(crate) fn bn_forward<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[F],
    inv_std: &[F],
    gamma: &[F],
    beta: &[F],
) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, inv, ga, be) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for i in base..base + hw {
                out[i] = ga * (x[i] - mu) * inv + be;
            }
        }
    }
    out
}

pub(crate) struct BnGrads<F> {
    pub dx: Vec<F>,
    pub dgamma: Vec<F>,
    pub dbeta: Vec<F>,
}

/// Backward for batchnorm. In train mode the batch statistics depend on x,
/// which adds the two mean-removal terms; in eval mode the statistics are
/// constants.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward<F: Scalar>(
    x: &[F],
    dy: &[F],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[F],
    inv_std: &[F],
    gamma: &[F],
    train: bool,
) -> BnGrads<F> {
    let m = (n * hw) as f64;
    let mut dx = vec![F::zero(); x.len()];
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for ci in 0..c {
        let mu = mean[ci].as_f64();
        let inv = inv_std[ci].as_f64();
        let ga = gamma[ci].as_f64();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                let d = dy[i].as_f64();
                sum_dy += d;
                sum_dy_xhat += d * (x[i].as_f64() - mu) * inv;
            }
        }
        dgamma[ci] = F::from_f64(sum_dy_xhat);
        dbeta[ci] = F::from_f64(sum_dy);
        if train {
            let k1 = sum_dy / m;
            let k2 = sum_dy_xhat / m;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    let xhat = (x[i].as_f64() - mu) * inv;
                    let d = dy[i].as_f64();
                    dx[i] = F::from_f64(ga * inv * (d - k1 - xhat * k2));
                }
            }
        } else {
            let scale = ga * inv;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    dx[i] = F::from_f64(dy[i].as_f64() * scale);
                }
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}
