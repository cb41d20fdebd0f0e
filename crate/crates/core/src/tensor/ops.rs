//! Forward and backward kernels.
//!
//! Convolutions unfold their input into a patch matrix and split the matrix
//! products across output rows. Every output element is accumulated in a
//! fixed index order, so results do not depend on the worker count.

use rayon::prelude::*;

use super::{shape_err, Scalar, Tensor, TensorError};

/// Output extent of a window of size `kernel` sliding over `input`.
pub fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + offset - padding`
/// lands inside `[0, input)`.
fn valid_range(out_len: usize, input: usize, offset: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > offset {
        (padding - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if input + padding > offset {
        ((input + padding - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    t: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

fn conv_geom<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, ConvGeom), TensorError> {
    let (n, c, h, w) = x.dims4("conv2d")?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(shape_err("conv2d", "weight (t, u, k, k)", ws));
    }
    if ws[1] != c {
        return Err(shape_err(
            "conv2d",
            format!("input with {} channels to match weight {:?}", ws[1], ws),
            x.shape(),
        ));
    }
    let k = ws[2];
    let (ho, wo) = match (out_extent(h, k, stride, padding), out_extent(w, k, stride, padding)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(shape_err(
                "conv2d",
                format!("spatial extent >= {k} after padding {padding}"),
                x.shape(),
            ))
        }
    };
    Ok((
        n,
        ConvGeom {
            c,
            h,
            w,
            t: ws[0],
            k,
            ho,
            wo,
            stride,
            padding,
        },
    ))
}

/// Upper bound on the number of elements in one unfolded patch matrix; the
/// batch is processed in sample chunks that stay below it.
const COLS_BUDGET: usize = 1 << 22;

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn samples_per_chunk(&self) -> usize {
        (COLS_BUDGET / (self.rows() * self.ho * self.wo).max(1)).max(1)
    }

    /// Unfolds `nb` samples into a `(c * k * k, nb * ho * wo)` patch matrix.
    fn im2col<T: Scalar>(&self, xs: &[T], nb: usize) -> Vec<T> {
        let (in_plane, out_plane) = (self.h * self.w, self.ho * self.wo);
        let cols_len = nb * out_plane;
        let mut cols = vec![T::zero(); self.rows() * cols_len];
        for ic in 0..self.c {
            for kh in 0..self.k {
                let (oh_lo, oh_hi) = valid_range(self.ho, self.h, kh, self.stride, self.padding);
                for kw in 0..self.k {
                    let (ow_lo, ow_hi) = valid_range(self.wo, self.w, kw, self.stride, self.padding);
                    let r = (ic * self.k + kh) * self.k + kw;
                    let row = &mut cols[r * cols_len..(r + 1) * cols_len];
                    for s in 0..nb {
                        let xp = &xs[(s * self.c + ic) * in_plane..(s * self.c + ic + 1) * in_plane];
                        let dst = &mut row[s * out_plane..(s + 1) * out_plane];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * self.stride + kh - self.padding;
                            let xrow = &xp[ih * self.w..(ih + 1) * self.w];
                            let drow = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                            for ow in ow_lo..ow_hi {
                                drow[ow] = xrow[ow * self.stride + kw - self.padding];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adds a patch-matrix gradient back onto the `nb` input samples.
    fn col2im_add<T: Scalar>(&self, cols: &[T], nb: usize, gxs: &mut [T]) {
        let (in_plane, out_plane) = (self.h * self.w, self.ho * self.wo);
        let cols_len = nb * out_plane;
        for s in 0..nb {
            for ic in 0..self.c {
                let gxp = &mut gxs[(s * self.c + ic) * in_plane..(s * self.c + ic + 1) * in_plane];
                for kh in 0..self.k {
                    let (oh_lo, oh_hi) = valid_range(self.ho, self.h, kh, self.stride, self.padding);
                    for kw in 0..self.k {
                        let (ow_lo, ow_hi) = valid_range(self.wo, self.w, kw, self.stride, self.padding);
                        let r = (ic * self.k + kh) * self.k + kw;
                        let src = &cols[r * cols_len + s * out_plane..r * cols_len + (s + 1) * out_plane];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * self.stride + kh - self.padding;
                            let grow = &mut gxp[ih * self.w..(ih + 1) * self.w];
                            let srow = &src[oh * self.wo..(oh + 1) * self.wo];
                            for ow in ow_lo..ow_hi {
                                grow[ow * self.stride + kw - self.padding] += srow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    for (i, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        acc[i] += x * y;
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    s
}

fn axpy<T: Scalar>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Cross-correlation with zero padding. `x`: `(n, u, h, w)`, `weight`: `(t, u, k, k)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, g) = conv_geom(x, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.t] {
            return Err(shape_err("conv2d", format!("bias of shape [{}]", g.t), b.shape()));
        }
    }
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let mut out = vec![T::zero(); n * g.t * out_plane];
    if out.is_empty() {
        return Tensor::new(vec![n, g.t, g.ho, g.wo], out);
    }
    let rows = g.rows();
    let wd = weight.data();
    let chunk = g.samples_per_chunk();
    for s0 in (0..n).step_by(chunk) {
        let nb = chunk.min(n - s0);
        let cols = g.im2col(&x.data()[s0 * g.c * in_plane..(s0 + nb) * g.c * in_plane], nb);
        let len = nb * out_plane;
        let mut res = vec![T::zero(); g.t * len];
        res.par_chunks_mut(len).enumerate().for_each(|(oc, row)| {
            row.fill(bias.map_or(T::zero(), |b| b.data()[oc]));
            for r in 0..rows {
                axpy(row, wd[oc * rows + r], &cols[r * len..(r + 1) * len]);
            }
        });
        for s in 0..nb {
            for oc in 0..g.t {
                let dst = ((s0 + s) * g.t + oc) * out_plane;
                out[dst..dst + out_plane].copy_from_slice(&res[oc * len + s * out_plane..oc * len + (s + 1) * out_plane]);
            }
        }
    }
    Tensor::new(vec![n, g.t, g.ho, g.wo], out)
}

pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>, TensorError> {
    let (n, g) = conv_geom(x, weight, stride, padding)?;
    if grad_out.shape() != [n, g.t, g.ho, g.wo] {
        return Err(shape_err(
            "conv2d_backward",
            format!("gradient of shape {:?}", [n, g.t, g.ho, g.wo]),
            grad_out.shape(),
        ));
    }
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let rows = g.rows();
    let wd = weight.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wd.len()];
    let mut gb = vec![T::zero(); g.t];
    let chunk = g.samples_per_chunk();
    for s0 in (0..n).step_by(chunk) {
        let nb = chunk.min(n - s0);
        let len = nb * out_plane;
        if len == 0 {
            continue;
        }
        let cols = g.im2col(&x.data()[s0 * g.c * in_plane..(s0 + nb) * g.c * in_plane], nb);
        let mut gres = vec![T::zero(); g.t * len];
        for s in 0..nb {
            for oc in 0..g.t {
                let src = ((s0 + s) * g.t + oc) * out_plane;
                gres[oc * len + s * out_plane..oc * len + (s + 1) * out_plane]
                    .copy_from_slice(&grad_out.data()[src..src + out_plane]);
            }
        }
        gw.par_chunks_mut(rows).enumerate().for_each(|(oc, gwrow)| {
            let grow = &gres[oc * len..(oc + 1) * len];
            for (r, v) in gwrow.iter_mut().enumerate() {
                *v += dot(grow, &cols[r * len..(r + 1) * len]);
            }
        });
        for (oc, b) in gb.iter_mut().enumerate() {
            for &v in &gres[oc * len..(oc + 1) * len] {
                *b += v;
            }
        }
        let mut gcols = vec![T::zero(); rows * len];
        gcols.par_chunks_mut(len).enumerate().for_each(|(r, crow)| {
            for oc in 0..g.t {
                axpy(crow, wd[oc * rows + r], &gres[oc * len..(oc + 1) * len]);
            }
        });
        g.col2im_add(&gcols, nb, &mut gx[s0 * g.c * in_plane..(s0 + nb) * g.c * in_plane]);
    }
    Ok(ConvGrads {
        x: Tensor::new(x.shape().to_vec(), gx)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::from_vec(gb),
    })
}

/// `(n, c, inner)` view of a `(n, c, ...)` tensor.
fn channel_layout<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(shape_err(op, "a tensor of rank >= 2 (batch, channels, ...)", s));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

fn check_channel_vec<T: Scalar>(op: &'static str, name: &str, v: &Tensor<T>, c: usize) -> Result<(), TensorError> {
    if v.shape() != [c] {
        return Err(shape_err(op, format!("{name} of length {c}"), v.shape()));
    }
    Ok(())
}

/// Inference batch norm with stored statistics: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, inner) = channel_layout(x, "batchnorm")?;
    for (name, v) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        check_channel_vec("batchnorm", name, v, c)?;
    }
    let inv = inv_std(var, eps)?;
    let mut out = x.data().to_vec();
    for ni in 0..n {
        for ch in 0..c {
            let (gm, bt, mu, is) = (gamma.data()[ch], beta.data()[ch], mean.data()[ch], inv[ch]);
            let base = (ni * c + ch) * inner;
            for v in &mut out[base..base + inner] {
                *v = gm * ((*v - mu) * is) + bt;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn inv_std<T: Scalar>(var: &Tensor<T>, eps: T) -> Result<Vec<T>, TensorError> {
    var.data()
        .iter()
        .map(|&v| {
            let d = v + eps;
            if !d.is_finite() {
                Err(TensorError::NonFinite {
                    op: "batchnorm",
                    value: format!("variance {v}"),
                })
            } else if v < T::zero() || eps < T::zero() || d <= T::zero() {
                Err(TensorError::Invalid {
                    op: "batchnorm",
                    msg: format!("variance {v} with eps {eps} is not a valid positive scale"),
                })
            } else {
                Ok(T::one() / d.sqrt())
            }
        })
        .collect()
}

/// Per-channel statistics of one training-mode batch norm evaluation.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Biased (population) variance used for normalisation.
    pub var: Tensor<T>,
    pub inv_std: Tensor<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

impl<T: Scalar> BatchStats<T> {
    /// Unbiased variance, the value blended into running statistics.
    pub fn unbiased_var(&self) -> Tensor<T> {
        let m = self.count;
        if m < 2 {
            return self.var.clone();
        }
        let f = T::from_usize(m) / T::from_usize(m - 1);
        self.var.map(|v| v * f)
    }
}

/// Training batch norm: normalises with the statistics of `x` itself.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchStats<T>), TensorError> {
    let (n, c, inner) = channel_layout(x, "batchnorm")?;
    check_channel_vec("batchnorm", "gamma", gamma, c)?;
    check_channel_vec("batchnorm", "beta", beta, c)?;
    let count = n * inner;
    if count == 0 {
        return Err(shape_err("batchnorm", "a non-empty batch", x.shape()));
    }
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            let base = (ni * c + ch) * inner;
            for &v in &xd[base..base + inner] {
                s += v;
            }
        }
        let mu = s / T::from_usize(count);
        let mut sq = T::zero();
        for ni in 0..n {
            let base = (ni * c + ch) * inner;
            for &v in &xd[base..base + inner] {
                sq += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = sq / T::from_usize(count);
    }
    let var = Tensor::from_vec(var);
    let inv = Tensor::from_vec(inv_std(&var, eps)?);
    let mean = Tensor::from_vec(mean);
    let out = batchnorm_apply(x, gamma, beta, &mean, &inv, n, c, inner);
    Ok((
        out,
        BatchStats {
            mean,
            var,
            inv_std: inv,
            count,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    inv: &Tensor<T>,
    n: usize,
    c: usize,
    inner: usize,
) -> Tensor<T> {
    let mut out = x.data().to_vec();
    for ni in 0..n {
        for ch in 0..c {
            let (gm, bt, mu, is) = (gamma.data()[ch], beta.data()[ch], mean.data()[ch], inv.data()[ch]);
            let base = (ni * c + ch) * inner;
            for v in &mut out[base..base + inner] {
                *v = gm * ((*v - mu) * is) + bt;
            }
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

pub struct BatchNormGrads<T> {
    pub x: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward of batch norm. With `batch_stats == true` the mean and variance
/// are functions of `x` and their derivatives are included.
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    inv_std: &Tensor<T>,
    grad_out: &Tensor<T>,
    batch_stats: bool,
) -> Result<BatchNormGrads<T>, TensorError> {
    let (n, c, inner) = channel_layout(x, "batchnorm_backward")?;
    if grad_out.shape() != x.shape() {
        return Err(shape_err("batchnorm_backward", format!("gradient shaped {:?}", x.shape()), grad_out.shape()));
    }
    let count = T::from_usize(n * inner);
    let (xd, gd) = (x.data(), grad_out.data());
    let mut gx = vec![T::zero(); x.len()];
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, is, gm) = (mean.data()[ch], inv_std.data()[ch], gamma.data()[ch]);
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for ni in 0..n {
            let base = (ni * c + ch) * inner;
            for i in base..base + inner {
                sg += gd[i];
                sgx += gd[i] * ((xd[i] - mu) * is);
            }
        }
        g_beta[ch] = sg;
        g_gamma[ch] = sgx;
        for ni in 0..n {
            let base = (ni * c + ch) * inner;
            for i in base..base + inner {
                gx[i] = if batch_stats {
                    let xhat = (xd[i] - mu) * is;
                    gm * is / count * (count * gd[i] - sg - xhat * sgx)
                } else {
                    gd[i] * gm * is
                };
            }
        }
    }
    Ok(BatchNormGrads {
        x: Tensor::new(x.shape().to_vec(), gx)?,
        gamma: Tensor::from_vec(g_gamma),
        beta: Tensor::from_vec(g_beta),
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at the kink.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

fn pool_geom<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize), TensorError> {
    let (n, c, h, w) = x.dims4(op)?;
    if kernel == 0 || stride == 0 || 2 * padding > kernel {
        return Err(TensorError::Invalid {
            op,
            msg: format!("kernel {kernel}, stride {stride}, padding {padding} is not a valid window"),
        });
    }
    match (out_extent(h, kernel, stride, padding), out_extent(w, kernel, stride, padding)) {
        (Some(ho), Some(wo)) => Ok((n, c, h, w, ho, wo)),
        _ => Err(shape_err(op, format!("spatial extent >= {kernel} after padding {padding}"), x.shape())),
    }
}

/// Average pooling that always divides by `kernel * kernel`, padded zeros included.
pub fn avgpool2d<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w, ho, wo) = pool_geom("avgpool2d", x, kernel, stride, padding)?;
    let div = T::from_usize(kernel * kernel);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for (p, o) in out.chunks_mut(ho * wo).enumerate() {
        let xp = &xd[p * h * w..(p + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut s = T::zero();
                for kh in 0..kernel {
                    let ih = (oh * stride + kh) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..kernel {
                        let iw = (ow * stride + kw) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        s += xp[ih as usize * w + iw as usize];
                    }
                }
                o[oh * wo + ow] = s / div;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn avgpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let probe = Tensor::<T> {
        shape: input_shape.to_vec(),
        data: Vec::new(),
    };
    let (n, c, h, w) = probe.dims4("avgpool2d_backward")?;
    let ho = out_extent(h, kernel, stride, padding).unwrap_or(0);
    let wo = out_extent(w, kernel, stride, padding).unwrap_or(0);
    if grad_out.shape() != [n, c, ho, wo] {
        return Err(shape_err("avgpool2d_backward", format!("gradient of shape {:?}", [n, c, ho, wo]), grad_out.shape()));
    }
    let div = T::from_usize(kernel * kernel);
    let mut gx = vec![T::zero(); n * c * h * w];
    for (p, gxp) in gx.chunks_mut(h * w).enumerate() {
        let gp = &grad_out.data()[p * ho * wo..(p + 1) * ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let g = gp[oh * wo + ow] / div;
                for kh in 0..kernel {
                    let ih = (oh * stride + kh) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..kernel {
                        let iw = (ow * stride + kw) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        gxp[ih as usize * w + iw as usize] += g;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Max pooling; padded positions never win. Returns the flat input index of
/// each selected element (first maximum on ties).
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let (n, c, h, w, ho, wo) = pool_geom("maxpool2d", x, kernel, stride, padding)?;
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    for p in 0..n * c {
        let base = p * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best: Option<(T, usize)> = None;
                for kh in 0..kernel {
                    let ih = (oh * stride + kh) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..kernel {
                        let iw = (ow * stride + kw) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * w + iw as usize;
                        if best.is_none_or(|(b, _)| xd[idx] > b) {
                            best = Some((xd[idx], idx));
                        }
                    }
                }
                // 2 * padding <= kernel guarantees a non-empty window.
                let (v, i) = best.expect("window contains an input element");
                let o = (p * ho + oh) * wo + ow;
                out[o] = v;
                arg[o] = i;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = vec![T::zero(); input_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx[i] += g;
    }
    Tensor {
        shape: input_shape.to_vec(),
        data: gx,
    }
}

/// `x`: `(n, in)`, `weight`: `(out, in)` → `(n, out)`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>, TensorError> {
    let (n, fin, fout) = linear_dims(x, weight)?;
    if let Some(b) = bias {
        if b.shape() != [fout] {
            return Err(shape_err("linear", format!("bias of shape [{fout}]"), b.shape()));
        }
    }
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![T::zero(); n * fout];
    for ni in 0..n {
        let xr = &xd[ni * fin..(ni + 1) * fin];
        for o in 0..fout {
            let wr = &wd[o * fin..(o + 1) * fin];
            let mut s = bias.map_or(T::zero(), |b| b.data()[o]);
            for (&a, &b) in xr.iter().zip(wr) {
                s += a * b;
            }
            out[ni * fout + o] = s;
        }
    }
    Tensor::new(vec![n, fout], out)
}

fn linear_dims<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize), TensorError> {
    let ws = weight.shape();
    if ws.len() != 2 {
        return Err(shape_err("linear", "weight (out, in)", ws));
    }
    match x.shape() {
        [n, f] if *f == ws[1] => Ok((*n, *f, ws[0])),
        s => Err(shape_err("linear", format!("input (batch, {})", ws[1]), s)),
    }
}

pub struct LinearGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>, TensorError> {
    let (n, fin, fout) = linear_dims(x, weight)?;
    if grad_out.shape() != [n, fout] {
        return Err(shape_err("linear_backward", format!("gradient ({n}, {fout})"), grad_out.shape()));
    }
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    let mut gx = vec![T::zero(); n * fin];
    let mut gw = vec![T::zero(); fout * fin];
    let mut gb = vec![T::zero(); fout];
    for ni in 0..n {
        for o in 0..fout {
            let g = gd[ni * fout + o];
            gb[o] += g;
            for f in 0..fin {
                gx[ni * fin + f] += g * wd[o * fin + f];
                gw[o * fin + f] += g * xd[ni * fin + f];
            }
        }
    }
    Ok(LinearGrads {
        x: Tensor::new(vec![n, fin], gx)?,
        weight: Tensor::new(vec![fout, fin], gw)?,
        bias: Tensor::from_vec(gb),
    })
}

/// Mean cross-entropy of softmax(logits) against class indices.
/// Returns the loss and the softmax probabilities.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>), TensorError> {
    let (n, k) = match logits.shape() {
        [n, k] if *k > 0 => (*n, *k),
        s => return Err(shape_err("softmax_xent", "logits (batch, classes)", s)),
    };
    if labels.len() != n || n == 0 {
        return Err(TensorError::Invalid {
            op: "softmax_xent",
            msg: format!("{} labels for a batch of {n}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::Invalid {
            op: "softmax_xent",
            msg: format!("label {bad} out of range for {k} classes"),
        });
    }
    let mut probs = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for (ni, &label) in labels.iter().enumerate() {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (p, &v) in probs[ni * k..(ni + 1) * k].iter_mut().zip(row) {
            *p = (v - mx).exp();
            z += *p;
        }
        for p in &mut probs[ni * k..(ni + 1) * k] {
            *p /= z;
        }
        loss += z.ln() - (row[label] - mx);
    }
    Ok((loss / T::from_usize(n), Tensor::new(vec![n, k], probs)?))
}

pub fn softmax_xent_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize], grad_loss: T) -> Tensor<T> {
    let k = probs.shape()[1];
    let n = labels.len();
    let scale = grad_loss / T::from_usize(n);
    let mut g = probs.data().to_vec();
    for (ni, &l) in labels.iter().enumerate() {
        g[ni * k + l] -= T::one();
    }
    for v in &mut g {
        *v *= scale;
    }
    Tensor {
        shape: probs.shape().to_vec(),
        data: g,
    }
}
