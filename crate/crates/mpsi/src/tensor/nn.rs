//! Fused neural-network primitives with hand-derived backward passes.
//!
//! These are the building blocks the model layers compose: affine maps over
//! the last axis, layer normalization, 2-d convolution (with groups for the
//! depthwise case), the activation zoo, softmax, sub-pixel shuffling, global
//! average pooling, and reflective spatial padding. Fusing each into a
//! single graph node keeps the autodiff graph small and the backward pass
//! cache-friendly.

use super::{Tensor, VjpCtx};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Affine map over the last axis: `y[.., o] = sum_i x[.., i] * w[o, i] + b[o]`.
///
/// `w` is `[out, in]`; the optional bias is `[out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if x.ndim() == 0 || w.ndim() != 2 {
        return Err(Error::contract(
            "linear",
            format!(
                "need x with >=1 dim and 2-d weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            ),
        ));
    }
    let in_dim = *x.shape().last().expect("ndim >= 1");
    let (out_dim, w_in) = (w.shape()[0], w.shape()[1]);
    if w_in != in_dim {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if let Some(b) = b {
        if b.shape() != [out_dim] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: vec![out_dim],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let rows = x.numel().checked_div(in_dim).unwrap_or(0);
    let mut data = vec![T::zero(); rows * out_dim];
    {
        let xd = x.data();
        let wd = w.data();
        for r in 0..rows {
            let xrow = &xd[r * in_dim..][..in_dim];
            let orow = &mut data[r * out_dim..][..out_dim];
            if let Some(b) = b {
                orow.copy_from_slice(b.data());
            }
            for (o, slot) in orow.iter_mut().enumerate() {
                let wrow = &wd[o * in_dim..][..in_dim];
                let mut acc = *slot;
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += *xv * *wv;
                }
                *slot = acc;
            }
        }
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().expect("ndim >= 1") = out_dim;

    let mut parents = vec![x.clone(), w.clone()];
    let has_bias = b.is_some();
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        data,
        out_shape,
        parents,
        move |ctx: &VjpCtx<'_, T>| {
            let xd = ctx.parents[0].data();
            let wd = ctx.parents[1].data();
            let g = ctx.grad;
            let mut dx = vec![T::zero(); xd.len()];
            let mut dw = vec![T::zero(); wd.len()];
            let mut db = vec![T::zero(); if has_bias { out_dim } else { 0 }];
            for r in 0..rows {
                let grow = &g[r * out_dim..][..out_dim];
                let xrow = &xd[r * in_dim..][..in_dim];
                let dxrow = &mut dx[r * in_dim..][..in_dim];
                for (o, gv) in grow.iter().enumerate() {
                    if has_bias {
                        db[o] += *gv;
                    }
                    let wrow = &wd[o * in_dim..][..in_dim];
                    let dwrow = &mut dw[o * in_dim..][..in_dim];
                    for i in 0..in_dim {
                        dxrow[i] += *gv * wrow[i];
                        dwrow[i] += *gv * xrow[i];
                    }
                }
            }
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                grads.push(Some(db));
            }
            grads
        },
    ))
}

/// Layer normalization over the last axis with learned scale and shift.
///
/// Uses the population variance (divide by C, not C-1). With `eps` small
/// enough the output of each row has mean 0 and variance 1 before the
/// affine part is applied.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if x.ndim() == 0 {
        return Err(Error::contract("layer_norm", "input must have >= 1 dim"));
    }
    let c = *x.shape().last().expect("ndim >= 1");
    if c == 0 {
        return Err(Error::contract("layer_norm", "normalized axis is empty"));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / c;
    let cf = T::from_c(c as f64);
    let mut data = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); rows];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for r in 0..rows {
            let row = &xd[r * c..][..c];
            let mu = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() / cf;
            let inv = (var + eps).sqrt().recip();
            inv_std[r] = inv;
            for i in 0..c {
                let xh = (row[i] - mu) * inv;
                xhat[r * c + i] = xh;
                data[r * c + i] = gd[i] * xh + bd[i];
            }
        }
    }
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |ctx| {
            let gd = ctx.parents[1].data();
            let g = ctx.grad;
            let mut dx = vec![T::zero(); ctx.parents[0].numel()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for r in 0..rows {
                let grow = &g[r * c..][..c];
                let xh = &xhat[r * c..][..c];
                let inv = inv_std[r];
                let mut m1 = T::zero(); // mean of dxhat
                let mut m2 = T::zero(); // mean of dxhat * xhat
                for i in 0..c {
                    let dxh = grow[i] * gd[i];
                    m1 += dxh;
                    m2 += dxh * xh[i];
                    dgamma[i] += grow[i] * xh[i];
                    dbeta[i] += grow[i];
                }
                m1 /= cf;
                m2 /= cf;
                for i in 0..c {
                    let dxh = grow[i] * gd[i];
                    dx[r * c + i] = inv * (dxh - m1 - xh[i] * m2);
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        },
    ))
}

/// Per-side zero padding for [`conv2d`]: (top, bottom, left, right).
pub type Pad4 = (usize, usize, usize, usize);

/// 2-d cross-correlation, stride 1, with grouped channels.
///
/// `x` is `[B, C_in, H, W]`, `k` is `[C_out, C_in/groups, kh, kw]`. Setting
/// `groups == C_in` (with `C_out == C_in`) gives a depthwise convolution.
/// The padded input must be at least as large as the kernel.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: Pad4,
    groups: usize,
) -> Result<Tensor<T>> {
    if x.ndim() != 4 || k.ndim() != 4 {
        return Err(Error::contract(
            "conv2d",
            format!(
                "need 4-d input and kernel, got {:?} and {:?}",
                x.shape(),
                k.shape()
            ),
        ));
    }
    let (bsz, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, ck, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::contract(
            "conv2d",
            format!(
                "groups {} must divide C_in {} and C_out {}",
                groups, cin, cout
            ),
        ));
    }
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    if ck != cin_g {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let (pt, pb, pl, pr) = pad;
    let hp = h + pt + pb;
    let wp = w + pl + pr;
    if hp < kh || wp < kw {
        return Err(Error::contract(
            "conv2d",
            format!(
                "kernel {}x{} larger than padded input {}x{}",
                kh, kw, hp, wp
            ),
        ));
    }
    let oh = hp - kh + 1;
    let ow = wp - kw + 1;

    let mut data = vec![T::zero(); bsz * cout * oh * ow];
    {
        let xd = x.data();
        let kd = k.data();
        for bi in 0..bsz {
            for oc in 0..cout {
                let grp = oc / cout_g;
                let bias_v = bias.map_or(T::zero(), |b| b.data()[oc]);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias_v;
                        for icl in 0..cin_g {
                            let ic = grp * cin_g + icl;
                            for ky in 0..kh {
                                let iy = (oy + ky) as isize - pt as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox + kx) as isize - pl as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    acc += xd
                                        [((bi * cin + ic) * h + iy as usize) * w + ix as usize]
                                        * kd[((oc * cin_g + icl) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        data[((bi * cout + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
    }
    let out_shape = vec![bsz, cout, oh, ow];
    let mut parents = vec![x.clone(), k.clone()];
    let has_bias = bias.is_some();
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(data, out_shape, parents, move |ctx| {
        let xd = ctx.parents[0].data();
        let kd = ctx.parents[1].data();
        let g = ctx.grad;
        let mut dx = vec![T::zero(); xd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut db = vec![T::zero(); if has_bias { cout } else { 0 }];
        for bi in 0..bsz {
            for oc in 0..cout {
                let grp = oc / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[((bi * cout + oc) * oh + oy) * ow + ox];
                        if has_bias {
                            db[oc] += gv;
                        }
                        if gv == T::zero() {
                            continue;
                        }
                        for icl in 0..cin_g {
                            let ic = grp * cin_g + icl;
                            for ky in 0..kh {
                                let iy = (oy + ky) as isize - pt as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox + kx) as isize - pl as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    let xi = ((bi * cin + ic) * h + iy as usize) * w + ix as usize;
                                    let ki = ((oc * cin_g + icl) * kh + ky) * kw + kx;
                                    dx[xi] += gv * kd[ki];
                                    dk[ki] += gv * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut grads = vec![Some(dx), Some(dk)];
        if has_bias {
            grads.push(Some(db));
        }
        grads
    }))
}

// ----------------------------------------------------------------------
// Activations
// ----------------------------------------------------------------------

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    (T::one() + (-x).exp()).recip()
}

impl<T: Scalar> Tensor<T> {
    /// SiLU / swish: `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * sigmoid_scalar(v)).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |ctx| {
            let x = ctx.parents[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(x)
                .map(|(g, &v)| {
                    let s = sigmoid_scalar(v);
                    *g * s * (T::one() + v * (T::one() - s))
                })
                .collect();
            vec![Some(g)]
        })
    }

    /// Exact GELU: `x * Phi(x)` with `Phi` the standard normal CDF via erf
    /// (no tanh approximation).
    pub fn gelu(&self) -> Tensor<T> {
        let half = T::from_c(0.5);
        let inv_sqrt2 = T::from_c(std::f64::consts::FRAC_1_SQRT_2);
        let data = self
            .data()
            .iter()
            .map(|&v| v * half * (T::one() + (v * inv_sqrt2).erf()))
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |ctx| {
                let inv_sqrt_2pi = T::from_c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let x = ctx.parents[0].data();
                let g = ctx
                    .grad
                    .iter()
                    .zip(x)
                    .map(|(g, &v)| {
                        let phi_cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let phi_pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        *g * (phi_cdf + v * phi_pdf)
                    })
                    .collect();
                vec![Some(g)]
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |ctx| {
            // d sigma = sigma (1 - sigma): read back from the stored output.
            let y = ctx.out_data;
            let g = ctx
                .grad
                .iter()
                .zip(y)
                .map(|(g, &s)| *g * s * (T::one() - s))
                .collect();
            vec![Some(g)]
        })
    }

    /// `ln(1 + e^x)`, computed in its overflow-safe form
    /// `max(x, 0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&self) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&v| v.max(T::zero()) + (T::one() + (-v.abs()).exp()).ln())
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |ctx| {
            let x = ctx.parents[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(x)
                .map(|(g, &v)| *g * sigmoid_scalar(v))
                .collect();
            vec![Some(g)]
        })
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        if self.ndim() == 0 {
            return Err(Error::contract("softmax", "input must have >= 1 dim"));
        }
        let c = *self.shape().last().expect("ndim >= 1");
        if c == 0 {
            return Err(Error::contract("softmax", "softmax axis is empty"));
        }
        let rows = self.numel() / c;
        let mut data = vec![T::zero(); self.numel()];
        for r in 0..rows {
            let row = &self.data()[r * c..][..c];
            let m = row.iter().copied().fold(row[0], T::max);
            let mut sum = T::zero();
            for i in 0..c {
                let e = (row[i] - m).exp();
                data[r * c + i] = e;
                sum += e;
            }
            for i in 0..c {
                data[r * c + i] /= sum;
            }
        }
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |ctx| {
                let y = ctx.out_data;
                let g = ctx.grad;
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let yr = &y[r * c..][..c];
                    let gr = &g[r * c..][..c];
                    let dot = yr.iter().zip(gr).map(|(y, g)| *y * *g).sum::<T>();
                    for i in 0..c {
                        dx[r * c + i] = yr[i] * (gr[i] - dot);
                    }
                }
                vec![Some(dx)]
            },
        ))
    }
}

// ----------------------------------------------------------------------
// Spatial rearrangement
// ----------------------------------------------------------------------

/// Sub-pixel upsample: `[B, C r^2, H, W] -> [B, C, rH, rW]`, where output
/// channel `c` at `(r h + dy, r w + dx)` reads input channel
/// `c r^2 + dy r + dx` at `(h, w)`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::contract(
            "pixel_shuffle",
            "input must be [B, C, H, W]",
        ));
    }
    let (bsz, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if r == 0 || cin % (r * r) != 0 {
        return Err(Error::contract(
            "pixel_shuffle",
            format!("channel count {} not divisible by r^2 = {}", cin, r * r),
        ));
    }
    let cout = cin / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut data = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        for bi in 0..bsz {
            for c in 0..cout {
                for dy in 0..r {
                    for dx in 0..r {
                        let ic = c * r * r + dy * r + dx;
                        for y in 0..h {
                            for xx in 0..w {
                                data[((bi * cout + c) * ho + (r * y + dy)) * wo + (r * xx + dx)] =
                                    xd[((bi * cin + ic) * h + y) * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        data,
        vec![bsz, cout, ho, wo],
        vec![x.clone()],
        move |ctx| {
            let mut dx = vec![T::zero(); ctx.parents[0].numel()];
            for bi in 0..bsz {
                for c in 0..cout {
                    for dy in 0..r {
                        for dx_ in 0..r {
                            let ic = c * r * r + dy * r + dx_;
                            for y in 0..h {
                                for xx in 0..w {
                                    dx[((bi * cin + ic) * h + y) * w + xx] =
                                        ctx.grad[((bi * cout + c) * ho + (r * y + dy)) * wo
                                            + (r * xx + dx_)];
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Inverse of [`pixel_shuffle`]: `[B, C, rH, rW] -> [B, C r^2, H, W]`.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::contract(
            "pixel_unshuffle",
            "input must be [B, C, H, W]",
        ));
    }
    let (bsz, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::contract(
            "pixel_unshuffle",
            format!("spatial extent {}x{} not divisible by r = {}", h, w, r),
        ));
    }
    let cout = cin * r * r;
    let (ho, wo) = (h / r, w / r);
    let mut data = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        for bi in 0..bsz {
            for c in 0..cin {
                for dy in 0..r {
                    for dx in 0..r {
                        let oc = c * r * r + dy * r + dx;
                        for y in 0..ho {
                            for xx in 0..wo {
                                data[((bi * cout + oc) * ho + y) * wo + xx] =
                                    xd[((bi * cin + c) * h + (r * y + dy)) * w + (r * xx + dx)];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        data,
        vec![bsz, cout, ho, wo],
        vec![x.clone()],
        move |ctx| {
            let mut dx = vec![T::zero(); ctx.parents[0].numel()];
            for bi in 0..bsz {
                for c in 0..cin {
                    for dy in 0..r {
                        for dx_ in 0..r {
                            let oc = c * r * r + dy * r + dx_;
                            for y in 0..ho {
                                for xx in 0..wo {
                                    dx[((bi * cin + c) * h + (r * y + dy)) * w + (r * xx + dx_)] =
                                        ctx.grad[((bi * cout + oc) * ho + y) * wo + xx];
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Global average pool `[B, C, H, W] -> [B, C, 1]`.
pub fn adaptive_avg_pool_to_1<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::contract("avg_pool", "input must be [B, C, H, W]"));
    }
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    if hw == 0 {
        return Err(Error::contract(
            "avg_pool",
            "cannot pool an empty spatial grid",
        ));
    }
    let scale = T::from_c(hw as f64).recip();
    let mut data = vec![T::zero(); bsz * c];
    for (bc, slot) in data.iter_mut().enumerate() {
        let block = &x.data()[bc * hw..][..hw];
        *slot = block.iter().copied().sum::<T>() * scale;
    }
    Ok(Tensor::from_op(
        data,
        vec![bsz, c, 1],
        vec![x.clone()],
        move |ctx| {
            let mut dx = vec![T::zero(); ctx.parents[0].numel()];
            for bc in 0..bsz * c {
                let gv = ctx.grad[bc] * scale;
                for slot in &mut dx[bc * hw..][..hw] {
                    *slot = gv;
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Index of the mirror image of `i` in `0..n` (reflection about the last
/// element, which is not repeated). Folds arbitrarily far overruns.
fn mirror_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pad the bottom and right of a `[B, H, W, C]` tensor. Used to
/// round spatial extents up to a multiple of the attention window.
pub fn reflect_pad_bhwc<T: Scalar>(x: &Tensor<T>, pad_h: usize, pad_w: usize) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::contract("reflect_pad", "input must be [B, H, W, C]"));
    }
    let (bsz, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h == 0 || w == 0 {
        return Err(Error::contract("reflect_pad", "cannot pad an empty image"));
    }
    let (hp, wp) = (h + pad_h, w + pad_w);
    let mut data = vec![T::zero(); bsz * hp * wp * c];
    {
        let xd = x.data();
        for bi in 0..bsz {
            for y in 0..hp {
                let sy = mirror_index(y, h);
                for xx in 0..wp {
                    let sx = mirror_index(xx, w);
                    let src = ((bi * h + sy) * w + sx) * c;
                    let dst = ((bi * hp + y) * wp + xx) * c;
                    data[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
    }
    Ok(Tensor::from_op(
        data,
        vec![bsz, hp, wp, c],
        vec![x.clone()],
        move |ctx| {
            let mut dx = vec![T::zero(); ctx.parents[0].numel()];
            for bi in 0..bsz {
                for y in 0..hp {
                    let sy = mirror_index(y, h);
                    for xx in 0..wp {
                        let sx = mirror_index(xx, w);
                        let src = ((bi * h + sy) * w + sx) * c;
                        let dst = ((bi * hp + y) * wp + xx) * c;
                        for i in 0..c {
                            dx[src + i] += ctx.grad[dst + i];
                        }
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}
