//! Arithmetic, movement, and reduction operations on [`Tensor`].
//!
//! Every op validates its inputs, computes the forward result eagerly, and
//! registers a VJP closure for the backward pass. Binary arithmetic follows
//! numpy broadcasting; the corresponding VJPs sum gradients back down over
//! the broadcast dimensions.

use super::shape::{broadcast_shapes, expand, reduce, strides_for};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<T: Scalar> Tensor<T> {
    // ------------------------------------------------------------------
    // Elementwise arithmetic (broadcasting)
    // ------------------------------------------------------------------

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes("add", self.shape(), rhs.shape())?;
        let a = expand(self.data(), self.shape(), &out_shape);
        let b = expand(rhs.data(), rhs.shape(), &out_shape);
        let data = a.iter().zip(&b).map(|(x, y)| *x + *y).collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), rhs.clone()],
            |ctx| {
                ctx.parents
                    .iter()
                    .map(|p| Some(reduce(ctx.grad, ctx.out_shape, p.shape())))
                    .collect()
            },
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes("sub", self.shape(), rhs.shape())?;
        let a = expand(self.data(), self.shape(), &out_shape);
        let b = expand(rhs.data(), rhs.shape(), &out_shape);
        let data = a.iter().zip(&b).map(|(x, y)| *x - *y).collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), rhs.clone()],
            |ctx| {
                let da = reduce(ctx.grad, ctx.out_shape, ctx.parents[0].shape());
                let neg: Vec<T> = ctx.grad.iter().map(|g| -*g).collect();
                let db = reduce(&neg, ctx.out_shape, ctx.parents[1].shape());
                vec![Some(da), Some(db)]
            },
        ))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes("mul", self.shape(), rhs.shape())?;
        let a = expand(self.data(), self.shape(), &out_shape);
        let b = expand(rhs.data(), rhs.shape(), &out_shape);
        let data = a.iter().zip(&b).map(|(x, y)| *x * *y).collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), rhs.clone()],
            |ctx| {
                let a = expand(ctx.parents[0].data(), ctx.parents[0].shape(), ctx.out_shape);
                let b = expand(ctx.parents[1].data(), ctx.parents[1].shape(), ctx.out_shape);
                let ga: Vec<T> = ctx.grad.iter().zip(&b).map(|(g, y)| *g * *y).collect();
                let gb: Vec<T> = ctx.grad.iter().zip(&a).map(|(g, x)| *g * *x).collect();
                vec![
                    Some(reduce(&ga, ctx.out_shape, ctx.parents[0].shape())),
                    Some(reduce(&gb, ctx.out_shape, ctx.parents[1].shape())),
                ]
            },
        ))
    }

    pub fn neg_t(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| -*v).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.iter().map(|g| -*g).collect())]
        })
    }

    /// Elementwise absolute value. The subgradient at 0 is taken as 0.
    pub fn abs_t(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| v.abs()).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |ctx| {
            let x = ctx.parents[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(x)
                .map(|(g, v)| {
                    if *v > T::zero() {
                        *g
                    } else if *v < T::zero() {
                        -*g
                    } else {
                        T::zero()
                    }
                })
                .collect();
            vec![Some(g)]
        })
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|v| *v * c).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |ctx| vec![Some(ctx.grad.iter().map(|g| *g * c).collect())],
        )
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|v| *v + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    // ------------------------------------------------------------------
    // Matrix multiplication
    // ------------------------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// Leading (batch) dimensions must match exactly.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() < 2
            || rs.len() < 2
            || ls.len() != rs.len()
            || ls[..ls.len() - 2] != rs[..rs.len() - 2]
        {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k2, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let batch: usize = ls[..ls.len() - 2].iter().product();
        let data = bmm(self.data(), rhs.data(), batch, m, k, n);
        let mut out_shape = ls[..ls.len() - 2].to_vec();
        out_shape.extend([m, n]);
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), rhs.clone()],
            move |ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                // dA = g . B^T  ;  dB = A^T . g
                let bt = transpose_last2(b, batch, k, n);
                let at = transpose_last2(a, batch, m, k);
                let da = bmm(ctx.grad, &bt, batch, m, n, k);
                let db = bmm(&at, ctx.grad, batch, k, m, n);
                vec![Some(da), Some(db)]
            },
        ))
    }

    // ------------------------------------------------------------------
    // Movement
    // ------------------------------------------------------------------

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::contract(
                "reshape",
                format!(
                    "cannot view {:?} ({} elements) as {:?} ({})",
                    self.shape(),
                    self.numel(),
                    new_shape,
                    numel
                ),
            ));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            new_shape.to_vec(),
            vec![self.clone()],
            |ctx| vec![Some(ctx.grad.to_vec())],
        ))
    }

    /// Reorder dimensions: `out.shape[i] = self.shape[axes[i]]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let ndim = self.ndim();
        let mut seen = vec![false; ndim];
        if axes.len() != ndim
            || axes
                .iter()
                .any(|&a| a >= ndim || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::contract(
                "permute",
                format!("axes {:?} is not a permutation of 0..{}", axes, ndim),
            ));
        }
        let (data, out_shape) = permute_data(self.data(), self.shape(), axes);
        let axes_owned = axes.to_vec();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            move |ctx| {
                let mut inverse = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inverse[a] = i;
                }
                let (g, _) = permute_data(ctx.grad, ctx.out_shape, &inverse);
                vec![Some(g)]
            },
        ))
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(Error::contract(
                "narrow",
                format!("axis {} out of range for shape {:?}", axis, self.shape()),
            ));
        }
        let extent = self.shape()[axis];
        if start + len > extent {
            return Err(Error::contract(
                "narrow",
                format!(
                    "range {}..{} exceeds extent {} on axis {}",
                    start,
                    start + len,
                    extent,
                    axis
                ),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            move |ctx| {
                let mut g = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&ctx.grad[src..src + len * inner]);
                }
                vec![Some(g)]
            },
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat", "no tensors given"))?;
        if axis >= first.ndim() {
            return Err(Error::contract(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first.shape()),
            ));
        }
        for p in parts {
            if p.ndim() != first.ndim()
                || p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                let base = o * e * inner;
                data.extend_from_slice(&p.data()[base..base + e * inner]);
            }
        }
        Ok(Tensor::from_op(
            data,
            out_shape,
            parts.to_vec(),
            move |ctx| {
                let mut grads: Vec<Vec<T>> = extents
                    .iter()
                    .map(|&e| vec![T::zero(); outer * e * inner])
                    .collect();
                let mut src = 0usize;
                for o in 0..outer {
                    for (gi, &e) in grads.iter_mut().zip(&extents) {
                        let dst = o * e * inner;
                        gi[dst..dst + e * inner].copy_from_slice(&ctx.grad[src..src + e * inner]);
                        src += e * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            },
        ))
    }

    /// Reverse element order along `axis` (used for the backward scan
    /// direction of the bidirectional Mamba).
    pub fn reverse(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(Error::contract(
                "reverse",
                format!("axis {} out of range for shape {:?}", axis, self.shape()),
            ));
        }
        let data = reverse_data(self.data(), self.shape(), axis);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |ctx| vec![Some(reverse_data(ctx.grad, ctx.out_shape, axis))],
        ))
    }

    // ------------------------------------------------------------------
    // Reductions
    // ------------------------------------------------------------------

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], Vec::new(), vec![self.clone()], |ctx| {
            vec![Some(vec![ctx.grad[0]; ctx.parents[0].numel()])]
        })
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        if self.numel() == 0 {
            return Err(Error::contract("mean", "mean of an empty tensor"));
        }
        let n = T::from_c(self.numel() as f64);
        let s: T = self.data().iter().copied().sum();
        Ok(Tensor::from_op(
            vec![s / n],
            Vec::new(),
            vec![self.clone()],
            move |ctx| vec![Some(vec![ctx.grad[0] / n; ctx.parents[0].numel()])],
        ))
    }
}

// ----------------------------------------------------------------------
// Raw kernels shared by forward and backward paths
// ----------------------------------------------------------------------

/// Plain batched matmul on contiguous buffers.
fn bmm<T: Scalar>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let ab = &a[bi * m * k..][..m * k];
        let bb = &b[bi * k * n..][..k * n];
        let ob = &mut out[bi * m * n..][..m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ab[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &bb[p * n..][..n];
                let orow = &mut ob[i * n..][..n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * *bv;
                }
            }
        }
    }
    out
}

fn transpose_last2<T: Scalar>(data: &[T], batch: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for bi in 0..batch {
        let src = &data[bi * r * c..][..r * c];
        let dst = &mut out[bi * r * c..][..r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_for(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); numel];
    if numel == 0 {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn reverse_data<T: Scalar>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let extent = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for e in 0..extent {
            let src = (o * extent + e) * inner;
            let dst = (o * extent + (extent - 1 - e)) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}
