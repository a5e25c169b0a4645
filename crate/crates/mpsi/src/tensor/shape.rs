//! Shape arithmetic: strides, broadcasting, and index mapping.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major strides for `shape`. A dimension of extent 1 still gets its
/// natural stride; zero-extent dimensions yield zero total elements.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes: align on the right, each pair of
/// extents must be equal or one of them 1.
pub fn broadcast_shapes(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Vec<usize>> {
    let ndim = lhs.len().max(rhs.len());
    let mut out = vec![0; ndim];
    for (i, slot) in out.iter_mut().enumerate() {
        let a = padded_dim(lhs, ndim, i);
        let b = padded_dim(rhs, ndim, i);
        *slot = if a == b || b == 1 {
            a
        } else if a == 1 {
            b
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Extent at position `i` of `shape` left-padded with 1s to `ndim` dims.
fn padded_dim(shape: &[usize], ndim: usize, i: usize) -> usize {
    let offset = ndim - shape.len();
    if i < offset {
        1
    } else {
        shape[i - offset]
    }
}

/// Materialize `data` (of shape `from`) broadcast up to shape `to`.
/// `from` must already be broadcast-compatible with `to`.
pub fn expand<T: Scalar>(data: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return data.to_vec();
    }
    let numel: usize = to.iter().product();
    let mut out = vec![T::zero(); numel];
    let src_strides = broadcast_strides(from, to);
    let mut idx = vec![0usize; to.len()];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        // Odometer increment with incremental source index updates.
        for ax in (0..to.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < to[ax] {
                break;
            }
            src -= src_strides[ax] * to[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sum `data` (of shape `from`) down to shape `to`, inverting a broadcast.
/// This is the VJP of [`expand`].
pub fn reduce<T: Scalar>(data: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return data.to_vec();
    }
    let numel: usize = to.iter().product();
    let mut out = vec![T::zero(); numel];
    let dst_strides = broadcast_strides(to, from);
    let mut idx = vec![0usize; from.len()];
    let mut dst = 0usize;
    for v in data {
        out[dst] += *v;
        for ax in (0..from.len()).rev() {
            idx[ax] += 1;
            dst += dst_strides[ax];
            if idx[ax] < from[ax] {
                break;
            }
            dst -= dst_strides[ax] * from[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Strides into a tensor of shape `small` while iterating a tensor of shape
/// `big` (right-aligned; broadcast dimensions get stride 0).
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let small_strides = strides_for(small);
    let offset = big.len() - small.len();
    let mut out = vec![0usize; big.len()];
    for (i, slot) in out.iter_mut().enumerate().skip(offset) {
        let s = i - offset;
        *slot = if small[s] == 1 { 0 } else { small_strides[s] };
    }
    out
}
