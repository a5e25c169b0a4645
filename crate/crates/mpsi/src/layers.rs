//! Parameterized layers: thin stateful wrappers over the tensor primitives.
//!
//! Weights start from a truncated normal (std 0.02, clipped at 2 std),
//! biases at zero, and layer-norm at identity — the usual recipe for
//! restoration transformers.

use crate::error::Result;
use crate::param::{ParamBuilder, ParamVisit, Parameter};
use crate::scalar::Scalar;
use crate::tensor::nn::{self, Pad4};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Affine map over the last axis.
#[derive(Debug)]
pub struct Linear<T: Scalar> {
    weight: Parameter<T>,
    bias: Option<Parameter<T>>,
    in_dim: usize,
    out_dim: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            weight: pb.trunc_normal("weight", &[out_dim, in_dim], INIT_STD),
            bias: bias.then(|| pb.zeros("bias", &[out_dim])),
            in_dim,
            out_dim,
        }
    }

    /// Assemble from pre-built parameters (for custom initializations).
    /// `weight` must be `[out, in]` and the bias, if present, `[out]`.
    pub fn from_parts(weight: Parameter<T>, bias: Option<Parameter<T>>) -> Self {
        assert_eq!(weight.shape().len(), 2, "linear weight must be 2-d");
        let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
        if let Some(b) = &bias {
            assert_eq!(b.shape(), [out_dim], "bias shape must match weight rows");
        }
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nn::linear(
            x,
            self.weight.tensor(),
            self.bias.as_ref().map(|b| b.tensor()),
        )
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &Parameter<T> {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Parameter<T>> {
        self.bias.as_ref()
    }
}

impl<T: Scalar> ParamVisit<T> for Linear<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Stride-1 2-d convolution with fixed per-side padding and channel groups.
#[derive(Debug)]
pub struct Conv2d<T: Scalar> {
    weight: Parameter<T>,
    bias: Option<Parameter<T>>,
    pad: Pad4,
    groups: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        pad: Pad4,
        groups: usize,
        bias: bool,
    ) -> Self {
        assert!(groups > 0 && in_ch.is_multiple_of(groups) && out_ch.is_multiple_of(groups));
        Conv2d {
            weight: pb.trunc_normal(
                "weight",
                &[out_ch, in_ch / groups, kernel.0, kernel.1],
                INIT_STD,
            ),
            bias: bias.then(|| pb.zeros("bias", &[out_ch])),
            pad,
            groups,
        }
    }

    /// Odd square kernel with symmetric "same" padding.
    pub fn same(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        assert!(k % 2 == 1, "same padding needs an odd kernel");
        let p = (k - 1) / 2;
        Self::new(pb, in_ch, out_ch, (k, k), (p, p, p, p), groups, bias)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nn::conv2d(
            x,
            self.weight.tensor(),
            self.bias.as_ref().map(|b| b.tensor()),
            self.pad,
            self.groups,
        )
    }
}

impl<T: Scalar> ParamVisit<T> for Conv2d<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Last-axis layer normalization with learned affine.
#[derive(Debug)]
pub struct LayerNorm<T: Scalar> {
    gamma: Parameter<T>,
    beta: Parameter<T>,
    eps: T,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl<T: Scalar> LayerNorm<T> {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Self {
        LayerNorm {
            gamma: pb.ones("gamma", &[dim]),
            beta: pb.zeros("beta", &[dim]),
            eps: T::from_c(LAYER_NORM_EPS),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nn::layer_norm(x, self.gamma.tensor(), self.beta.tensor(), self.eps)
    }
}

impl<T: Scalar> ParamVisit<T> for LayerNorm<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{named_params, param_count};

    #[test]
    fn linear_layer_shapes_and_names() {
        let pb = ParamBuilder::new(0);
        let l: Linear<f64> = Linear::new(&pb.scope("proj"), 4, 6, true);
        assert_eq!(l.weight().shape(), &[6, 4]);
        assert_eq!(l.weight().name(), "proj.weight");
        assert_eq!(param_count(&l), 24 + 6);
        let x = Tensor::from_vec(vec![0.5; 8], &[2, 4]).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 6]);
    }

    #[test]
    fn conv_same_preserves_extent() {
        let pb = ParamBuilder::new(1);
        let c: Conv2d<f64> = Conv2d::same(&pb.scope("c"), 3, 5, 3, 1, true);
        let x = Tensor::from_vec(vec![0.1; 2 * 3 * 7 * 9], &[2, 3, 7, 9]).unwrap();
        let y = c.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 7, 9]);
    }

    #[test]
    fn layer_norm_identity_at_init_modulo_normalization() {
        let pb = ParamBuilder::new(2);
        let ln: LayerNorm<f64> = LayerNorm::new(&pb.scope("ln"), 3);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let y = ln.forward(&x).unwrap();
        // gamma = 1, beta = 0: output is just the normalized row.
        assert!(y.data()[1].abs() < 1e-6);
        let names: Vec<String> = named_params(&ln).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["ln.gamma", "ln.beta"]);
    }
}
