//! Trainable parameters: named leaf tensors plus seeded initialization.
//!
//! Every parameter carries a dotted path name (`"samg0.samb2.stb.qkv.weight"`)
//! assigned by a [`ParamBuilder`], which also enforces global uniqueness —
//! checkpoints key values by these names, so a collision would silently
//! alias two parameters. Modules expose their parameters through
//! [`ParamVisit`], whose visit order is the (deterministic) construction
//! order; optimizers and checkpoint I/O walk that order.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named, gradient-tracked leaf tensor.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    name: String,
    tensor: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let tensor = Tensor::from_vec(data, shape)?.requiring_grad();
        Ok(Parameter {
            name: name.into(),
            tensor,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The current value as a graph leaf. Each forward pass should call
    /// this afresh so optimizer updates are picked up.
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.tensor.grad()
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad()
    }

    /// Replace the value (same shape) with a fresh, grad-free leaf. Graphs
    /// built before the call keep referencing the old value, which is
    /// exactly what an optimizer step wants.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.tensor.numel() {
            return Err(Error::contract(
                "parameter",
                format!(
                    "new data for {} has {} elements, expected {}",
                    self.name,
                    data.len(),
                    self.tensor.numel()
                ),
            ));
        }
        self.tensor = Tensor::from_vec(data, self.tensor.shape())?.requiring_grad();
        Ok(())
    }
}

/// Modules expose parameters (in construction order) through this trait.
pub trait ParamVisit<T: Scalar> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));
}

/// Total scalar count across all parameters of a module.
pub fn param_count<T: Scalar>(m: &dyn ParamVisit<T>) -> usize {
    let mut n = 0;
    m.visit_params(&mut |p| n += p.numel());
    n
}

pub fn zero_grads<T: Scalar>(m: &dyn ParamVisit<T>) {
    m.visit_params(&mut |p| p.zero_grad());
}

/// Collect `(name, tensor)` pairs in visit order.
pub fn named_params<T: Scalar>(m: &dyn ParamVisit<T>) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.push((p.name().to_string(), p.tensor().clone())));
    out
}

struct BuilderState {
    rng: ChaCha8Rng,
    taken: HashSet<String>,
}

/// Scoped factory for parameters. Cloning with [`ParamBuilder::scope`]
/// extends the dotted prefix while sharing the seeded RNG, so the full
/// initialization stream is a pure function of the seed and construction
/// order.
#[derive(Clone)]
pub struct ParamBuilder {
    prefix: String,
    state: Rc<RefCell<BuilderState>>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            prefix: String::new(),
            state: Rc::new(RefCell::new(BuilderState {
                rng: ChaCha8Rng::seed_from_u64(seed),
                taken: HashSet::new(),
            })),
        }
    }

    /// Child builder whose parameters get `name.` prepended.
    pub fn scope(&self, name: &str) -> ParamBuilder {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            prefix,
            state: Rc::clone(&self.state),
        }
    }

    fn full_name(&self, name: &str) -> String {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let fresh = self.state.borrow_mut().taken.insert(full.clone());
        assert!(fresh, "duplicate parameter name: {full}");
        full
    }

    /// Normal(0, std) truncated to +-2 std by resampling.
    pub fn trunc_normal<T: Scalar>(&self, name: &str, shape: &[usize], std: f64) -> Parameter<T> {
        let full = self.full_name(name);
        let numel: usize = shape.iter().product();
        let mut state = self.state.borrow_mut();
        let data: Vec<T> = (0..numel)
            .map(|_| {
                let z = loop {
                    let z: f64 = state.rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break z;
                    }
                };
                T::from_c(z * std)
            })
            .collect();
        drop(state);
        Parameter::new(full, data, shape).expect("builder shape is consistent")
    }

    pub fn constant<T: Scalar>(&self, name: &str, shape: &[usize], v: f64) -> Parameter<T> {
        let full = self.full_name(name);
        let numel: usize = shape.iter().product();
        Parameter::new(full, vec![T::from_c(v); numel], shape).expect("builder shape is consistent")
    }

    pub fn zeros<T: Scalar>(&self, name: &str, shape: &[usize]) -> Parameter<T> {
        self.constant(name, shape, 0.0)
    }

    pub fn ones<T: Scalar>(&self, name: &str, shape: &[usize]) -> Parameter<T> {
        self.constant(name, shape, 1.0)
    }

    /// Arbitrary initialization with access to the builder's RNG.
    pub fn init_with<T: Scalar>(
        &self,
        name: &str,
        shape: &[usize],
        f: impl FnOnce(&mut ChaCha8Rng) -> Vec<T>,
    ) -> Parameter<T> {
        let full = self.full_name(name);
        let data = f(&mut self.state.borrow_mut().rng);
        Parameter::new(full, data, shape).expect("init_with produced wrong element count")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_scoped_and_unique() {
        let pb = ParamBuilder::new(0);
        let inner = pb.scope("block").scope("attn");
        let p: Parameter<f64> = inner.zeros("weight", &[2, 2]);
        assert_eq!(p.name(), "block.attn.weight");
        let q: Parameter<f64> = pb.zeros("weight", &[1]);
        assert_eq!(q.name(), "weight");
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let pb = ParamBuilder::new(0);
        let _a: Parameter<f64> = pb.zeros("w", &[1]);
        let _b: Parameter<f64> = pb.zeros("w", &[1]);
    }

    #[test]
    fn trunc_normal_is_seeded_and_bounded() {
        let pb1 = ParamBuilder::new(42);
        let pb2 = ParamBuilder::new(42);
        let a: Parameter<f64> = pb1.trunc_normal("w", &[1000], 0.02);
        let b: Parameter<f64> = pb2.trunc_normal("w", &[1000], 0.02);
        assert_eq!(a.tensor().data(), b.tensor().data());
        assert!(a.tensor().data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
        // Not degenerate: plenty of distinct values.
        let distinct: std::collections::HashSet<u64> =
            a.tensor().data().iter().map(|v| v.to_bits()).collect();
        assert!(distinct.len() > 900);

        let pb3 = ParamBuilder::new(43);
        let c: Parameter<f64> = pb3.trunc_normal("w", &[1000], 0.02);
        assert_ne!(a.tensor().data(), c.tensor().data());
    }

    #[test]
    fn set_data_checks_length_and_resets_grad() {
        let mut p: Parameter<f64> = Parameter::new("p", vec![1.0, 2.0], &[2]).unwrap();
        let loss = p.tensor().sum_all();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0, 1.0]);
        assert!(p.set_data(vec![0.0; 3]).is_err());
        p.set_data(vec![5.0, 6.0]).unwrap();
        assert_eq!(p.tensor().data(), &[5.0, 6.0]);
        assert!(p.grad().is_none());
    }
}
