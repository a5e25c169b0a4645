//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable handle (`Arc`) to a value plus, when gradient
//! tracking is active, an edge into the computation graph: the list of parent
//! tensors and a closure computing the vector-Jacobian product. Calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order, pushing cotangents from the loss to every leaf that requires a
//! gradient. Gradients accumulate additively across uses, so a tensor feeding
//! several consumers receives the sum of their contributions.
//!
//! Design choices:
//! - data is always contiguous row-major; movement ops copy. At desk scale
//!   the simplicity is worth far more than the saved memcpys.
//! - nodes whose parents all have `requires_grad == false` drop their edge at
//!   construction, so inference builds no graph and retains no buffers.
//! - the backward pass is iterative (explicit stack), so deep chains such as
//!   long selective scans cannot overflow the call stack.

mod ops;
mod shape;

pub mod nn;

pub use shape::{broadcast_shapes, strides_for};

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Context handed to a VJP closure during the backward pass.
pub struct VjpCtx<'a, T: Scalar> {
    /// Cotangent flowing into this node, one entry per output element.
    pub grad: &'a [T],
    /// The node's own forward output (handy for e.g. softmax, sigmoid).
    pub out_data: &'a [T],
    pub out_shape: &'a [usize],
    /// Parent tensors, in the order passed to [`Tensor::from_op`].
    pub parents: &'a [Tensor<T>],
}

type VjpFn<T> = dyn Fn(&VjpCtx<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync;

struct Edge<T: Scalar> {
    parents: Vec<Tensor<T>>,
    vjp: Box<VjpFn<T>>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    /// Accumulated gradient for leaves; `None` until the first backward.
    grad: Mutex<Option<Vec<T>>>,
    edge: Option<Edge<T>>,
}

/// Immutable handle to an n-dimensional array, cheap to clone.
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Drop for Tensor<T> {
    /// Unlink parent edges iteratively. The default recursive drop would
    /// overflow the stack on long op chains (one selective scan step per
    /// node adds up quickly).
    fn drop(&mut self) {
        let mut stack: Vec<Tensor<T>> = Vec::new();
        if let Some(inner) = Arc::get_mut(&mut self.inner) {
            if let Some(edge) = inner.edge.take() {
                stack.extend(edge.parents);
            }
        }
        while let Some(mut t) = stack.pop() {
            if let Some(inner) = Arc::get_mut(&mut t.inner) {
                if let Some(edge) = inner.edge.take() {
                    stack.extend(edge.parents);
                }
            }
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    // ------------------------------------------------------------------
    // Construction
    // ------------------------------------------------------------------

    /// Leaf tensor from raw data. Fails if the shape does not describe
    /// exactly `data.len()` elements.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(
                "tensor",
                format!(
                    "shape {:?} describes {} elements but data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![v], Vec::new(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![T::zero(); numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![v; numel], shape.to_vec(), false)
    }

    /// New leaf sharing this tensor's data but marked as requiring grad.
    /// Used for trainable parameters and for gradient-check probes.
    pub fn requiring_grad(&self) -> Self {
        Self::leaf(self.inner.data.clone(), self.inner.shape.clone(), true)
    }

    pub(crate) fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                edge: None,
            }),
        }
    }

    /// Graph node produced by a differentiable operation.
    ///
    /// `vjp` receives the incoming cotangent and must return one optional
    /// gradient per parent, each flattened to the parent's element count
    /// (`None` for parents that get no gradient). The edge is kept only if
    /// some parent requires a gradient; otherwise the result is a plain
    /// leaf and the parents are released immediately.
    ///
    /// This is public so that downstream code (and the gradient-check
    /// harness's deliberately corrupted control op) can define custom
    /// differentiable operations.
    pub fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        vjp: impl Fn(&VjpCtx<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let edge = if requires_grad {
            Some(Edge {
                parents,
                vjp: Box::new(vjp),
            })
        } else {
            None
        };
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                edge,
            }),
        }
    }

    // ------------------------------------------------------------------
    // Accessors
    // ------------------------------------------------------------------

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.numel(),
            1,
            "item() requires exactly one element, shape is {:?}",
            self.shape()
        );
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass has reached
    /// this leaf since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    fn accumulate_grad(&self, cot: &[T]) {
        let mut slot = self.inner.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(g) => {
                debug_assert_eq!(g.len(), cot.len());
                for (a, b) in g.iter_mut().zip(cot) {
                    *a += *b;
                }
            }
            None => *slot = Some(cot.to_vec()),
        }
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse-mode sweep seeded with `d(self)/d(self) = 1`.
    ///
    /// `self` must be a scalar (rank 0 or a single element). Gradients land
    /// in the `grad` cells of every reachable leaf with `requires_grad`,
    /// adding to whatever was there already.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            // Loss does not depend on any tracked leaf: nothing to do.
            return Ok(());
        }

        let order = self.toposort();
        let mut cotangents: HashMap<u64, Vec<T>> = HashMap::new();
        cotangents.insert(self.id(), vec![T::one()]);

        // `order` lists parents before children; walk it in reverse so each
        // node is processed after all of its consumers.
        for node in order.iter().rev() {
            let Some(cot) = cotangents.remove(&node.id()) else {
                continue;
            };
            match &node.inner.edge {
                None => {
                    if node.requires_grad() {
                        node.accumulate_grad(&cot);
                    }
                }
                Some(edge) => {
                    let ctx = VjpCtx {
                        grad: &cot,
                        out_data: node.data(),
                        out_shape: node.shape(),
                        parents: &edge.parents,
                    };
                    let parent_grads = (edge.vjp)(&ctx);
                    debug_assert_eq!(parent_grads.len(), edge.parents.len());
                    for (parent, pg) in edge.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match cotangents.get_mut(&parent.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&pg) {
                                    *a += *b;
                                }
                            }
                            None => {
                                cotangents.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Iterative post-order DFS over the grad-requiring subgraph: every
    /// node appears after all of its parents.
    fn toposort(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (node, children_pushed) pairs.
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(edge) = &node.inner.edge {
                for p in &edge.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_length() {
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn zero_sized_shapes_are_legal() {
        let t = Tensor::<f64>::from_vec(vec![], &[2, 0, 3]).unwrap();
        assert_eq!(t.numel(), 0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2])
            .unwrap()
            .requiring_grad();
        assert!(t.backward().is_err());
    }

    #[test]
    fn backward_through_custom_op() {
        // y = 3 * x, elementwise, then sum. dy/dx = 3 everywhere.
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5], &[3])
            .unwrap()
            .requiring_grad();
        let y = Tensor::from_op(
            x.data().iter().map(|v| 3.0 * v).collect(),
            vec![3],
            vec![x.clone()],
            |ctx| vec![Some(ctx.grad.iter().map(|g| 3.0 * g).collect())],
        );
        let loss = Tensor::from_op(
            vec![y.data().iter().sum::<f64>()],
            vec![],
            vec![y.clone()],
            |ctx| vec![Some(vec![ctx.grad[0]; 3])],
        );
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0, 3.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses_and_backwards() {
        let x = Tensor::from_vec(vec![2.0], &[1]).unwrap().requiring_grad();
        // loss = x + x  => dl/dx = 2
        let loss = Tensor::from_op(
            vec![x.data()[0] + x.data()[0]],
            vec![],
            vec![x.clone(), x.clone()],
            |ctx| vec![Some(vec![ctx.grad[0]]), Some(vec![ctx.grad[0]])],
        );
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
        // Second backward adds on top.
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn untracked_graph_builds_no_edges() {
        let x = Tensor::from_vec(vec![1.0_f64, 2.0], &[2]).unwrap();
        let y = Tensor::from_op(x.data().to_vec(), vec![2], vec![x.clone()], |_| vec![None]);
        assert!(!y.requires_grad());
        assert!(y.inner.edge.is_none());
    }

    #[test]
    fn deep_chain_does_not_overflow_stack() {
        let x = Tensor::from_vec(vec![1.0_f64], &[1])
            .unwrap()
            .requiring_grad();
        let mut y = x.clone();
        for _ in 0..200_000 {
            let v = y.data()[0];
            y = Tensor::from_op(vec![v], vec![1], vec![y.clone()], |ctx| {
                vec![Some(vec![ctx.grad[0]])]
            });
        }
        let loss = Tensor::from_op(vec![y.data()[0]], vec![], vec![y], |ctx| {
            vec![Some(vec![ctx.grad[0]])]
        });
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }
}
