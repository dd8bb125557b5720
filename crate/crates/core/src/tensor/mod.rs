//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle (`Arc`) to shape, values, and an
//! optional gradient. Operations record the computation graph whenever an
//! input requires gradients; [`Tensor::backward`] walks the graph once in
//! reverse topological order and accumulates `d(loss)/d(node)` into every
//! reachable gradient-tracked tensor. Gradients accumulate across calls
//! (`+=` semantics); [`Tensor::zero_grad`] resets them.
//!
//! Single precision is deliberately not supported: everything is f64 so
//! finite-difference checks resolve at 1e-6 relative error.

mod adam;
mod ops;
mod store;

pub use adam::{adam_step, AdamState};
pub use ops::{elementwise, ElementwiseKind, PaddingMode};
pub use store::ParameterStore;

use crate::error::{Error, Result};
use std::collections::{HashMap, HashSet};
use std::sync::{Arc, RwLock};

/// Gradient routine of a recorded op: maps the upstream gradient of the
/// node to one gradient buffer per (gradient-tracked) parent.
pub(crate) type BackFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>;

struct Inner {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    /// Parents that require gradients, in the order `backward` returns them.
    parents: Vec<Tensor>,
    backward: Option<BackFn>,
}

/// Shared handle to an n-dimensional f64 array in the differentiation graph.
///
/// `clone` copies the handle, not the storage: two clones see the same
/// values and gradient.
#[derive(Clone)]
pub struct Tensor(Arc<RwLock<Inner>>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.read().unwrap();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Plain constant tensor. Errors when `shape` does not account for
    /// `values.len()`.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        Ok(Self::make(shape.to_vec(), values, false))
    }

    /// Constant tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::make(shape.to_vec(), vec![0.0; n], false)
    }

    /// Rank-0-like scalar (shape `[1]`).
    pub fn scalar(value: f64) -> Self {
        Self::make(vec![1], vec![value], false)
    }

    /// Gradient-tracked leaf (a trainable parameter).
    pub fn parameter(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, values)?;
        t.0.write().unwrap().requires_grad = true;
        Ok(t)
    }

    fn make(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Self {
        debug_assert!(
            values.iter().all(|v| !v.is_nan()),
            "tensor holds NaN after a forward operation"
        );
        Tensor(Arc::new(RwLock::new(Inner {
            shape,
            values,
            grad: None,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Graph-recorded op result. `parents` must contain exactly the inputs
    /// that require gradients; `backward` must return one gradient buffer
    /// per parent, in the same order.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackFn,
    ) -> Self {
        if parents.is_empty() {
            return Self::make(shape, values, false);
        }
        let t = Self::make(shape, values, true);
        {
            let mut inner = t.0.write().unwrap();
            inner.parents = parents;
            inner.backward = Some(backward);
        }
        t
    }

    fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.read().unwrap().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.0.read().unwrap().shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.read().unwrap().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the values, flat row-major.
    pub fn values(&self) -> Vec<f64> {
        self.0.read().unwrap().values.clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        let inner = self.0.read().unwrap();
        assert_eq!(inner.values.len(), 1, "item() on a non-scalar tensor");
        inner.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.read().unwrap().requires_grad
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.read().unwrap().grad.clone()
    }

    /// Clears the accumulated gradient.
    pub fn zero_grad(&self) {
        self.0.write().unwrap().grad = None;
    }

    /// Replaces the values in place; shape is unchanged. Used by the
    /// optimizer, checkpoint restore, and finite-difference probes.
    pub fn set_values(&self, values: &[f64]) {
        let mut inner = self.0.write().unwrap();
        assert_eq!(inner.values.len(), values.len(), "set_values length mismatch");
        inner.values.copy_from_slice(values);
    }

    pub(crate) fn update_values(&self, f: impl FnOnce(&mut [f64])) {
        let mut inner = self.0.write().unwrap();
        f(&mut inner.values);
    }

    /// Same values, severed from the graph: no parents, no gradient flow.
    pub fn detach(&self) -> Tensor {
        let inner = self.0.read().unwrap();
        Self::make(inner.shape.clone(), inner.values.clone(), false)
    }

    fn parents(&self) -> Vec<Tensor> {
        self.0.read().unwrap().parents.clone()
    }

    /// Reverse-mode sweep from a scalar loss. Accumulates into the `grad`
    /// of every reachable gradient-tracked tensor; each graph node's
    /// backward routine runs exactly once per call.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss {
                elements: self.len(),
            });
        }

        // Reverse postorder over parent edges = topological order with
        // every node ahead of its parents.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.parents() {
                if !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }

        // Fresh scratch per call so repeated backward calls add one unit
        // of seed gradient each.
        let mut scratch: HashMap<usize, Vec<f64>> = HashMap::new();
        scratch.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(upstream) = scratch.get(&node.id()).cloned() else {
                continue;
            };
            let inner = node.0.read().unwrap();
            if let Some(back) = &inner.backward {
                let parent_grads = back(&upstream);
                debug_assert_eq!(parent_grads.len(), inner.parents.len());
                for (parent, g) in inner.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(g.len(), parent.len());
                    let slot = scratch
                        .entry(parent.id())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
            }
        }

        for node in &order {
            let mut inner = node.0.write().unwrap();
            if !inner.requires_grad {
                continue;
            }
            if let Some(delta) = scratch.get(&(Arc::as_ptr(&node.0) as usize)) {
                match &mut inner.grad {
                    Some(g) => {
                        for (gi, di) in g.iter_mut().zip(delta) {
                            *gi += di;
                        }
                    }
                    None => inner.grad = Some(delta.clone()),
                }
            }
        }
        Ok(())
    }

    /// Runs `f` with a read lock on the values (no copy).
    pub(crate) fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        let inner = self.0.read().unwrap();
        f(&inner.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_value_count() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.square();
        match y.backward() {
            Err(Error::NonScalarLoss { elements: 2 }) => {}
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::parameter(&[1], vec![3.0]).unwrap();
        let y = x.square();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn relu_sum_gradient() {
        let x = Tensor::parameter(&[2], vec![-1.0, 2.0]).unwrap();
        let loss = x.relu().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::parameter(&[1], vec![3.0]).unwrap();
        let y = x.square();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn reused_input_accumulates_within_one_call() {
        // y = x + x touches x twice through one node.
        let x = Tensor::parameter(&[1], vec![5.0]).unwrap();
        let y = x.add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn diamond_graph_touches_each_node_once() {
        // loss = x^2 + x^2 through two separate squares of the same x;
        // a double-visit of either square would double the gradient.
        let x = Tensor::parameter(&[1], vec![2.0]).unwrap();
        let a = x.square();
        let b = x.square();
        let loss = a.add(&b).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::parameter(&[1], vec![3.0]).unwrap();
        let y = x.square().detach().square();
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn clones_share_storage() {
        let x = Tensor::parameter(&[1], vec![1.0]).unwrap();
        let y = x.clone();
        x.set_values(&[4.0]);
        assert_eq!(y.values(), vec![4.0]);
    }
}
