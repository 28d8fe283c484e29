//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on [`Var`]s records its inputs and a vector-Jacobian
//! closure. [`Var::backward`] walks the recorded graph in reverse
//! topological order and deposits gradients into the [`Param`]s it reaches.

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::param::Param;
use crate::real::Real;
use crate::tensor::Tensor;

/// Maps the output gradient to one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + Send + Sync>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_DISABLED: Cell<usize> = const { Cell::new(0) };
}

/// Disables graph recording on this thread while the guard lives.
pub struct NoGradGuard(());

pub fn no_grad() -> NoGradGuard {
    GRAD_DISABLED.with(|c| c.set(c.get() + 1));
    NoGradGuard(())
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_DISABLED.with(|c| c.set(c.get() - 1));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_DISABLED.with(|c| c.get() == 0)
}

struct Node<T> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    param: Option<Param<T>>,
    consumed: AtomicBool,
}

/// A tensor value inside a differentiable computation.
#[derive(Clone)]
pub struct Var<T>(Arc<Node<T>>);

impl<T: Real> Var<T> {
    fn from_node(
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
        param: Option<Param<T>>,
    ) -> Self {
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents,
            backward,
            param,
            consumed: AtomicBool::new(false),
        }))
    }

    /// A value that never receives gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::from_node(value, false, Vec::new(), None, None)
    }

    /// Leaf bound to a parameter; gradients flow into `param`.
    pub fn param(param: &Param<T>) -> Self {
        let value = param.value();
        let track = grad_enabled();
        Self::from_node(value, track, Vec::new(), None, track.then(|| param.clone()))
    }

    /// Records an op result. Parents that do not require grad are dropped
    /// from the graph; when none do, the result is a constant.
    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        if !grad_enabled() || !parents.iter().any(|p| p.requires_grad()) {
            return Self::constant(value);
        }
        Self::from_node(value, true, parents, Some(backward), None)
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Runs reverse accumulation from this scalar. A graph can be
    /// differentiated once; a second call is a state error.
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.0.consumed.swap(true, Ordering::SeqCst) {
            return Err(TensorError::State("backward already ran on this graph".into()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
        grads.insert(self.0.id, Tensor::ones(self.shape()));

        for var in order.iter().rev() {
            let node = &var.0;
            let Some(grad) = grads.remove(&node.id) else { continue };
            if let Some(p) = &node.param {
                p.accumulate_grad(&grad)?;
            }
            let Some(bw) = &node.backward else { continue };
            let parent_grads = bw(&grad)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                match grads.get_mut(&parent.0.id) {
                    Some(acc) => acc.add_assign(&pg)?,
                    None => {
                        grads.insert(parent.0.id, pg);
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !visited.insert(var.0.id) {
                continue;
            }
            stack.push((var.clone(), true));
            for p in &var.0.parents {
                if p.requires_grad() && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

impl<T: std::fmt::Debug> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, requires_grad={})", self.0.value, self.0.requires_grad)
    }
}
