use std::sync::{Arc, Mutex, MutexGuard};

use rand::Rng;

use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

/// Mutable training state of one learnable tensor.
#[derive(Debug, Clone)]
pub struct ParamState<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

#[derive(Debug)]
struct ParamInner<T> {
    name: String,
    state: Mutex<ParamState<T>>,
}

/// Shared handle to a learnable tensor. Clones refer to the same parameter,
/// which is how modules share weights; compare with [`Param::same`].
#[derive(Debug, Clone)]
pub struct Param<T>(Arc<ParamInner<T>>);

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self(Arc::new(ParamInner {
            name: name.into(),
            state: Mutex::new(ParamState {
                value,
                grad: None,
                adam_m: zeros.clone(),
                adam_v: zeros,
                step_count: 0,
            }),
        }))
    }

    /// Kernel-style init: uniform in `±sqrt(1 / fan_in)`.
    pub fn init_uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        Self::new(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn state(&self) -> MutexGuard<'_, ParamState<T>> {
        // A poisoned lock only means another thread panicked mid-update;
        // the tensors themselves are still structurally valid.
        self.0.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn value(&self) -> Tensor<T> {
        self.state().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.state().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.state().value.numel()
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.state().grad.clone()
    }

    pub fn step_count(&self) -> u64 {
        self.state().step_count
    }

    /// Replaces the value, keeping optimizer state. Shape must match.
    pub fn set_value(&self, value: Tensor<T>) -> Result<()> {
        let mut st = self.state();
        st.value.expect_same_shape(&value)?;
        st.value = value;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.state().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &Tensor<T>) -> Result<()> {
        let mut st = self.state();
        match st.grad.as_mut() {
            Some(acc) => acc.add_assign(g),
            None => {
                st.value.expect_same_shape(g)?;
                st.grad = Some(g.clone());
                Ok(())
            }
        }
    }

    /// True when both handles refer to the same underlying parameter.
    pub fn same(&self, other: &Param<T>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}
