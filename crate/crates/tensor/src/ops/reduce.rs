use crate::autograd::Var;
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Var<T> {
    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Var<T> {
        let y = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        Var::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| Ok(vec![Some(Tensor::full(&shape, g.item()))])),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }
}
