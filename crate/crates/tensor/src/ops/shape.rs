use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let y = self.value().reshape(shape)?;
        let src_shape = self.shape().to_vec();
        Ok(Var::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| Ok(vec![Some(g.reshape(&src_shape)?)])),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        let y = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(Var::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| Ok(vec![Some(g.permute(&inverse)?)])),
        ))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let y = self.value().narrow(axis, start, len)?;
        let src_shape = self.shape().to_vec();
        Ok(Var::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let outer: usize = src_shape[..axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let extent = src_shape[axis];
                let mut out = vec![T::zero(); outer * extent * inner];
                let gd = g.data();
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                Ok(vec![Some(Tensor::from_parts(src_shape.clone(), out))])
            }),
        ))
    }

    /// Splits `axis` into `parts` equal chunks.
    pub fn chunk(&self, axis: usize, parts: usize) -> Result<Vec<Var<T>>> {
        let extent = *self.shape().get(axis).ok_or_else(|| invalid!("chunk axis {axis} out of range"))?;
        if parts == 0 || extent % parts != 0 {
            return Err(invalid!("cannot split extent {extent} into {parts} chunks"));
        }
        let len = extent / parts;
        (0..parts).map(|i| self.narrow(axis, i * len, len)).collect()
    }

    pub fn concat(vars: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = vars.iter().map(|v| v.value()).collect();
        let y = Tensor::concat(&values, axis)?;
        let extents: Vec<usize> = vars.iter().map(|v| v.shape()[axis]).collect();
        Ok(Var::from_op(
            y,
            vars.to_vec(),
            Box::new(move |g| {
                let mut start = 0;
                extents
                    .iter()
                    .map(|&len| {
                        let part = g.narrow(axis, start, len)?;
                        start += len;
                        Ok(Some(part))
                    })
                    .collect()
            }),
        ))
    }

    /// Stacks equal-shaped vars along a new leading axis.
    pub fn stack(vars: &[Var<T>]) -> Result<Var<T>> {
        let first = vars.first().ok_or_else(|| invalid!("stack of zero vars"))?;
        let mut shape = vec![1];
        shape.extend_from_slice(first.shape());
        let lifted: Result<Vec<_>> = vars.iter().map(|v| v.reshape(&shape)).collect();
        Var::concat(&lifted?, 0)
    }

    /// Inverse of [`Var::stack`]: splits the leading axis into its elements.
    pub fn unstack(&self) -> Result<Vec<Var<T>>> {
        let inner = self.shape()[1..].to_vec();
        if inner.is_empty() {
            return Err(invalid!("unstack needs rank >= 2"));
        }
        (0..self.shape()[0])
            .map(|i| self.narrow(0, i, 1)?.reshape(&inner))
            .collect()
    }
}
