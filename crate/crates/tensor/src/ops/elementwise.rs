use crate::autograd::Var;
use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu(0.2)
    }
}

pub fn activation<T: Real>(kind: Activation, x: &Var<T>) -> Var<T> {
    match kind {
        Activation::LeakyRelu(slope) => x.leaky_relu(slope),
        Activation::Sigmoid => x.sigmoid(),
        Activation::Tanh => x.tanh(),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Var<T> {
    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary<F, D>(&self, f: F, df: D) -> Var<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + Send + Sync + 'static,
    {
        let x = self.value().clone();
        let y = x.map(f);
        let y_saved = y.clone();
        Var::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y_saved.data()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), data))])
            }),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::lit(slope);
        self.unary(
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&self) -> Var<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Var<T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn scale(&self, s: f64) -> Var<T> {
        let s = T::lit(s);
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let c = T::lit(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-1.0)
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let y = self.value().add(other.value())?;
        Ok(Var::from_op(
            y,
            vec![self.clone(), other.clone()],
            Box::new(|g| Ok(vec![Some(g.clone()), Some(g.clone())])),
        ))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let y = self.value().sub(other.value())?;
        Ok(Var::from_op(
            y,
            vec![self.clone(), other.clone()],
            Box::new(|g| Ok(vec![Some(g.clone()), Some(g.scale(-T::one()))])),
        ))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let a = self.value().clone();
        let b = other.value().clone();
        let y = a.mul(&b)?;
        Ok(Var::from_op(
            y,
            vec![self.clone(), other.clone()],
            Box::new(move |g| Ok(vec![Some(g.mul(&b)?), Some(g.mul(&a)?)])),
        ))
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        let a = self.value().clone();
        let b = other.value().clone();
        let y = a.zip_map(&b, |x, y| x / y)?;
        let y_saved = y.clone();
        Ok(Var::from_op(
            y,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g.zip_map(&b, |g, b| g / b)?;
                let gb = ga.zip_map(&y_saved, |ga, y| -ga * y)?;
                Ok(vec![Some(ga), Some(gb)])
            }),
        ))
    }

    /// Sum of `weights[i] * vars[i]`; all vars share one shape.
    pub fn weighted_sum(vars: &[Var<T>], weights: &[f64]) -> Result<Var<T>> {
        if vars.is_empty() || vars.len() != weights.len() {
            return Err(crate::error::invalid!(
                "weighted_sum: {} vars vs {} weights",
                vars.len(),
                weights.len()
            ));
        }
        let mut acc = vars[0].value().scale(T::lit(weights[0]));
        for (v, &w) in vars.iter().zip(weights).skip(1) {
            v.value().expect_same_shape(&acc)?;
            let w = T::lit(w);
            for (a, &x) in acc.data_mut().iter_mut().zip(v.value().data()) {
                *a += w * x;
            }
        }
        let ws: Vec<T> = weights.iter().map(|&w| T::lit(w)).collect();
        Ok(Var::from_op(
            acc,
            vars.to_vec(),
            Box::new(move |g| Ok(ws.iter().map(|&w| Some(g.scale(w))).collect())),
        ))
    }
}
