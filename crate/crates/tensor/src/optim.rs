use crate::error::{Result, TensorError};
use crate::param::Param;
use crate::real::Real;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update over `params`, consuming their gradients.
///
/// Every parameter must carry a gradient; otherwise nothing is updated and
/// a state error is returned.
pub fn adam_step<T: Real>(params: &[Param<T>], cfg: &AdamConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.state().grad.is_none()) {
        return Err(TensorError::State(format!("parameter {} has no gradient", p.name())));
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for p in params {
        let mut st = p.state();
        let grad = st.grad.take().expect("checked above");
        st.step_count += 1;
        let t = st.step_count as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let crate::param::ParamState { value, adam_m, adam_v, .. } = &mut *st;
        let (m, v, x) = (adam_m.data_mut(), adam_v.data_mut(), value.data_mut());
        for i in 0..x.len() {
            let g = grad.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            x[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(x: f64, g: f64) -> Param<f64> {
        let p = Param::new("w", Tensor::from_f64(&[1], &[x]).unwrap());
        p.accumulate_grad(&Tensor::from_f64(&[1], &[g]).unwrap()).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = scalar_param(0.0, 1.0);
        adam_step(&[p.clone()], &AdamConfig::default()).unwrap();
        assert!((p.value().item() + 0.001).abs() < 1e-10);
        assert_eq!(p.step_count(), 1);
        assert!(p.grad().is_none());
    }

    #[test]
    fn zero_grad_leaves_value() {
        let p = scalar_param(0.5, 0.0);
        adam_step(&[p.clone()], &AdamConfig::default()).unwrap();
        assert_eq!(p.value().item(), 0.5);
        assert_eq!(p.step_count(), 1);
    }

    #[test]
    fn constant_grad_moves_monotonically() {
        let p = scalar_param(0.0, -2.0);
        let cfg = AdamConfig::default();
        adam_step(&[p.clone()], &cfg).unwrap();
        let after_one = p.value().item();
        p.accumulate_grad(&Tensor::from_f64(&[1], &[-2.0]).unwrap()).unwrap();
        adam_step(&[p.clone()], &cfg).unwrap();
        assert!(after_one > 0.0 && p.value().item() > after_one);
    }

    #[test]
    fn missing_grad_is_state_error() {
        let good = scalar_param(0.0, 1.0);
        let bare = Param::new("bare", Tensor::<f64>::zeros(&[1]));
        let err = adam_step(&[good.clone(), bare], &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, TensorError::State(_)));
        assert_eq!(good.step_count(), 0);
    }
}
