//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{no_grad, Var};
use crate::error::{Result, TensorError};
use crate::param::Param;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(param name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares backprop gradients of `loss` with central differences of step
/// `h`. At most `max_per_param` entries per parameter are probed (chosen
/// with `rng`); `None` probes every entry.
pub fn check_gradients<F, R>(
    params: &[Param<f64>],
    loss: F,
    h: f64,
    max_per_param: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Var<f64>>,
    R: Rng + ?Sized,
{
    for p in params {
        p.zero_grad();
    }
    loss()?.backward()?;
    let mut report = GradCheckReport::default();
    for p in params {
        let analytic = p
            .grad()
            .ok_or_else(|| TensorError::State(format!("{} received no gradient", p.name())))?;
        let n = p.numel();
        let indices: Vec<usize> = match max_per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let base = p.value();
        for i in indices {
            let eval = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                p.set_value(t)?;
                let _g = no_grad();
                Ok(loss()?.value().item())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            p.set_value(base.clone())?;
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((p.name().to_string(), i, a, numeric));
                }
            }
        }
        p.zero_grad();
    }
    Ok(report)
}
