//! Gaussian-weighted SSIM + MAE objective, anomaly scores, and score
//! normalization.

use bivad_tensor::ops::separable_filter_valid;
use bivad_tensor::{no_grad, Real, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{invalid, Result};

/// Frames live in `[-1, 1]`.
pub const DYNAMIC_RANGE: f64 = 2.0;
pub const SSIM_C1: f64 = (0.01 * DYNAMIC_RANGE) * (0.01 * DYNAMIC_RANGE);
pub const SSIM_C2: f64 = (0.03 * DYNAMIC_RANGE) * (0.03 * DYNAMIC_RANGE);

/// Normalized separable Gaussian window.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWindow {
    pub size: usize,
    pub sigma: f64,
    /// One-dimensional taps; the 2-D window is their outer product.
    pub taps: Vec<f64>,
}

impl GaussianWindow {
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        if size % 2 == 0 || sigma <= 0.0 {
            return Err(invalid!("window needs odd size and positive sigma, got {size}, {sigma}"));
        }
        let half = (size / 2) as f64;
        let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = raw.iter().sum();
        Ok(Self { size, sigma, taps: raw.iter().map(|v| v / total).collect() })
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        Self::new(cfg.loss_window, cfg.loss_sigma)
    }

    /// Full `size × size` weights, row-major.
    pub fn weights(&self) -> Vec<f64> {
        self.taps.iter().flat_map(|a| self.taps.iter().map(move |b| a * b)).collect()
    }

    fn filter<T: Real>(&self, x: &Var<T>) -> Result<Var<T>> {
        let taps: Vec<T> = self.taps.iter().map(|&t| T::lit(t)).collect();
        Ok(separable_filter_valid(x, &taps)?)
    }
}

fn check_pair<T: Real>(x: &Var<T>, y: &Var<T>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(invalid!("frame shapes {:?} and {:?} differ", x.shape(), y.shape()));
    }
    Ok(())
}

/// Mean over window positions of the window-weighted absolute error.
pub fn local_mae<T: Real>(x: &Var<T>, y: &Var<T>, w: &GaussianWindow) -> Result<Var<T>> {
    check_pair(x, y)?;
    Ok(w.filter(&x.sub(y)?.abs())?.mean())
}

/// Per-window SSIM values (one map per channel plane).
pub fn ssim_map<T: Real>(x: &Var<T>, y: &Var<T>, w: &GaussianWindow) -> Result<Var<T>> {
    check_pair(x, y)?;
    let mu_x = w.filter(x)?;
    let mu_y = w.filter(y)?;
    let mu_xx = mu_x.square();
    let mu_yy = mu_y.square();
    let mu_xy = mu_x.mul(&mu_y)?;
    let var_x = w.filter(&x.square())?.sub(&mu_xx)?;
    let var_y = w.filter(&y.square())?.sub(&mu_yy)?;
    let cov = w.filter(&x.mul(y)?)?.sub(&mu_xy)?;
    let num = mu_xy.scale(2.0).add_scalar(SSIM_C1).mul(&cov.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mu_xx.add(&mu_yy)?.add_scalar(SSIM_C1).mul(&var_x.add(&var_y)?.add_scalar(SSIM_C2))?;
    Ok(num.div(&den)?)
}

/// `1 - mean(SSIM map)`.
pub fn ssim_loss<T: Real>(x: &Var<T>, y: &Var<T>, w: &GaussianWindow) -> Result<Var<T>> {
    Ok(ssim_map(x, y, w)?.mean().neg().add_scalar(1.0))
}

#[derive(Debug, Clone)]
pub struct LossBreakdown<T> {
    pub ssim_term: Var<T>,
    pub mae_term: Var<T>,
    pub total: Var<T>,
    pub lambda: f64,
}

impl<T: Real> LossBreakdown<T> {
    pub fn total_value(&self) -> f64 {
        self.total.value().item().to_f64().unwrap_or(f64::NAN)
    }
}

/// `ssim_loss + lambda * local_mae`.
pub fn combined_loss<T: Real>(x: &Var<T>, y: &Var<T>, w: &GaussianWindow, lambda: f64) -> Result<LossBreakdown<T>> {
    if lambda < 0.0 {
        return Err(invalid!("lambda must be >= 0, got {lambda}"));
    }
    let ssim_term = ssim_loss(x, y, w)?;
    let mae_term = local_mae(x, y, w)?;
    let total = ssim_term.add(&mae_term.scale(lambda))?;
    Ok(LossBreakdown { ssim_term, mae_term, total, lambda })
}

/// Objective value between an observed frame and its prediction.
pub fn anomaly_score<T: Real>(frame: &Tensor<T>, pred: &Tensor<T>, w: &GaussianWindow, lambda: f64) -> Result<f64> {
    let _g = no_grad();
    let b = combined_loss(&Var::constant(frame.clone()), &Var::constant(pred.clone()), w, lambda)?;
    Ok(b.total_value())
}

/// Per-pixel absolute error averaged over channels: `[C,H,W] -> [H,W]`.
pub fn error_map<T: Real>(frame: &Tensor<T>, pred: &Tensor<T>) -> Result<Tensor<T>> {
    frame.expect_same_shape(pred)?;
    let &[c, h, w] = frame.shape() else {
        return Err(invalid!("error_map expects [C,H,W], got {:?}", frame.shape()));
    };
    let mut out = vec![T::zero(); h * w];
    let inv = T::lit(1.0 / c as f64);
    for ch in 0..c {
        let base = ch * h * w;
        for (i, o) in out.iter_mut().enumerate() {
            *o += (frame.data()[base + i] - pred.data()[base + i]).abs() * inv;
        }
    }
    Ok(Tensor::new(&[h, w], out)?)
}

/// `(s - min) / (max - min)`; a constant series maps to zeros.
pub fn minmax_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(invalid!("cannot normalize an empty score series"));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return Ok(vec![0.0; scores.len()]);
    }
    Ok(scores.iter().map(|s| (s - min) / range).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(v: f64) -> Var<f64> {
        Var::constant(Tensor::full(&[1, 16, 16], v))
    }

    fn val(v: &Var<f64>) -> f64 {
        v.value().item()
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = GaussianWindow::new(11, 1.5).unwrap();
        let full = w.weights();
        assert!((full.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(full.iter().all(|&v| v > 0.0));
        for i in 0..11 {
            for j in 0..11 {
                assert_eq!(full[i * 11 + j], full[j * 11 + i]);
                assert!((full[i * 11 + j] - full[(10 - i) * 11 + j]).abs() < 1e-18);
            }
        }
        assert!(GaussianWindow::new(4, 1.0).is_err());
    }

    #[test]
    fn mae_examples() {
        let w = GaussianWindow::new(11, 1.5).unwrap();
        assert_eq!(val(&local_mae(&constant(0.3), &constant(0.3), &w).unwrap()), 0.0);
        assert!((val(&local_mae(&constant(-0.5), &constant(0.25), &w).unwrap()) - 0.75).abs() < 1e-12);
        assert!(local_mae(&constant(0.0), &Var::constant(Tensor::zeros(&[1, 15, 16])), &w).is_err());
    }

    #[test]
    fn ssim_examples() {
        let w = GaussianWindow::new(11, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Var::constant(Tensor::uniform(&[1, 16, 16], 1.0, &mut rng));
        assert!(val(&ssim_loss(&x, &x, &w).unwrap()).abs() < 1e-12);
        let loss = val(&ssim_loss(&constant(0.0), &constant(0.2), &w).unwrap());
        assert!((loss - (1.0 - SSIM_C1 / (0.04 + SSIM_C1))).abs() < 1e-9);
        assert!((loss - 0.990099).abs() < 1e-4);
        let y = Var::constant(Tensor::uniform(&[1, 16, 16], 1.0, &mut rng));
        let (a, b) = (val(&ssim_loss(&x, &y, &w).unwrap()), val(&ssim_loss(&y, &x, &w).unwrap()));
        assert!((a - b).abs() <= 1e-7);
        let map = ssim_map(&x, &y, &w).unwrap();
        assert!(map.value().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn combined_examples() {
        let w = GaussianWindow::new(11, 1.5).unwrap();
        let (a, b) = (constant(0.0), constant(0.2));
        let l = combined_loss(&a, &a, &w, 1.0).unwrap();
        assert!(l.total_value().abs() < 1e-12);
        let zero_lambda = combined_loss(&a, &b, &w, 0.0).unwrap();
        assert_eq!(zero_lambda.total_value(), val(&zero_lambda.ssim_term));
        let one = combined_loss(&a, &b, &w, 1.0).unwrap();
        assert!((one.total_value() - 1.190099).abs() < 1e-4);
        assert!((one.total_value() - (val(&one.ssim_term) + val(&one.mae_term))).abs() < 1e-12);
        assert!(combined_loss(&a, &b, &w, -1.0).is_err());
    }

    #[test]
    fn score_grows_with_noise() {
        let w = GaussianWindow::new(11, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = Tensor::<f64>::uniform(&[1, 32, 32], 0.5, &mut rng);
        let noise = Tensor::<f64>::uniform(&[1, 32, 32], 1.0, &mut rng);
        assert_eq!(anomaly_score(&frame, &frame, &w, 1.0).unwrap(), 0.0);
        let scores: Vec<f64> = [0.1, 0.2, 0.4]
            .iter()
            .map(|&a| anomaly_score(&frame, &frame.add(&noise.scale(a)).unwrap(), &w, 1.0).unwrap())
            .collect();
        assert!(scores.windows(2).all(|p| p[0] < p[1]), "{scores:?}");
        let sat = anomaly_score(&Tensor::full(&[1, 16, 16], 1.0), &Tensor::full(&[1, 16, 16], -1.0), &w, 1.0).unwrap();
        assert!(sat.is_finite());
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[5.0, 5.0]).unwrap(), vec![0.0, 0.0]);
        assert!(minmax_normalize(&[]).is_err());
        let s = [0.0, 0.3, 1.0, 0.7];
        assert_eq!(minmax_normalize(&s).unwrap(), s.to_vec());
    }

    #[test]
    fn error_map_averages_channels() {
        let a = Tensor::<f64>::from_f64(&[2, 1, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[2, 1, 2]);
        assert_eq!(error_map(&a, &b).unwrap().to_f64_vec(), vec![0.5, 0.0]);
    }
}
