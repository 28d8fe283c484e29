use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-sample, per-channel spatial normalization with learnable affine:
/// `y = gamma * (x - mean) / (std + eps) + beta`, statistics over `H×W`.
/// Input is `[C,H,W]` or `[N,C,H,W]`; `gamma`, `beta` are `[C]`.
pub fn channel_norm<T: Real>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
    let shape = x.shape().to_vec();
    let (c, plane) = match shape[..] {
        [c, h, w] | [_, c, h, w] => (c, h * w),
        _ => return Err(invalid!("channel_norm expects [C,H,W] or [N,C,H,W], got {shape:?}")),
    };
    if plane < 2 {
        return Err(invalid!("channel_norm needs at least 2 pixels per channel"));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(invalid!("affine params must be [{c}]"));
    }
    let eps = T::lit(eps);
    let n_planes = x.value().numel() / plane;
    let pn = T::from_usize(plane).unwrap();
    let xv = x.value().clone();
    let (g, b) = (gamma.value().data().to_vec(), beta.value().data().to_vec());

    let mut xhat = vec![T::zero(); xv.numel()];
    let mut sigma = vec![T::zero(); n_planes];
    let mut y = vec![T::zero(); xv.numel()];
    for p in 0..n_planes {
        let src = &xv.data()[p * plane..(p + 1) * plane];
        let mean = src.iter().copied().sum::<T>() / pn;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / pn;
        let sd = var.sqrt();
        sigma[p] = sd;
        let inv = T::one() / (sd + eps);
        let ci = p % c;
        for i in 0..plane {
            let h = (src[i] - mean) * inv;
            xhat[p * plane + i] = h;
            y[p * plane + i] = g[ci] * h + b[ci];
        }
    }
    let y = Tensor::from_parts(shape.clone(), y);
    Ok(Var::from_op(
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |grad| {
            let gd = grad.data();
            let mut dx = vec![T::zero(); gd.len()];
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for p in 0..n_planes {
                let ci = p % c;
                let go = &gd[p * plane..(p + 1) * plane];
                let h = &xhat[p * plane..(p + 1) * plane];
                for i in 0..plane {
                    dg[ci] += go[i] * h[i];
                    db[ci] += go[i];
                }
                // d/dx of (x - mean)/(sigma + eps), scaled by gamma
                let s = sigma[p] + eps;
                let gh: Vec<T> = go.iter().map(|&v| v * g[ci]).collect();
                let mean_g = gh.iter().copied().sum::<T>() / pn;
                // Σ gh·(x-mean) = s·Σ gh·xhat
                let cov = gh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() * s;
                let coef = if sigma[p] > T::zero() { cov / (pn * sigma[p] * s * s) } else { T::zero() };
                for i in 0..plane {
                    let centered = h[i] * s;
                    dx[p * plane + i] = (gh[i] - mean_g) / s - centered * coef;
                }
            }
            Ok(vec![
                Some(Tensor::from_parts(shape.clone(), dx)),
                Some(Tensor::from_parts(vec![c], dg)),
                Some(Tensor::from_parts(vec![c], db)),
            ])
        }),
    ))
}
