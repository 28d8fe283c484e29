use std::sync::Arc;

use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Added to disallowed scores before normalization; `exp` of it underflows
/// to exactly zero.
pub const MASK_VALUE: f64 = -1e9;

/// Numerically stable softmax of a plain score vector.
pub fn softmax_vec<T: Real>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(invalid!("softmax of an empty vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(crate::TensorError::Numeric("softmax input not finite".into()));
    }
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax over the last axis of `[..., T, S]`. `mask` (row-major `T×S`,
/// `true` = may attend) is shared by every leading index; masked entries
/// come out exactly zero.
pub fn masked_softmax<T: Real>(scores: &Var<T>, mask: Option<Arc<Vec<bool>>>) -> Result<Var<T>> {
    let shape = scores.shape().to_vec();
    if shape.len() < 2 {
        return Err(invalid!("masked_softmax needs rank >= 2, got {shape:?}"));
    }
    let (t, s) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if let Some(m) = &mask {
        if m.len() != t * s {
            return Err(invalid!("mask has {} entries, scores rows are {t}x{s}", m.len()));
        }
        if m.chunks(s).any(|row| !row.iter().any(|&a| a)) {
            return Err(invalid!("mask row with no allowed entry"));
        }
    }
    let penalty = T::lit(MASK_VALUE);
    let mut y = scores.value().data().to_vec();
    for (r, row) in y.chunks_mut(s).enumerate() {
        if let Some(m) = &mask {
            let mrow = &m[(r % t) * s..(r % t + 1) * s];
            for (v, &allowed) in row.iter_mut().zip(mrow) {
                if !allowed {
                    *v += penalty;
                }
            }
        }
        softmax_in_place(row);
    }
    let y = Tensor::from_parts(shape.clone(), y);
    let saved = y.clone();
    Ok(Var::from_op(
        y,
        vec![scores.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); saved.numel()];
            for ((dxr, yr), gr) in dx.chunks_mut(s).zip(saved.data().chunks(s)).zip(g.data().chunks(s)) {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((d, &y), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            Ok(vec![Some(Tensor::from_parts(shape.clone(), dx))])
        }),
    ))
}

/// Lower-triangular causal mask: position `p` may see `0..=p`.
pub fn causal_mask(len: usize) -> Arc<Vec<bool>> {
    Arc::new((0..len * len).map(|i| i % len <= i / len).collect())
}
