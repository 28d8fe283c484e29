use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Depthwise correlation with the separable kernel `taps ⊗ taps`, keeping
/// only windows fully inside the image. `[.., H, W] -> [.., H-k+1, W-k+1]`.
pub fn separable_filter_valid<T: Real>(x: &Var<T>, taps: &[T]) -> Result<Var<T>> {
    let shape = x.shape().to_vec();
    if shape.len() < 2 {
        return Err(invalid!("filter input needs rank >= 2"));
    }
    let k = taps.len();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if k == 0 || k > h || k > w {
        return Err(invalid!("window {k} does not fit a {h}x{w} image"));
    }
    let (ho, wo) = (h - k + 1, w - k + 1);
    let planes = x.value().numel() / (h * w);
    let taps = taps.to_vec();

    let mut out_shape = shape.clone();
    let rank = out_shape.len();
    out_shape[rank - 2] = ho;
    out_shape[rank - 1] = wo;

    let mut y = vec![T::zero(); planes * ho * wo];
    let mut tmp = vec![T::zero(); h * wo];
    for p in 0..planes {
        let src = &x.value().data()[p * h * w..(p + 1) * h * w];
        // horizontal pass: [h, w] -> [h, wo]
        for r in 0..h {
            for c in 0..wo {
                let row = &src[r * w + c..r * w + c + k];
                tmp[r * wo + c] = row.iter().zip(&taps).map(|(&a, &b)| a * b).sum();
            }
        }
        // vertical pass: [h, wo] -> [ho, wo]
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for (a, &t) in taps.iter().enumerate() {
            for r in 0..ho {
                let s = &tmp[(r + a) * wo..(r + a + 1) * wo];
                for (d, &v) in dst[r * wo..(r + 1) * wo].iter_mut().zip(s) {
                    *d += t * v;
                }
            }
        }
    }
    let y = Tensor::from_parts(out_shape, y);
    Ok(Var::from_op(
        y,
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); planes * h * w];
            let mut tmp = vec![T::zero(); h * wo];
            for p in 0..planes {
                let gp = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                tmp.fill(T::zero());
                for (a, &t) in taps.iter().enumerate() {
                    for r in 0..ho {
                        for (d, &v) in tmp[(r + a) * wo..(r + a + 1) * wo].iter_mut().zip(&gp[r * wo..(r + 1) * wo]) {
                            *d += t * v;
                        }
                    }
                }
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for r in 0..h {
                    for c in 0..wo {
                        let v = tmp[r * wo + c];
                        for (b, &t) in taps.iter().enumerate() {
                            dst[r * w + c + b] += t * v;
                        }
                    }
                }
            }
            Ok(vec![Some(Tensor::from_parts(shape.clone(), dx))])
        }),
    ))
}
