use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Batched matrix product `[B,M,K] x [B,K,N] -> [B,M,N]`. With `trans_b`,
/// `b` is stored `[B,N,K]` and used transposed.
pub fn bmm<T: Real>(a: &Var<T>, b: &Var<T>, trans_b: bool) -> Result<Var<T>> {
    let (&[ba, m, k], &[bb, b1, b2]) = (a.shape(), b.shape()) else {
        return Err(invalid!("bmm needs rank-3 operands, got {:?} and {:?}", a.shape(), b.shape()));
    };
    let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
    if ba != bb || k != kb {
        return Err(invalid!("bmm shape mismatch {:?} x {:?} (trans_b={trans_b})", a.shape(), b.shape()));
    }
    let batch = ba;
    let av = a.value().clone();
    let bv = b.value().clone();
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &av.data()[i * m * k..(i + 1) * m * k],
            false,
            &bv.data()[i * k * n..(i + 1) * k * n],
            trans_b,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let y = Tensor::from_parts(vec![batch, m, n], out);
    let (want_a, want_b) = (a.requires_grad(), b.requires_grad());
    Ok(Var::from_op(
        y,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let da = want_a.then(|| {
                let mut da = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    // trans_b: dA = G·B_s ; else dA = G·Bᵀ
                    gemm(m, n, k, gi, false, bi, !trans_b, T::zero(), &mut da[i * m * k..(i + 1) * m * k]);
                }
                Tensor::from_parts(vec![batch, m, k], da)
            });
            let db = want_b.then(|| {
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let dst = &mut db[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm(n, m, k, gi, true, ai, false, T::zero(), dst);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, T::zero(), dst);
                    }
                }
                Tensor::from_parts(bv.shape().to_vec(), db)
            });
            Ok(vec![da, db])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product() {
        let a = Var::constant(Tensor::<f64>::from_f64(&[1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let b = Var::constant(Tensor::<f64>::from_f64(&[1, 3, 1], &[1., 0., -1.]).unwrap());
        let c = bmm(&a, &b, false).unwrap();
        assert_eq!(c.value().to_f64_vec(), vec![-2., -2.]);
        let bt = Var::constant(Tensor::<f64>::from_f64(&[1, 1, 3], &[1., 0., -1.]).unwrap());
        assert_eq!(bmm(&a, &bt, true).unwrap().value().to_f64_vec(), vec![-2., -2.]);
        assert!(bmm(&a, &a, false).is_err());
    }
}
