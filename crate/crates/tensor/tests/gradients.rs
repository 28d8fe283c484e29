//! Every differentiable op against central differences in 64-bit.

use bivad_tensor::gradcheck::check_gradients;
use bivad_tensor::ops::{
    bmm, causal_mask, channel_norm, conv2d, conv_transpose2d, masked_softmax, separable_filter_valid,
};
use bivad_tensor::{Param, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;
const H: f64 = 1e-3;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn param(name: &str, shape: &[usize], r: &mut ChaCha8Rng) -> Param<f64> {
    Param::new(name, Tensor::uniform(shape, 1.0, r))
}

/// A fixed random projection so the loss exercises every output element
/// with a distinct weight.
fn probe(shape: &[usize], seed: u64) -> Var<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Var::constant(Tensor::uniform(shape, 1.0, &mut r))
}

fn project(y: Var<f64>) -> Result<Var<f64>> {
    let w = probe(y.shape(), 99);
    Ok(y.mul(&w)?.sum())
}

fn assert_grads(params: &[Param<f64>], f: impl Fn() -> Result<Var<f64>>) {
    let report = check_gradients(params, f, H, None, &mut rng()).unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn elementwise_unary() {
    let mut r = rng();
    let x = param("x", &[3, 4], &mut r);
    assert_grads(&[x.clone()], || project(Var::param(&x).sigmoid()));
    assert_grads(&[x.clone()], || project(Var::param(&x).tanh()));
    assert_grads(&[x.clone()], || project(Var::param(&x).leaky_relu(0.2)));
    assert_grads(&[x.clone()], || project(Var::param(&x).abs()));
    assert_grads(&[x.clone()], || project(Var::param(&x).square().scale(0.3).add_scalar(2.0)));
    assert_grads(&[x.clone()], || Ok(Var::param(&x).mean()));
}

#[test]
fn elementwise_binary() {
    let mut r = rng();
    let a = param("a", &[2, 5], &mut r);
    let b = Param::new("b", Tensor::uniform(&[2, 5], 1.0, &mut r).map(|v| v + 2.5));
    let both = [a.clone(), b.clone()];
    assert_grads(&both, || project(Var::param(&a).add(&Var::param(&b))?));
    assert_grads(&both, || project(Var::param(&a).sub(&Var::param(&b))?));
    assert_grads(&both, || project(Var::param(&a).mul(&Var::param(&b))?));
    assert_grads(&both, || project(Var::param(&a).div(&Var::param(&b))?));
    assert_grads(&both, || project(Var::weighted_sum(&[Var::param(&a), Var::param(&b)], &[0.75, 0.25])?));
}

#[test]
fn shape_ops() {
    let mut r = rng();
    let x = param("x", &[2, 3, 4], &mut r);
    let y = param("y", &[2, 1, 4], &mut r);
    assert_grads(&[x.clone()], || project(Var::param(&x).permute(&[2, 0, 1])?));
    assert_grads(&[x.clone()], || project(Var::param(&x).narrow(1, 1, 2)?.reshape(&[4, 4])?));
    assert_grads(&[x.clone(), y.clone()], || project(Var::concat(&[Var::param(&y), Var::param(&x)], 1)?));
    assert_grads(&[x.clone()], || {
        let parts = Var::param(&x).unstack()?;
        project(Var::stack(&[parts[1].clone(), parts[0].clone()])?)
    });
}

#[test]
fn conv2d_all_inputs() {
    let mut r = rng();
    let x = param("x", &[2, 3, 5, 6], &mut r);
    let k = param("k", &[4, 3, 3, 3], &mut r);
    let b = param("b", &[4], &mut r);
    let all = [x.clone(), k.clone(), b.clone()];
    for stride in [1, 2] {
        assert_grads(&all, || project(conv2d(&Var::param(&x), &Var::param(&k), Some(&Var::param(&b)), stride)?));
    }
    let k5 = param("k5", &[2, 3, 5, 5], &mut r);
    assert_grads(&[x.clone(), k5.clone()], || project(conv2d(&Var::param(&x), &Var::param(&k5), None, 1)?));
    let k1 = param("k1", &[2, 3, 1, 1], &mut r);
    assert_grads(&[x.clone(), k1.clone()], || project(conv2d(&Var::param(&x), &Var::param(&k1), None, 1)?));
}

#[test]
fn conv_transpose_all_inputs() {
    let mut r = rng();
    let x = param("x", &[2, 3, 3, 4], &mut r);
    let k = param("k", &[3, 2, 3, 3], &mut r);
    let b = param("b", &[2], &mut r);
    let all = [x.clone(), k.clone(), b.clone()];
    for stride in [1, 2] {
        assert_grads(&all, || {
            project(conv_transpose2d(&Var::param(&x), &Var::param(&k), Some(&Var::param(&b)), stride)?)
        });
    }
}

#[test]
fn batched_matmul() {
    let mut r = rng();
    let a = param("a", &[2, 3, 4], &mut r);
    let b = param("b", &[2, 4, 5], &mut r);
    let bt = param("bt", &[2, 5, 4], &mut r);
    assert_grads(&[a.clone(), b.clone()], || project(bmm(&Var::param(&a), &Var::param(&b), false)?));
    assert_grads(&[a.clone(), bt.clone()], || project(bmm(&Var::param(&a), &Var::param(&bt), true)?));
}

#[test]
fn softmax_masked_and_unmasked() {
    let mut r = rng();
    let s = param("s", &[2, 3, 3], &mut r);
    assert_grads(&[s.clone()], || project(masked_softmax(&Var::param(&s), None)?));
    assert_grads(&[s.clone()], || project(masked_softmax(&Var::param(&s), Some(causal_mask(3)))?));
}

#[test]
fn normalization() {
    let mut r = rng();
    let x = param("x", &[2, 3, 3, 4], &mut r);
    let g = param("g", &[3], &mut r);
    let b = param("b", &[3], &mut r);
    assert_grads(&[x.clone(), g.clone(), b.clone()], || {
        project(channel_norm(&Var::param(&x), &Var::param(&g), &Var::param(&b), 1e-5)?)
    });
}

#[test]
fn separable_filter() {
    let mut r = rng();
    let x = param("x", &[2, 1, 7, 6], &mut r);
    let taps = [0.2, 0.5, 0.3];
    assert_grads(&[x.clone()], || project(separable_filter_valid(&Var::param(&x), &taps)?));
}
