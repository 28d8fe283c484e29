//! Two-layer ConvLSTM bridge between the encoder tap and the decoder head.
//!
//! Layer α runs on the encoder's first-block features. Layer β runs on the
//! decoder's full-resolution mid-layer and additionally receives α's hidden
//! state of the same step in every gate.

use bivad_tensor::ops::conv2d;
use bivad_tensor::{Param, Real, Tensor, Var};
use rand::Rng;

use crate::config::{BridgeMode, ModelConfig};
use crate::error::{invalid, Result};
use crate::nn::{Conv, Module};

/// Hidden and cell state, each `[B, ch, H, W]` (or `[ch, H, W]`).
#[derive(Debug, Clone)]
pub struct LstmState<T> {
    pub h: Var<T>,
    pub c: Var<T>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { h: Var::constant(Tensor::zeros(shape)), c: Var::constant(Tensor::zeros(shape)) }
    }
}

/// Activated gates of one step.
#[derive(Debug, Clone)]
pub struct Gates<T> {
    pub forget: Var<T>,
    pub input: Var<T>,
    pub candidate: Var<T>,
    pub output: Var<T>,
}

/// One ConvLSTM layer whose gate convolutions read `inputs` stacked along
/// channels after the previous hidden state.
#[derive(Debug, Clone)]
pub struct ConvLstmCell<T> {
    pub w_forget: Conv<T>,
    pub w_input: Conv<T>,
    pub w_candidate: Conv<T>,
    pub w_output: Conv<T>,
    pub hidden: usize,
}

impl<T: Real> ConvLstmCell<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_channels: usize, hidden: usize, k: usize, rng: &mut R) -> Self {
        let gate = |g: &str, rng: &mut R| Conv::new(&format!("{name}.{g}"), in_channels, hidden, k, 1, rng);
        Self {
            w_forget: gate("w_forget", rng),
            w_input: gate("w_input", rng),
            w_candidate: gate("w_candidate", rng),
            w_output: gate("w_output", rng),
            hidden,
        }
    }

    fn in_channels(&self) -> usize {
        self.w_forget.weight.shape()[1]
    }

    /// Gate activations for `concat[h_prev, inputs...]`.
    pub fn gates(&self, h_prev: &Var<T>, inputs: &[&Var<T>]) -> Result<Gates<T>> {
        let axis = h_prev.shape().len() - 3;
        let mut parts = vec![h_prev.clone()];
        for x in inputs {
            if x.shape() != h_prev.shape() {
                return Err(invalid!("bridge input {:?} does not match state {:?}", x.shape(), h_prev.shape()));
            }
            parts.push((*x).clone());
        }
        let z = Var::concat(&parts, axis)?;
        if z.shape()[axis] != self.in_channels() {
            return Err(invalid!("gate input has {} channels, cell expects {}", z.shape()[axis], self.in_channels()));
        }
        let convs = [&self.w_forget, &self.w_input, &self.w_candidate, &self.w_output];
        let w = Var::concat(&convs.map(|c| Var::param(&c.weight)), 0)?;
        let b = Var::concat(&convs.map(|c| Var::param(&c.bias)), 0)?;
        let pre = conv2d(&z, &w, Some(&b), 1)?.chunk(axis, 4)?;
        Ok(Gates {
            forget: pre[0].sigmoid(),
            input: pre[1].sigmoid(),
            candidate: pre[2].tanh(),
            output: pre[3].sigmoid(),
        })
    }

    pub fn step(&self, state: &LstmState<T>, inputs: &[&Var<T>]) -> Result<LstmState<T>> {
        if state.c.shape() != state.h.shape() {
            return Err(invalid!("hidden {:?} and cell {:?} differ", state.h.shape(), state.c.shape()));
        }
        let g = self.gates(&state.h, inputs)?;
        let c = g.forget.mul(&state.c)?.add(&g.input.mul(&g.candidate)?)?;
        let h = g.output.mul(&c.tanh())?;
        Ok(LstmState { h, c })
    }
}

impl<T: Real> Module<T> for ConvLstmCell<T> {
    fn params(&self) -> Vec<Param<T>> {
        [&self.w_forget, &self.w_input, &self.w_candidate, &self.w_output]
            .iter()
            .flat_map(|c| c.params())
            .collect()
    }
}

/// ConvLSTM α and β of one decoding pipeline.
#[derive(Debug, Clone)]
pub struct ConvLstmBridge<T> {
    pub alpha: ConvLstmCell<T>,
    pub beta: ConvLstmCell<T>,
}

impl<T: Real> ConvLstmBridge<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (ch, k) = (cfg.ch1, cfg.bridge_kernel);
        Self {
            alpha: ConvLstmCell::new(&format!("{name}.alpha"), 2 * ch, ch, k, rng),
            beta: ConvLstmCell::new(&format!("{name}.beta"), 3 * ch, ch, k, rng),
        }
    }

    pub fn alpha_step(&self, state: &LstmState<T>, x_alpha: &Var<T>) -> Result<LstmState<T>> {
        self.alpha.step(state, &[x_alpha])
    }

    pub fn beta_step(&self, state: &LstmState<T>, h_alpha: &Var<T>, x_beta: &Var<T>) -> Result<LstmState<T>> {
        self.beta.step(state, &[h_alpha, x_beta])
    }
}

impl<T: Real> Module<T> for ConvLstmBridge<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.alpha.params();
        p.extend(self.beta.params());
        p
    }
}

/// What feeds the decoder head at each step.
#[derive(Debug, Clone)]
pub enum Bridge<T> {
    ConvLstm(ConvLstmBridge<T>),
    Residual,
    None,
}

impl<T: Real> Bridge<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        match cfg.bridge_mode {
            BridgeMode::ConvLstm => Bridge::ConvLstm(ConvLstmBridge::new(name, cfg, rng)),
            BridgeMode::Residual => Bridge::Residual,
            BridgeMode::None => Bridge::None,
        }
    }

    /// Runs the bridge over one clip from fresh zero states. Step `i`
    /// depends only on `taps[..=i]` and `mids[..=i]`.
    pub fn bridge_sequence(&self, taps: &[Var<T>], mids: &[Var<T>]) -> Result<Vec<Var<T>>> {
        if taps.len() != mids.len() {
            return Err(invalid!("{} taps for {} decoder mid-layers", taps.len(), mids.len()));
        }
        for (t, m) in taps.iter().zip(mids) {
            if t.shape() != m.shape() {
                return Err(invalid!("tap {:?} does not match mid-layer {:?}", t.shape(), m.shape()));
            }
        }
        match self {
            Bridge::None => Ok(mids.to_vec()),
            Bridge::Residual => taps.iter().zip(mids).map(|(t, m)| Ok(m.add(t)?)).collect(),
            Bridge::ConvLstm(lstm) => {
                let Some(first) = taps.first() else { return Ok(Vec::new()) };
                let mut a = LstmState::zeros(first.shape());
                let mut b = LstmState::zeros(first.shape());
                let mut out = Vec::with_capacity(taps.len());
                for (tap, mid) in taps.iter().zip(mids) {
                    a = lstm.alpha_step(&a, tap)?;
                    b = lstm.beta_step(&b, &a.h, mid)?;
                    out.push(b.h.clone());
                }
                Ok(out)
            }
        }
    }
}

impl<T: Real> Module<T> for Bridge<T> {
    fn params(&self) -> Vec<Param<T>> {
        match self {
            Bridge::ConvLstm(b) => b.params(),
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ConvLstmBridge<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { ch1: 3, bridge_kernel: 3, ..ModelConfig::micro() };
        (ConvLstmBridge::new("b", &cfg, &mut rng), rng)
    }

    fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Var<f64> {
        Var::constant(Tensor::uniform(shape, 1.0, rng))
    }

    #[test]
    fn zero_weights_zero_state_fixed_point() {
        let (b, mut rng) = setup(0);
        zero_params(&b.params());
        let s = LstmState::zeros(&[3, 4, 4]);
        let x = rand(&[3, 4, 4], &mut rng);
        let a = b.alpha_step(&s, &x).unwrap();
        assert!(a.h.value().data().iter().chain(a.c.value().data()).all(|&v| v == 0.0));
        let bb = b.beta_step(&s, &a.h, &x).unwrap();
        assert!(bb.h.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_gates_with_zero_weights() {
        let (b, mut rng) = setup(1);
        zero_params(&b.params());
        let c0 = rand(&[3, 4, 4], &mut rng);
        let s = LstmState { h: Var::constant(Tensor::zeros(&[3, 4, 4])), c: c0.clone() };
        let g = b.alpha.gates(&s.h, &[&c0]).unwrap();
        assert!(g.forget.value().data().iter().all(|&v| v == 0.5));
        let out = b.alpha_step(&s, &rand(&[3, 4, 4], &mut rng)).unwrap();
        for ((&c, &h), &c0) in out.c.value().data().iter().zip(out.h.value().data()).zip(c0.value().data()) {
            assert!((c - 0.5 * c0).abs() < 1e-12);
            assert!((h - 0.5 * (0.5 * c0).tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_ranges_hold() {
        let (b, mut rng) = setup(2);
        let h = rand(&[2, 3, 4, 4], &mut rng);
        let x = Var::constant(Tensor::uniform(&[2, 3, 4, 4], 50.0, &mut rng));
        let g = b.beta.gates(&h, &[&x, &x]).unwrap();
        for v in [&g.forget, &g.input, &g.output] {
            assert!(v.value().data().iter().all(|&u| (0.0..=1.0).contains(&u)));
        }
        assert!(g.candidate.value().data().iter().all(|&u| (-1.0..=1.0).contains(&u)));
        let s = b.alpha_step(&LstmState::zeros(&[2, 3, 4, 4]), &x).unwrap();
        assert!(s.h.value().data().iter().all(|&u| u.abs() < 1.0));
    }

    #[test]
    fn beta_reduces_to_alpha_algebra_without_alpha_slice() {
        let (b, mut rng) = setup(3);
        let ch = 3;
        let mut zeroed = b.beta.clone();
        let mut reduced = ConvLstmCell::<f64>::new("r", 2 * ch, ch, 3, &mut rng);
        for (full, small, fresh) in [
            (&b.beta.w_forget, &mut reduced.w_forget, &mut zeroed.w_forget),
            (&b.beta.w_input, &mut reduced.w_input, &mut zeroed.w_input),
            (&b.beta.w_candidate, &mut reduced.w_candidate, &mut zeroed.w_candidate),
            (&b.beta.w_output, &mut reduced.w_output, &mut zeroed.w_output),
        ] {
            let w = full.weight.value();
            let h_part = w.narrow(1, 0, ch).unwrap();
            let x_part = w.narrow(1, 2 * ch, ch).unwrap();
            let z = Tensor::zeros(h_part.shape());
            fresh.weight = Param::new("z", Tensor::concat(&[&h_part, &z, &x_part], 1).unwrap());
            fresh.bias = full.bias.clone();
            small.weight = Param::new("s", Tensor::concat(&[&h_part, &x_part], 1).unwrap());
            small.bias = full.bias.clone();
        }
        let state = LstmState { h: rand(&[ch, 4, 4], &mut rng), c: rand(&[ch, 4, 4], &mut rng) };
        let (ha, xb) = (rand(&[ch, 4, 4], &mut rng), rand(&[ch, 4, 4], &mut rng));
        let got = zeroed.step(&state, &[&ha, &xb]).unwrap();
        let expect = reduced.step(&state, &[&xb]).unwrap();
        for (a, e) in got.h.value().data().iter().zip(expect.h.value().data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_is_sensitive_to_alpha_hidden() {
        let (b, mut rng) = setup(4);
        let state = LstmState::zeros(&[3, 4, 4]);
        let ha = rand(&[3, 4, 4], &mut rng);
        let xb = rand(&[3, 4, 4], &mut rng);
        let base = b.beta_step(&state, &ha, &xb).unwrap();
        let nudged = Var::constant(ha.value().map(|v| v + 1e-4));
        let moved = b.beta_step(&state, &nudged, &xb).unwrap();
        let diff = base.h.value().sub(moved.h.value()).unwrap().max_abs();
        assert!(diff > 1e-9);
    }

    #[test]
    fn sequence_matches_single_steps_and_is_causal() {
        let (b, mut rng) = setup(5);
        let bridge = Bridge::ConvLstm(b.clone());
        let taps: Vec<_> = (0..3).map(|_| rand(&[3, 4, 4], &mut rng)).collect();
        let mids: Vec<_> = (0..3).map(|_| rand(&[3, 4, 4], &mut rng)).collect();
        let out = bridge.bridge_sequence(&taps, &mids).unwrap();
        let zero = LstmState::zeros(&[3, 4, 4]);
        let a = b.alpha_step(&zero, &taps[0]).unwrap();
        let first = b.beta_step(&zero, &a.h, &mids[0]).unwrap();
        assert_eq!(out[0].value(), first.h.value());
        let single = bridge.bridge_sequence(&taps[..1], &mids[..1]).unwrap();
        assert_eq!(single[0].value(), first.h.value());

        let mut taps2 = taps.clone();
        let mut mids2 = mids.clone();
        taps2[2] = rand(&[3, 4, 4], &mut rng);
        mids2[1] = rand(&[3, 4, 4], &mut rng);
        let out2 = bridge.bridge_sequence(&taps2, &mids2).unwrap();
        assert_eq!(out2[0].value(), out[0].value());
        assert_ne!(out2[1].value(), out[1].value());
    }

    #[test]
    fn residual_and_none_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let taps = vec![rand(&[2, 4, 4], &mut rng)];
        let mids = vec![rand(&[2, 4, 4], &mut rng)];
        let r = Bridge::<f64>::Residual.bridge_sequence(&taps, &mids).unwrap();
        assert_eq!(r[0].value(), &taps[0].value().add(mids[0].value()).unwrap());
        let n = Bridge::<f64>::None.bridge_sequence(&taps, &mids).unwrap();
        assert_eq!(n[0].value(), mids[0].value());
        assert!(Bridge::<f64>::None.bridge_sequence(&taps, &[]).is_err());
    }

    #[test]
    fn full_scale_state_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ModelConfig::full();
        let bridge = Bridge::<f32>::new("b", &cfg, &mut rng);
        let tap = Var::constant(Tensor::uniform(&[16, 256, 256], 1.0, &mut rng));
        let out = bridge.bridge_sequence(&[tap.clone()], &[tap]).unwrap();
        assert_eq!(out[0].shape(), &[16, 256, 256]);
    }
}
