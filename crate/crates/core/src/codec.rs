//! Per-frame spatial encoder and decoder.
//!
//! The encoder is three conv blocks (stride 1, 2, 2); its first block output
//! is the full-resolution tap consumed by the ConvLSTM bridge. The decoder
//! mirrors it with two stride-2 transposed convolutions and a `tanh` head.

use bivad_tensor::ops::Activation;
use bivad_tensor::{Param, Real, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::nn::{Conv, ConvTranspose, Module};

#[derive(Debug, Clone)]
pub struct SpatialEncoder<T> {
    pub block1: Conv<T>,
    pub block2: Conv<T>,
    pub block3: Conv<T>,
    act: Activation,
}

/// Output of [`SpatialEncoder::encode_frame`].
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    /// First-block activation at input resolution.
    pub tap: Var<T>,
    /// Quarter-resolution feature map.
    pub features: Var<T>,
}

impl<T: Real> SpatialEncoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let k = cfg.codec_kernel;
        Self {
            block1: Conv::new("encoder.block1", cfg.channels, cfg.ch1, k, 1, rng),
            block2: Conv::new("encoder.block2", cfg.ch1, cfg.ch2, k, 2, rng),
            block3: Conv::new("encoder.block3", cfg.ch2, cfg.ch_feat, k, 2, rng),
            act: Activation::LeakyRelu(cfg.leaky_slope),
        }
    }

    /// Encodes `[C,H,W]` or a batch `[N,C,H,W]`; frames are independent.
    pub fn encode_frame(&self, frame: &Var<T>) -> Result<Encoded<T>> {
        let shape = frame.shape();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(invalid!("frame extent {h}x{w} not divisible by 4"));
        }
        let tap = self.block1.forward(frame)?.leaky_relu(slope(self.act));
        let mid = self.block2.forward(&tap)?.leaky_relu(slope(self.act));
        let features = self.block3.forward(&mid)?.leaky_relu(slope(self.act));
        Ok(Encoded { tap, features })
    }
}

fn slope(act: Activation) -> f64 {
    match act {
        Activation::LeakyRelu(s) => s,
        _ => 0.2,
    }
}

impl<T: Real> Module<T> for SpatialEncoder<T> {
    fn params(&self) -> Vec<Param<T>> {
        [&self.block1, &self.block2, &self.block3].iter().flat_map(|c| c.params()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SpatialDecoder<T> {
    pub up1: ConvTranspose<T>,
    pub up2: ConvTranspose<T>,
    pub head: Conv<T>,
    slope: f64,
}

impl<T: Real> SpatialDecoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let k = cfg.codec_kernel;
        Self {
            up1: ConvTranspose::new("decoder.up1", cfg.ch_feat, cfg.ch2, k, 2, rng),
            up2: ConvTranspose::new("decoder.up2", cfg.ch2, cfg.ch1, k, 2, rng),
            head: Conv::new("decoder.head", cfg.ch1, cfg.channels, k, 1, rng),
            slope: cfg.leaky_slope,
        }
    }

    /// Transformer output to the full-resolution mid-layer (the bridge's
    /// decoder-side input).
    pub fn upsample(&self, o: &Var<T>) -> Result<Var<T>> {
        let x = self.up1.forward(o)?.leaky_relu(self.slope);
        Ok(self.up2.forward(&x)?.leaky_relu(self.slope))
    }

    /// Final layer: refined mid-layer features to a frame in (-1, 1).
    pub fn head(&self, hidden: &Var<T>) -> Result<Var<T>> {
        Ok(self.head.forward(hidden)?.tanh())
    }

    /// Full decode of `o` where the bridge output replaces the mid-layer at
    /// the head. `bridge_hidden` must have the mid-layer's shape.
    pub fn decode_features(&self, o: &Var<T>, bridge_hidden: &Var<T>) -> Result<Var<T>> {
        let mid = self.upsample(o)?;
        if mid.shape() != bridge_hidden.shape() {
            return Err(invalid!(
                "bridge hidden {:?} does not match decoder mid-layer {:?}",
                bridge_hidden.shape(),
                mid.shape()
            ));
        }
        self.head(bridge_hidden)
    }
}

impl<T: Real> Module<T> for SpatialDecoder<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.up1.params();
        p.extend(self.up2.params());
        p.extend(self.head.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;
    use bivad_tensor::{no_grad, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_small() -> ModelConfig {
        ModelConfig { ch1: 8, ch2: 12, ch_feat: 16, ..ModelConfig::desk() }
    }

    #[test]
    fn desk_shapes() {
        let cfg = desk_small();
        let enc = SpatialEncoder::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Var::constant(Tensor::zeros(&[1, 64, 64]));
        let e = enc.encode_frame(&x).unwrap();
        assert_eq!(e.tap.shape(), &[8, 64, 64]);
        assert_eq!(e.features.shape(), &[16, 16, 16]);
    }

    #[test]
    fn zero_frame_zero_weights() {
        let cfg = desk_small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = SpatialEncoder::<f32>::new(&cfg, &mut rng);
        let dec = SpatialDecoder::<f32>::new(&cfg, &mut rng);
        zero_params(&enc.params());
        zero_params(&dec.params());
        let _g = no_grad();
        let e = enc.encode_frame(&Var::constant(Tensor::zeros(&[1, 64, 64]))).unwrap();
        assert!(e.tap.value().data().iter().chain(e.features.value().data()).all(|&v| v == 0.0));
        let y = dec.decode_features(&e.features, &e.tap).unwrap();
        assert_eq!(y.shape(), &[1, 64, 64]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_extent() {
        let enc = SpatialEncoder::<f32>::new(&desk_small(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(enc.encode_frame(&Var::constant(Tensor::zeros(&[1, 30, 32]))).is_err());
    }

    #[test]
    fn decode_rejects_bad_hidden() {
        let cfg = desk_small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = SpatialDecoder::<f32>::new(&cfg, &mut rng);
        let o = Var::constant(Tensor::zeros(&[16, 16, 16]));
        assert!(dec.decode_features(&o, &Var::constant(Tensor::zeros(&[8, 32, 32]))).is_err());
    }

    #[test]
    fn output_bounded() {
        let cfg = desk_small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = SpatialEncoder::<f32>::new(&cfg, &mut rng);
        let dec = SpatialDecoder::<f32>::new(&cfg, &mut rng);
        let x = Var::constant(Tensor::uniform(&[2, 1, 64, 64], 1.0, &mut rng));
        let e = enc.encode_frame(&x).unwrap();
        let y = dec.decode_features(&e.features, &e.tap).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.value().data().iter().all(|v| v.abs() < 1.0));
    }
}
