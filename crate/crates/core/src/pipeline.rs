//! Clip slicing, the full bi-directional model, prediction fusion, and
//! checkpoints.

use std::collections::HashMap;
use std::path::Path;

use bivad_tensor::io::{load_archive, save_archive};
use bivad_tensor::{Param, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bridge::Bridge;
use crate::codec::{SpatialDecoder, SpatialEncoder};
use crate::config::{DirectionMode, ModelConfig};
use crate::convttrans::{ContextKnowledge, TransformerDecoder, TransformerEncoder};
use crate::error::{invalid, Error, Result};
use crate::nn::Module;

/// `2n + 1` frames sampled every `stride` frames around a center `t`.
#[derive(Debug, Clone)]
pub struct ClipSample<T> {
    /// Frames `[C,H,W]` in ascending time order.
    pub frames: Vec<Tensor<T>>,
    pub source_indices: Vec<usize>,
    pub n: usize,
    pub m: usize,
}

impl<T: Real> ClipSample<T> {
    pub fn center(&self) -> usize {
        self.source_indices[self.n]
    }

    /// Positions within the clip of the earlier context frames.
    pub fn context_pre(&self) -> Vec<usize> {
        (0..self.n - self.m).collect()
    }

    pub fn context_post(&self) -> Vec<usize> {
        (self.n + self.m + 1..=2 * self.n).collect()
    }

    /// Decoder inputs of the forward pipeline, ascending.
    pub fn forward_target(&self) -> Vec<usize> {
        (self.n - self.m - 1..self.n + self.m).collect()
    }

    /// Decoder inputs of the backward pipeline, descending.
    pub fn backward_target(&self) -> Vec<usize> {
        (self.n - self.m + 1..=self.n + self.m + 1).rev().collect()
    }

    /// Positions of the predicted frames, ascending.
    pub fn predicted(&self) -> Vec<usize> {
        (self.n - self.m..=self.n + self.m).collect()
    }

    pub fn stacked(&self) -> Result<Tensor<T>> {
        stack_clips(&[self])
    }
}

/// All clips with a full margin, one per admissible center, in order.
pub fn slice_clips<T: Real>(video: &[Tensor<T>], stride: usize, n: usize, m: usize) -> Vec<ClipSample<T>> {
    clip_centers(video.len(), stride, n)
        .map(|t| {
            let source_indices: Vec<usize> = (0..=2 * n).map(|i| t + i * stride - n * stride).collect();
            ClipSample {
                frames: source_indices.iter().map(|&i| video[i].clone()).collect(),
                source_indices,
                n,
                m,
            }
        })
        .collect()
}

/// Centers `t` with `t - n*stride >= 0` and `t + n*stride < len`.
pub fn clip_centers(len: usize, stride: usize, n: usize) -> std::ops::Range<usize> {
    let margin = n * stride;
    if len < 2 * margin + 1 {
        return 0..0;
    }
    margin..len - margin
}

/// Stacks clips into `[B, L, C, H, W]`.
pub fn stack_clips<T: Real>(clips: &[&ClipSample<T>]) -> Result<Tensor<T>> {
    let first = clips.first().ok_or_else(|| invalid!("no clips to stack"))?;
    let frame_shape = first.frames[0].shape().to_vec();
    let mut data = Vec::with_capacity(clips.len() * first.frames.len() * first.frames[0].numel());
    for clip in clips {
        if clip.frames.len() != first.frames.len() {
            return Err(invalid!("clips of different lengths"));
        }
        for f in &clip.frames {
            if f.shape() != frame_shape.as_slice() {
                return Err(invalid!("frame {:?} differs from {:?}", f.shape(), frame_shape));
            }
            data.extend_from_slice(f.data());
        }
    }
    let mut shape = vec![clips.len(), first.frames.len()];
    shape.extend(frame_shape);
    Ok(Tensor::new(&shape, data)?)
}

/// Predictions for the `2m + 1` middle frames, each `[B, C, H, W]`, in
/// ascending time order.
#[derive(Debug, Clone)]
pub struct PredictionBundle<T> {
    pub forward: Option<Vec<Var<T>>>,
    pub backward: Option<Vec<Var<T>>>,
    pub fused: Vec<Var<T>>,
}

/// `eta * forward + (1 - eta) * backward`, elementwise per frame.
pub fn fuse<T: Real>(forward: &[Var<T>], backward: &[Var<T>], eta: f64) -> Result<Vec<Var<T>>> {
    if forward.len() != backward.len() {
        return Err(invalid!("{} forward vs {} backward predictions", forward.len(), backward.len()));
    }
    forward
        .iter()
        .zip(backward)
        .map(|(f, b)| {
            if f.shape() != b.shape() {
                return Err(invalid!("prediction shapes {:?} and {:?} differ", f.shape(), b.shape()));
            }
            Ok(Var::weighted_sum(&[f.clone(), b.clone()], &[eta, 1.0 - eta])?)
        })
        .collect()
}

/// Encoder outputs for every frame of a batch of clips.
#[derive(Debug, Clone)]
pub struct EncodedClips<T> {
    /// `[B, L, ch_feat, H/4, W/4]`.
    pub features: Var<T>,
    /// `[B, L, ch1, H, W]`.
    pub taps: Var<T>,
}

fn select_frames<T: Real>(seq: &Var<T>, positions: &[usize]) -> Result<Var<T>> {
    let parts: Result<Vec<_>> = positions.iter().map(|&p| Ok(seq.narrow(1, p, 1)?)).collect();
    Ok(Var::concat(&parts?, 1)?)
}

fn frame_at<T: Real>(seq: &Var<T>, position: usize) -> Result<Var<T>> {
    let mut shape = seq.shape().to_vec();
    shape.remove(1);
    Ok(seq.narrow(1, position, 1)?.reshape(&shape)?)
}

/// Transformer decoder plus bridge owned by one direction.
#[derive(Debug, Clone)]
pub struct DecodingPipeline<T> {
    pub transformer: TransformerDecoder<T>,
    pub bridge: Bridge<T>,
}

impl<T: Real> Module<T> for DecodingPipeline<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.transformer.params();
        p.extend(self.bridge.params());
        p
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoder: SpatialEncoder<T>,
    pub decoder: SpatialDecoder<T>,
    pub context_encoder: TransformerEncoder<T>,
    pub forward: DecodingPipeline<T>,
    pub backward: DecodingPipeline<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let pipeline = |dir: &str, rng: &mut ChaCha8Rng| DecodingPipeline {
            transformer: TransformerDecoder::new(&format!("convttrans.{dir}_decoder"), config, rng),
            bridge: Bridge::new(&format!("bridge.{dir}"), config, rng),
        };
        Ok(Self {
            config: config.clone(),
            encoder: SpatialEncoder::new(config, rng),
            decoder: SpatialDecoder::new(config, rng),
            context_encoder: TransformerEncoder::new("convttrans.encoder", config, rng),
            forward: pipeline("forward", rng),
            backward: pipeline("backward", rng),
        })
    }

    /// Parameters that receive gradient under the configured direction mode.
    pub fn active_params(&self) -> Vec<Param<T>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.context_encoder.params());
        let mode = self.config.direction_mode;
        if mode != DirectionMode::BackwardOnly {
            p.extend(self.forward.params());
        }
        if mode != DirectionMode::ForwardOnly {
            p.extend(self.backward.params());
        }
        p
    }

    /// Encodes every frame of `clips` (`[B, L, C, H, W]`).
    pub fn encode_clips(&self, clips: &Tensor<T>) -> Result<EncodedClips<T>> {
        let &[b, l, c, h, w] = clips.shape() else {
            return Err(invalid!("expected clips [B,L,C,H,W], got {:?}", clips.shape()));
        };
        if l != self.config.clip_len() || c != self.config.channels {
            return Err(invalid!(
                "clips of {l} frames x {c} channels, model expects {} x {}",
                self.config.clip_len(),
                self.config.channels
            ));
        }
        let frames = Var::constant(clips.reshape(&[b * l, c, h, w])?);
        let enc = self.encoder.encode_frame(&frames)?;
        let f = enc.features.shape().to_vec();
        Ok(EncodedClips {
            features: enc.features.reshape(&[b, l, f[1], f[2], f[3]])?,
            taps: enc.tap.reshape(&[b, l, self.config.ch1, h, w])?,
        })
    }

    /// Encodes both context clips jointly, in temporal order.
    pub fn context_knowledge(&self, enc: &EncodedClips<T>) -> Result<ContextKnowledge<T>> {
        let (n, m) = (self.config.n, self.config.m);
        let positions: Vec<usize> = (0..n - m).chain(n + m + 1..=2 * n).collect();
        self.context_encoder.encoder_forward(&select_frames(&enc.features, &positions)?)
    }

    fn run_pipeline(
        &self,
        pipe: &DecodingPipeline<T>,
        enc: &EncodedClips<T>,
        ctx: &ContextKnowledge<T>,
        inputs: &[usize],
    ) -> Result<Vec<Var<T>>> {
        let targets = select_frames(&enc.features, inputs)?;
        let o = pipe.transformer.decoder_step_sequence(&targets, ctx)?;
        let [b, t, f, h4, w4] = <[usize; 5]>::try_from(o.shape()).map_err(|_| invalid!("bad decoder output"))?;
        let mids = self.decoder.upsample(&o.reshape(&[b * t, f, h4, w4])?)?;
        let ms = mids.shape().to_vec();
        let mids = mids.reshape(&[b, t, ms[1], ms[2], ms[3]])?;
        let mut mid_steps = Vec::with_capacity(t);
        let mut tap_steps = Vec::with_capacity(t);
        for (step, &pos) in inputs.iter().enumerate() {
            mid_steps.push(frame_at(&mids, step)?);
            tap_steps.push(frame_at(&enc.taps, pos)?);
        }
        let hidden = pipe.bridge.bridge_sequence(&tap_steps, &mid_steps)?;
        hidden.iter().map(|h| self.decoder.head(h)).collect()
    }

    /// Predictions for the middle frames, ascending.
    pub fn run_forward_pipeline(&self, enc: &EncodedClips<T>, ctx: &ContextKnowledge<T>) -> Result<Vec<Var<T>>> {
        let (n, m) = (self.config.n, self.config.m);
        let inputs: Vec<usize> = (n - m - 1..n + m).collect();
        self.run_pipeline(&self.forward, enc, ctx, &inputs)
    }

    /// Predictions for the middle frames in the backward pipeline's own
    /// (descending) order.
    pub fn run_backward_pipeline(&self, enc: &EncodedClips<T>, ctx: &ContextKnowledge<T>) -> Result<Vec<Var<T>>> {
        let (n, m) = (self.config.n, self.config.m);
        let inputs: Vec<usize> = (n - m + 1..=n + m + 1).rev().collect();
        self.run_pipeline(&self.backward, enc, ctx, &inputs)
    }

    pub fn model_forward(&self, clips: &Tensor<T>) -> Result<PredictionBundle<T>> {
        let enc = self.encode_clips(clips)?;
        let ctx = self.context_knowledge(&enc)?;
        let mode = self.config.direction_mode;
        let forward = match mode {
            DirectionMode::BackwardOnly => None,
            _ => Some(self.run_forward_pipeline(&enc, &ctx)?),
        };
        let backward = match mode {
            DirectionMode::ForwardOnly => None,
            _ => {
                let mut b = self.run_backward_pipeline(&enc, &ctx)?;
                b.reverse();
                Some(b)
            }
        };
        let fused = match (&forward, &backward) {
            (Some(f), Some(b)) => fuse(f, b, self.config.eta)?,
            (Some(f), None) => f.clone(),
            (None, Some(b)) => b.clone(),
            (None, None) => unreachable!("at least one direction runs"),
        };
        Ok(PredictionBundle { forward, backward, fused })
    }

    /// Every parameter (both pipelines), in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.params().iter().map(|p| (p.name().to_string(), p.value())).collect()
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let entries: Vec<(String, Tensor<f32>)> =
            self.named_tensors().into_iter().map(|(n, t)| (n, t.cast())).collect();
        Ok(save_archive(path, &entries)?)
    }

    /// Loads values saved by [`Model::save_checkpoint`]. Every parameter must
    /// be present with its exact shape, and no extra entries may appear.
    pub fn load_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let entries = load_archive::<f32>(path)?;
        let params = self.params();
        if entries.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model has {} parameters",
                entries.len(),
                params.len()
            )));
        }
        let mut by_name: HashMap<&str, &Tensor<f32>> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &params {
            let t = by_name
                .remove(p.name())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name())))?;
            if t.shape() != p.shape().as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?} in checkpoint, {:?} in model",
                    p.name(),
                    t.shape(),
                    p.shape()
                )));
            }
        }
        let lookup: HashMap<&str, &Tensor<f32>> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &params {
            p.set_value(lookup[p.name()].cast())?;
        }
        Ok(())
    }
}

impl<T: Real> Module<T> for Model<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.context_encoder.params());
        p.extend(self.forward.params());
        p.extend(self.backward.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bivad_tensor::no_grad;
    use rand::Rng;

    fn video(len: usize) -> Vec<Tensor<f64>> {
        (0..len).map(|i| Tensor::full(&[1, 8, 8], i as f64)).collect()
    }

    fn random_clips(b: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::uniform(&[b, 9, 1, 8, 8], 1.0, rng)
    }

    #[test]
    fn clip_layout() {
        let clips = slice_clips(&video(25), 3, 4, 1);
        assert_eq!(clips.len(), 1);
        let c = &clips[0];
        assert_eq!(c.source_indices, vec![0, 3, 6, 9, 12, 15, 18, 21, 24]);
        assert_eq!(c.center(), 12);
        assert_eq!(c.context_pre(), vec![0, 1, 2]);
        assert_eq!(c.context_post(), vec![6, 7, 8]);
        assert_eq!(c.forward_target(), vec![2, 3, 4]);
        assert_eq!(c.backward_target(), vec![6, 5, 4]);
        assert_eq!(c.predicted(), vec![3, 4, 5]);
        assert_eq!(c.forward_target()[0], *c.context_pre().last().unwrap());
        assert_eq!(c.backward_target()[0], c.context_post()[0]);
        assert_eq!(c.frames[4].data()[0], 12.0);
    }

    #[test]
    fn clip_counts() {
        assert!(slice_clips(&video(24), 3, 4, 1).is_empty());
        let centers: Vec<usize> = slice_clips(&video(31), 3, 4, 1).iter().map(|c| c.center()).collect();
        assert_eq!(centers, (12..=18).collect::<Vec<_>>());
        assert_eq!(slice_clips(&video(100), 3, 4, 1).len(), 76);
    }

    #[test]
    fn fuse_examples() {
        let ones = vec![Var::constant(Tensor::<f64>::ones(&[2, 2]))];
        let zeros = vec![Var::constant(Tensor::<f64>::zeros(&[2, 2]))];
        assert_eq!(fuse(&ones, &zeros, 1.0).unwrap()[0].value(), ones[0].value());
        assert_eq!(fuse(&ones, &zeros, 0.0).unwrap()[0].value(), zeros[0].value());
        assert!(fuse(&ones, &zeros, 0.75).unwrap()[0].value().data().iter().all(|&v| v == 0.75));
        assert!(fuse(&ones, &[], 0.5).is_err());
        let other = vec![Var::constant(Tensor::<f64>::zeros(&[3]))];
        assert!(fuse(&ones, &other, 0.5).is_err());
    }

    #[test]
    fn bundle_shapes_and_determinism() {
        let model = Model::<f64>::new(&ModelConfig::micro(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clips = random_clips(2, &mut rng);
        let _g = no_grad();
        let a = model.model_forward(&clips).unwrap();
        let b = model.model_forward(&clips).unwrap();
        assert_eq!(a.fused.len(), 3);
        assert_eq!(a.forward.as_ref().unwrap().len(), 3);
        assert_eq!(a.backward.as_ref().unwrap().len(), 3);
        for (x, y) in a.fused.iter().zip(&b.fused) {
            assert_eq!(x.shape(), &[2, 1, 8, 8]);
            assert_eq!(x.value(), y.value());
        }
    }

    #[test]
    fn forward_only_matches_eta_one() {
        let mut cfg = ModelConfig::micro();
        cfg.eta = 1.0;
        let bi = Model::<f64>::new(&cfg, 3).unwrap();
        let mut uni = bi.clone();
        uni.config.direction_mode = DirectionMode::ForwardOnly;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clips = random_clips(1, &mut rng);
        let _g = no_grad();
        let a = bi.model_forward(&clips).unwrap();
        let b = uni.model_forward(&clips).unwrap();
        assert!(b.backward.is_none());
        for (x, y) in a.fused.iter().zip(&b.fused) {
            assert!(x.value().sub(y.value()).unwrap().max_abs() <= 1e-6);
        }
    }

    #[test]
    fn forward_pipeline_is_causal() {
        let model = Model::<f64>::new(&ModelConfig::micro(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let clips = random_clips(1, &mut rng);
        let mut bumped = clips.clone();
        let plane = 64;
        for v in &mut bumped.data_mut()[4 * plane..5 * plane] {
            *v = rng.gen_range(-1.0..1.0);
        }
        let _g = no_grad();
        let run = |c: &Tensor<f64>| {
            let enc = model.encode_clips(c).unwrap();
            let ctx = model.context_knowledge(&enc).unwrap();
            model.run_forward_pipeline(&enc, &ctx).unwrap()
        };
        let (a, b) = (run(&clips), run(&bumped));
        assert_eq!(a[0].value(), b[0].value());
        assert_eq!(a[1].value(), b[1].value());
        assert_ne!(a[2].value(), b[2].value());
    }

    #[test]
    fn backward_mirrors_forward_on_palindrome() {
        let model = Model::<f64>::new(&ModelConfig::micro(), 7).unwrap();
        for (f, b) in model.forward.params().iter().zip(model.backward.params()) {
            b.set_value(f.value()).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let half: Vec<Tensor<f64>> = (0..5).map(|_| Tensor::uniform(&[1, 8, 8], 1.0, &mut rng)).collect();
        let frames: Vec<Tensor<f64>> = (0..9).map(|i| half[i.min(8 - i)].clone()).collect();
        let clip = ClipSample { frames, source_indices: (0..9).collect(), n: 4, m: 1 };
        let _g = no_grad();
        let enc = model.encode_clips(&clip.stacked().unwrap()).unwrap();
        let ctx = model.context_knowledge(&enc).unwrap();
        let fwd = model.run_forward_pipeline(&enc, &ctx).unwrap();
        let bwd = model.run_backward_pipeline(&enc, &ctx).unwrap();
        for (f, b) in fwd.iter().zip(&bwd) {
            assert!(f.value().sub(b.value()).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn shared_codec_and_disjoint_pipelines() {
        let model = Model::<f32>::new(&ModelConfig::micro(), 9).unwrap();
        let fp = model.forward.params();
        let bp = model.backward.params();
        assert_eq!(model.forward.num_params(), model.backward.num_params());
        assert!(fp.iter().all(|f| !bp.iter().any(|b| b.same(f))));
        let all = model.params();
        let enc = model.encoder.params();
        assert!(enc.iter().all(|e| all.iter().filter(|p| p.same(e)).count() == 1));
        let names: std::collections::HashSet<&str> = all.iter().map(|p| p.name()).collect();
        assert_eq!(names.len(), all.len());
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = Model::<f32>::new(&ModelConfig::micro(), 10).unwrap();
        a.save_checkpoint(&path).unwrap();
        let b = Model::<f32>::new(&ModelConfig::micro(), 11).unwrap();
        b.load_checkpoint(&path).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.value(), y.value());
        }
        let mut cfg = ModelConfig::micro();
        cfg.ffn_hidden = 4;
        let c = Model::<f32>::new(&cfg, 0).unwrap();
        assert!(matches!(c.load_checkpoint(&path), Err(Error::Format(_))));
        cfg = ModelConfig::micro();
        cfg.bridge_mode = crate::config::BridgeMode::Residual;
        let d = Model::<f32>::new(&cfg, 0).unwrap();
        assert!(matches!(d.load_checkpoint(&path), Err(Error::Format(_))));
    }
}
