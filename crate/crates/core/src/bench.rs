//! Per-frame inference timing and structural latency.

use std::time::Instant;

use bivad_tensor::{no_grad, Tensor};

use crate::config::BenchConfig;
use crate::error::{invalid, Result};
use crate::objective::{anomaly_score, GaussianWindow};
use crate::pipeline::{slice_clips, stack_clips, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub frames: usize,
    pub warmup: usize,
    pub ms_per_frame: f64,
    pub median_ms: f64,
    pub fps: f64,
    /// Frames the detector must wait before a frame can be scored.
    pub latency_frames: usize,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        format!(
            "frames={}\nwarmup={}\nms_per_frame={:.4}\nmedian_ms={:.4}\nfps={:.3}\nlatency_frames={}\n",
            self.frames, self.warmup, self.ms_per_frame, self.median_ms, self.fps, self.latency_frames
        )
    }
}

/// Scores frames one clip at a time, cycling over the video's clips, and
/// times `cfg.frames` of them after `cfg.warmup` untimed ones.
pub fn bench_model(model: &Model<f32>, video: &[Tensor<f32>], cfg: &BenchConfig) -> Result<BenchReport> {
    let mc = &model.config;
    let clips = slice_clips(video, mc.stride, mc.n, mc.m);
    if clips.is_empty() || cfg.frames == 0 {
        return Err(invalid!("benchmark needs at least one full clip and one timed frame"));
    }
    let window = GaussianWindow::from_config(mc)?;
    let _g = no_grad();
    let mut times = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.warmup + cfg.frames {
        let clip = &clips[i % clips.len()];
        let started = Instant::now();
        let bundle = model.model_forward(&stack_clips(&[clip])?)?;
        let pred = bundle.fused[mc.m].value().reshape(clip.frames[clip.n].shape())?;
        let score = anomaly_score(&clip.frames[clip.n], &pred, &window, mc.lambda)?;
        let elapsed = started.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(score);
        if i >= cfg.warmup {
            times.push(elapsed);
        }
    }
    let total: f64 = times.iter().sum();
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let ms_per_frame = total / times.len() as f64;
    Ok(BenchReport {
        frames: times.len(),
        warmup: cfg.warmup,
        ms_per_frame,
        median_ms: sorted[sorted.len() / 2],
        fps: 1e3 / ms_per_frame,
        latency_frames: mc.latency_frames(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn counts_and_latency() {
        let model = Model::<f32>::new(&ModelConfig::micro(), 0).unwrap();
        let video: Vec<Tensor<f32>> = (0..30).map(|i| Tensor::full(&[1, 8, 8], (i as f32 / 30.0) - 0.5)).collect();
        let r = bench_model(&model, &video, &BenchConfig { frames: 20, warmup: 3 }).unwrap();
        assert_eq!(r.frames, 20);
        assert_eq!(r.latency_frames, 12);
        assert!(r.ms_per_frame > 0.0 && r.fps > 0.0);
        assert!(bench_model(&model, &video[..24], &BenchConfig::default()).is_err());
    }
}
