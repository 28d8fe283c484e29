//! One-class training loop: Adam, plateau learning-rate decay, early
//! stopping on validation loss, and best-checkpoint tracking.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use bivad_tensor::{adam_step, no_grad, AdamConfig, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, RunConfig};
use crate::data::{preprocess, split_train_val, VideoSource};
use crate::error::{Error, Result};
use crate::objective::{combined_loss, GaussianWindow};
use crate::pipeline::{slice_clips, stack_clips, ClipSample, Model};

/// Preprocesses every frame of a video to the model's size and range.
pub fn prepare_frames(video: &VideoSource, cfg: &ModelConfig) -> Result<Vec<Tensor<f32>>> {
    video.frames.iter().map(|f| preprocess(f, cfg.image_size, cfg.channels)).collect()
}

/// Every full-margin clip of every video.
pub fn collect_clips(videos: &[Vec<Tensor<f32>>], cfg: &ModelConfig) -> Vec<ClipSample<f32>> {
    videos.iter().flat_map(|v| slice_clips(v, cfg.stride, cfg.n, cfg.m)).collect()
}

/// Halves (by `decay`) the learning rate after `patience` epochs without
/// improvement of the monitored loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub decay: f64,
    pub patience: usize,
    best: f64,
    stagnant: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, decay: f64, patience: usize) -> Self {
        Self { lr, decay, patience, best: f64::INFINITY, stagnant: 0 }
    }

    /// Records one epoch's loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
            if self.stagnant >= self.patience {
                self.lr *= self.decay;
                self.stagnant = 0;
            }
        }
        self.lr
    }
}

/// Stops after `patience` epochs without a new best loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Best validation loss (model fit level).
    pub mfl: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
    pub train_clips: usize,
    pub val_clips: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.8},{:.8},{:.8},{:.3}", e.epoch, e.train_loss, e.val_loss, e.lr, e.seconds);
        }
        s
    }
}

/// Mean combined loss over the fused predictions of a batch.
pub fn batch_loss<T: Real>(model: &Model<T>, batch: &Tensor<T>, window: &GaussianWindow) -> Result<Var<T>> {
    let cfg = &model.config;
    let bundle = model.model_forward(batch)?;
    let (b, c, h, w) = (batch.shape()[0], batch.shape()[2], batch.shape()[3], batch.shape()[4]);
    let first = cfg.n - cfg.m;
    let mut total: Option<Var<T>> = None;
    for (i, pred) in bundle.fused.iter().enumerate() {
        let target = Var::constant(batch.narrow(1, first + i, 1)?.reshape(&[b, c, h, w])?);
        let l = combined_loss(pred, &target, window, cfg.lambda)?.total;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no predictions".into()))?;
    Ok(total.scale(1.0 / bundle.fused.len() as f64))
}

/// Mean validation loss without building a graph.
pub fn evaluate_loss(model: &Model<f32>, clips: &[&ClipSample<f32>], batch_size: usize, window: &GaussianWindow) -> Result<f64> {
    let _g = no_grad();
    let mut sum = 0.0;
    for chunk in clips.chunks(batch_size) {
        let batch = stack_clips(chunk)?;
        sum += batch_loss(model, &batch, window)?.value().item() as f64 * chunk.len() as f64;
    }
    Ok(sum / clips.len().max(1) as f64)
}

/// Trains `model` on the clips of `videos`, writing the best checkpoint and
/// a CSV log to `out_dir`. `on_epoch` sees each epoch's record as it ends.
pub fn train_model(
    model: &Model<f32>,
    videos: &[Vec<Tensor<f32>>],
    run: &RunConfig,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    let tc = &run.train;
    let clips = collect_clips(videos, &model.config);
    if clips.len() < 2 {
        return Err(Error::Config(format!("training data yields {} clips; need at least 2", clips.len())));
    }
    let refs: Vec<&ClipSample<f32>> = clips.iter().collect();
    let (train, mut val) = split_train_val(refs, tc.val_fraction, run.seed)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("train/validation split left an empty side".into()));
    }
    if let Some(cap) = tc.max_val_clips {
        val.truncate(cap.max(1));
    }
    fs::create_dir_all(out_dir)?;
    let checkpoint = run.checkpoint_path();
    let window = GaussianWindow::from_config(&model.config)?;
    let params = model.active_params();
    let mut schedule = PlateauSchedule::new(tc.lr, tc.lr_decay, tc.plateau_patience);
    let mut stopper = EarlyStopping::new(tc.early_stop_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x7472_6169_6e00);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        mfl: f64::INFINITY,
        best_epoch: 0,
        stopped_early: false,
        checkpoint: checkpoint.clone(),
        train_clips: train.len(),
        val_clips: val.len(),
    };
    log::info!("training on {} clips, validating on {}", train.len(), val.len());

    for epoch in 1..=tc.max_epochs {
        let started = Instant::now();
        let lr = schedule.lr;
        order.shuffle(&mut rng);
        let visit = tc.clips_per_epoch.map_or(order.len(), |k| k.min(order.len()));
        let batches: Vec<&[usize]> = order[..visit].chunks(tc.batch_size).collect();
        let adam = AdamConfig { lr, ..AdamConfig::default() };

        let (sum, count) = std::thread::scope(|s| -> Result<(f64, usize)> {
            let (tx, rx) = sync_channel::<Result<(Tensor<f32>, usize)>>(tc.prefetch.max(1));
            let train = &train;
            let batches = &batches;
            s.spawn(move || {
                for idx in batches.iter() {
                    let chunk: Vec<&ClipSample<f32>> = idx.iter().map(|&i| train[i]).collect();
                    if tx.send(stack_clips(&chunk).map(|t| (t, chunk.len())).map_err(Error::from)).is_err() {
                        break;
                    }
                }
            });
            let (mut sum, mut count) = (0.0, 0);
            for item in rx {
                let (batch, n) = item?;
                for p in &params {
                    p.zero_grad();
                }
                let loss = batch_loss(model, &batch, &window)?;
                let value = loss.value().item() as f64;
                if !value.is_finite() {
                    return Err(Error::InvalidArgument(format!("non-finite training loss in epoch {epoch}")));
                }
                loss.backward()?;
                adam_step(&params, &adam)?;
                sum += value * n as f64;
                count += n;
            }
            Ok((sum, count))
        })?;

        let val_loss = evaluate_loss(model, &val, tc.batch_size, &window)?;
        let record = EpochLog {
            epoch,
            train_loss: sum / count.max(1) as f64,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} train_loss={:.6} val_loss={val_loss:.6} lr={lr} ({:.1}s)",
            record.train_loss,
            record.seconds
        );
        on_epoch(&record);
        report.epochs.push(record);
        schedule.observe(val_loss);
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            model.save_checkpoint(&checkpoint)?;
            report.mfl = val_loss;
            report.best_epoch = epoch;
        }
        fs::write(out_dir.join("train_log.csv"), report.to_csv())?;
        if stop {
            report.stopped_early = true;
            break;
        }
    }
    fs::write(out_dir.join("train_log.csv"), report.to_csv())?;
    fs::write(
        out_dir.join("train_summary.txt"),
        format!(
            "mfl={}\nbest_epoch={}\nepochs={}\nstopped_early={}\ntrain_clips={}\nval_clips={}\n",
            report.mfl,
            report.best_epoch,
            report.epochs.len(),
            report.stopped_early,
            report.train_clips,
            report.val_clips
        ),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    #[test]
    fn plateau_halves_after_three_stagnant_epochs() {
        let mut s = PlateauSchedule::new(0.001, 0.5, 3);
        assert_eq!(s.observe(1.0), 0.001);
        assert_eq!(s.observe(1.0), 0.001);
        assert_eq!(s.observe(1.1), 0.001);
        assert_eq!(s.observe(1.0), 0.0005);
        assert_eq!(s.observe(0.9), 0.0005);
    }

    #[test]
    fn early_stopping_counts_from_best() {
        let mut e = EarlyStopping::new(2);
        assert_eq!(e.observe(1, 1.0), (true, false));
        assert_eq!(e.observe(2, 1.2), (false, false));
        assert_eq!(e.observe(3, 0.8), (true, false));
        assert_eq!(e.observe(4, 0.9), (false, false));
        assert_eq!(e.observe(5, 0.9), (false, true));
        assert_eq!((e.best, e.best_epoch), (0.8, 3));
    }

    fn micro_run(dir: &Path) -> RunConfig {
        let mut run = RunConfig::default();
        run.model = ModelConfig::micro();
        run.train.max_epochs = 2;
        run.train.batch_size = 2;
        run.train.clips_per_epoch = Some(6);
        run.train.max_val_clips = Some(2);
        run.output_dir = dir.to_path_buf();
        run
    }

    fn micro_videos() -> Vec<Vec<Tensor<f32>>> {
        let spec = SynthSpec {
            image_size: 32,
            sprites: 2,
            sprite_size: 6,
            speed_min: 0.6,
            speed_max: 1.4,
            length: 40,
            anomalies: Vec::new(),
            seed: 3,
        };
        let src = synth_generate(&spec).unwrap().to_source("v");
        vec![prepare_frames(&src, &ModelConfig::micro()).unwrap()]
    }

    #[test]
    fn micro_run_is_reproducible_and_checkpoint_loads() {
        let videos = micro_videos();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let run1 = micro_run(d1.path());
        let m1 = Model::<f32>::new(&run1.model, run1.seed).unwrap();
        let r1 = train_model(&m1, &videos, &run1, d1.path(), |_| {}).unwrap();
        let run2 = micro_run(d2.path());
        let m2 = Model::<f32>::new(&run2.model, run2.seed).unwrap();
        let r2 = train_model(&m2, &videos, &run2, d2.path(), |_| {}).unwrap();
        assert_eq!(r1.epochs.len(), 2);
        assert!((r1.epochs[0].train_loss - r2.epochs[0].train_loss).abs() <= 1e-6);
        assert!(r1.mfl.is_finite());
        let fresh = Model::<f32>::new(&run1.model, 99).unwrap();
        fresh.load_checkpoint(&r1.checkpoint).unwrap();
        assert!(d1.path().join("train_log.csv").exists());
    }

    #[test]
    fn too_little_data_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let run = micro_run(dir.path());
        let model = Model::<f32>::new(&run.model, 0).unwrap();
        let short = vec![micro_videos()[0][..20].to_vec()];
        assert!(matches!(train_model(&model, &short, &run, dir.path(), |_| {}), Err(Error::Config(_))));
    }
}
