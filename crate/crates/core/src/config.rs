//! Model and run configuration, read from `key=value` text files.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Keys are applied in
//! order, except `model.preset`, which is applied before everything else so
//! later keys refine the preset.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// What the decoder head consumes at the tap point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BridgeMode {
    /// Two-layer ConvLSTM bridge.
    ConvLstm,
    /// Plain skip connection: decoder mid-layer + encoder tap.
    Residual,
    /// No connection; the head sees the decoder mid-layer only.
    None,
}

/// Which decoding pipelines run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionMode {
    Bi,
    ForwardOnly,
    BackwardOnly,
}

/// Scope of min-max score normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScope {
    PerVideo,
    Global,
}

/// Rule deciding whether a detection box matches a ground-truth region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapRule {
    /// Intersection over union.
    Iou,
    /// Intersection over ground-truth box area.
    GtFraction,
}

macro_rules! keyword_enum {
    ($ty:ty { $($text:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.replace('-', "_").as_str() {
                    $($text => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} '{other}' (expected one of: {})",
                        stringify!($ty),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($text); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(BridgeMode { "convlstm" => BridgeMode::ConvLstm, "residual" => BridgeMode::Residual, "none" => BridgeMode::None });
keyword_enum!(DirectionMode { "bi" => DirectionMode::Bi, "forward_only" => DirectionMode::ForwardOnly, "backward_only" => DirectionMode::BackwardOnly });
keyword_enum!(NormScope { "per_video" => NormScope::PerVideo, "global" => NormScope::Global });
keyword_enum!(OverlapRule { "iou" => OverlapRule::Iou, "gt_fraction" => OverlapRule::GtFraction });

/// Every architectural hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub ch1: usize,
    pub ch2: usize,
    pub ch_feat: usize,
    /// Attention heads `c`.
    pub heads: usize,
    /// Transformer blocks `N` in the encoder and in each decoder.
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub attn_kernel: usize,
    pub codec_kernel: usize,
    pub bridge_kernel: usize,
    /// Half-span of a sample in sampled frames (`n`).
    pub n: usize,
    /// Half-span of the predicted frames (`m`).
    pub m: usize,
    /// Sampling interval between consecutive clip frames.
    pub stride: usize,
    pub eta: f64,
    pub lambda: f64,
    pub leaky_slope: f64,
    pub norm_eps: f64,
    pub loss_window: usize,
    pub loss_sigma: f64,
    pub bridge_mode: BridgeMode,
    pub direction_mode: DirectionMode,
    pub positional_encoding: bool,
}

impl ModelConfig {
    /// Full-size configuration (256×256 input, 64-channel features).
    pub fn full() -> Self {
        Self {
            image_size: 256,
            channels: 1,
            ch1: 16,
            ch2: 32,
            ch_feat: 64,
            heads: 8,
            blocks: 5,
            ffn_hidden: 320,
            attn_kernel: 3,
            codec_kernel: 3,
            bridge_kernel: 5,
            n: 4,
            m: 1,
            stride: 3,
            eta: 0.75,
            lambda: 1.0,
            leaky_slope: 0.2,
            norm_eps: 1e-5,
            loss_window: 11,
            loss_sigma: 1.5,
            bridge_mode: BridgeMode::ConvLstm,
            direction_mode: DirectionMode::Bi,
            positional_encoding: false,
        }
    }

    /// 64×64 grayscale configuration sized for CPU training.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            ch1: 8,
            ch2: 16,
            ch_feat: 16,
            heads: 2,
            blocks: 2,
            ffn_hidden: 32,
            bridge_kernel: 3,
            ..Self::full()
        }
    }

    /// 8×8 configuration for gradient verification.
    pub fn micro() -> Self {
        Self {
            image_size: 8,
            ch1: 2,
            ch2: 4,
            ch_feat: 8,
            heads: 2,
            blocks: 2,
            ffn_hidden: 16,
            bridge_kernel: 5,
            loss_window: 5,
            loss_sigma: 1.0,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!("unknown preset '{other}' (full, desk, micro)"))),
        }
    }

    pub fn d_head(&self) -> usize {
        self.ch_feat / self.heads.max(1)
    }

    /// Spatial extent of the transformer feature maps.
    pub fn feature_size(&self) -> usize {
        self.image_size / 4
    }

    /// Frames in one sample (`2n + 1`).
    pub fn clip_len(&self) -> usize {
        2 * self.n + 1
    }

    /// Frames predicted per direction (`2m + 1`).
    pub fn span(&self) -> usize {
        2 * self.m + 1
    }

    /// Frames that must be observed after `t` before `t` can be scored.
    pub fn latency_frames(&self) -> usize {
        self.n * self.stride
    }

    /// Frames without a full sampling margin at each end of a video.
    pub fn margin(&self) -> usize {
        self.n * self.stride
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.n > self.m + 1 && self.m + 1 > 1) {
            return fail(format!("need n > m + 1 > 1, got n={} m={}", self.n, self.m));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return fail(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if self.lambda < 0.0 {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return fail(format!("image_size must be a positive multiple of 4, got {}", self.image_size));
        }
        if self.heads == 0 || self.ch_feat % self.heads != 0 {
            return fail(format!("ch_feat {} not divisible by heads {}", self.ch_feat, self.heads));
        }
        for (name, k) in [
            ("attn_kernel", self.attn_kernel),
            ("codec_kernel", self.codec_kernel),
            ("bridge_kernel", self.bridge_kernel),
            ("loss_window", self.loss_window),
        ] {
            if k % 2 == 0 {
                return fail(format!("{name} must be odd, got {k}"));
            }
        }
        if self.loss_window > self.image_size {
            return fail(format!("loss_window {} exceeds image size", self.loss_window));
        }
        if [self.channels, self.ch1, self.ch2, self.ch_feat, self.blocks, self.ffn_hidden, self.stride]
            .contains(&0)
        {
            return fail("channel counts, blocks, ffn_hidden and stride must be positive".into());
        }
        if !(0.0..1.0).contains(&self.leaky_slope) || self.leaky_slope == 0.0 {
            return fail(format!("leaky_slope must lie in (0, 1), got {}", self.leaky_slope));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "ch1" => self.ch1 = parse(key, value)?,
            "ch2" => self.ch2 = parse(key, value)?,
            "ch_feat" => self.ch_feat = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, value)?,
            "attn_kernel" => self.attn_kernel = parse(key, value)?,
            "codec_kernel" => self.codec_kernel = parse(key, value)?,
            "bridge_kernel" => self.bridge_kernel = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            "norm_eps" => self.norm_eps = parse(key, value)?,
            "loss_window" => self.loss_window = parse(key, value)?,
            "loss_sigma" => self.loss_sigma = parse(key, value)?,
            "bridge_mode" => self.bridge_mode = value.parse()?,
            "direction_mode" => self.direction_mode = value.parse()?,
            "positional_encoding" => self.positional_encoding = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("channels", self.channels.to_string()),
            ("ch1", self.ch1.to_string()),
            ("ch2", self.ch2.to_string()),
            ("ch_feat", self.ch_feat.to_string()),
            ("heads", self.heads.to_string()),
            ("blocks", self.blocks.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("attn_kernel", self.attn_kernel.to_string()),
            ("codec_kernel", self.codec_kernel.to_string()),
            ("bridge_kernel", self.bridge_kernel.to_string()),
            ("n", self.n.to_string()),
            ("m", self.m.to_string()),
            ("stride", self.stride.to_string()),
            ("eta", self.eta.to_string()),
            ("lambda", self.lambda.to_string()),
            ("leaky_slope", self.leaky_slope.to_string()),
            ("norm_eps", self.norm_eps.to_string()),
            ("loss_window", self.loss_window.to_string()),
            ("loss_sigma", self.loss_sigma.to_string()),
            ("bridge_mode", self.bridge_mode.to_string()),
            ("direction_mode", self.direction_mode.to_string()),
            ("positional_encoding", self.positional_encoding.to_string()),
        ]
    }
}

/// Training loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    /// Random subset of training clips visited per epoch (all when unset).
    pub clips_per_epoch: Option<usize>,
    /// Cap on validation clips evaluated per epoch (all when unset).
    pub max_val_clips: Option<usize>,
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr: 1e-3,
            lr_decay: 0.5,
            plateau_patience: 3,
            early_stop_patience: 6,
            max_epochs: 60,
            val_fraction: 0.1,
            clips_per_epoch: None,
            max_val_clips: None,
            prefetch: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    pub export_error_maps: bool,
    pub normalization: NormScope,
    pub batch_size: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { export_error_maps: false, normalization: NormScope::PerVideo, batch_size: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub rbdc: bool,
    pub tbdc: bool,
    pub alpha: f64,
    pub beta: f64,
    pub overlap: OverlapRule,
    pub thresholds: usize,
    pub min_area: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rbdc: false,
            tbdc: false,
            alpha: 0.1,
            beta: 0.1,
            overlap: OverlapRule::Iou,
            thresholds: 50,
            min_area: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub frames: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { frames: 200, warmup: 8 }
    }
}

/// Synthetic dataset layout parameters (`synth.*` keys).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub sprites: usize,
    pub sprite_size: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub train_videos: usize,
    pub train_length: usize,
    pub test_videos: usize,
    pub test_length: usize,
    pub anomalies_per_video: usize,
    pub anomaly_length: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            sprites: 3,
            sprite_size: 8,
            speed_min: 0.6,
            speed_max: 1.4,
            train_videos: 18,
            train_length: 600,
            test_videos: 4,
            test_length: 300,
            anomalies_per_video: 3,
            anomaly_length: 30,
        }
    }
}

/// Everything one CLI invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub synth: SynthConfig,
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    /// Checkpoint to load; defaults to `<output_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub scores_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            synth: SynthConfig::default(),
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            scores_dir: None,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse value '{value}' for key '{key}'")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// Splits config text into `(key, value)` pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_pairs(&parse_kv(&text)?)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_pairs(pairs)?;
        Ok(cfg)
    }

    /// Applies `pairs` on top of the current values (preset first).
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "model.preset") {
            self.model = ModelConfig::preset(v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "model.preset") {
            self.set(k, v)?;
        }
        self.model.validate()?;
        if self.train.batch_size == 0 || self.infer.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.train.lr <= 0.0 {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        if !(self.train.val_fraction > 0.0 && self.train.val_fraction < 1.0) {
            return Err(Error::Config("train.val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Applies `key=value` override strings, e.g. from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let pairs = overrides
            .iter()
            .map(|o| {
                let o = o.as_ref();
                o.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.apply_pairs(&pairs)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let known = match section {
            "model" => self.model.set(field, value)?,
            "train" => {
                let t = &mut self.train;
                match field {
                    "batch_size" => t.batch_size = parse(key, value)?,
                    "lr" => t.lr = parse(key, value)?,
                    "lr_decay" => t.lr_decay = parse(key, value)?,
                    "plateau_patience" => t.plateau_patience = parse(key, value)?,
                    "early_stop_patience" => t.early_stop_patience = parse(key, value)?,
                    "max_epochs" => t.max_epochs = parse(key, value)?,
                    "val_fraction" => t.val_fraction = parse(key, value)?,
                    "clips_per_epoch" => t.clips_per_epoch = parse_opt(key, value)?,
                    "max_val_clips" => t.max_val_clips = parse_opt(key, value)?,
                    "prefetch" => t.prefetch = parse(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "infer" => {
                let i = &mut self.infer;
                match field {
                    "export_error_maps" => i.export_error_maps = parse(key, value)?,
                    "normalization" => i.normalization = value.parse()?,
                    "batch_size" => i.batch_size = parse(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "eval" => {
                let e = &mut self.eval;
                match field {
                    "rbdc" => e.rbdc = parse(key, value)?,
                    "tbdc" => e.tbdc = parse(key, value)?,
                    "alpha" => e.alpha = parse(key, value)?,
                    "beta" => e.beta = parse(key, value)?,
                    "overlap" => e.overlap = value.parse()?,
                    "thresholds" => e.thresholds = parse(key, value)?,
                    "min_area" => e.min_area = parse(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "bench" => {
                match field {
                    "frames" => self.bench.frames = parse(key, value)?,
                    "warmup" => self.bench.warmup = parse(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "synth" => {
                let s = &mut self.synth;
                match field {
                    "image_size" => s.image_size = parse(key, value)?,
                    "sprites" => s.sprites = parse(key, value)?,
                    "sprite_size" => s.sprite_size = parse(key, value)?,
                    "speed_min" => s.speed_min = parse(key, value)?,
                    "speed_max" => s.speed_max = parse(key, value)?,
                    "train_videos" => s.train_videos = parse(key, value)?,
                    "train_length" => s.train_length = parse(key, value)?,
                    "test_videos" => s.test_videos = parse(key, value)?,
                    "test_length" => s.test_length = parse(key, value)?,
                    "anomalies_per_video" => s.anomalies_per_video = parse(key, value)?,
                    "anomaly_length" => s.anomaly_length = parse(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "data" if field == "root" => {
                self.data_root = PathBuf::from(value);
                true
            }
            "output" if field == "dir" => {
                self.output_dir = PathBuf::from(value);
                true
            }
            "" => match field {
                "seed" => {
                    self.seed = parse(key, value)?;
                    true
                }
                "checkpoint" => {
                    self.checkpoint = Some(PathBuf::from(value));
                    true
                }
                "scores_dir" => {
                    self.scores_dir = Some(PathBuf::from(value));
                    true
                }
                _ => false,
            },
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err(unknown(key))
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("model.ckpt"))
    }

    pub fn scores_path(&self) -> PathBuf {
        self.scores_dir.clone().unwrap_or_else(|| self.output_dir.join("scores"))
    }

    /// Serializes the model section as `model.*` lines.
    pub fn model_to_text(model: &ModelConfig) -> String {
        model.entries().into_iter().map(|(k, v)| format!("model.{k}={v}\n")).collect()
    }
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown config key '{key}'"))
}
