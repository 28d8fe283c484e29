//! Command implementations behind the `bivad` binary.

use std::fs;
use std::path::{Path, PathBuf};

use bivad::bench::{bench_model, BenchReport};
use bivad::config::RunConfig;
use bivad::data::{list_videos, load_ground_truth, load_split, synth_dataset, synth_generate, SynthSpec};
use bivad::error::{Error, Result};
use bivad::evaluate::evaluate;
use bivad::infer::{infer_videos, VideoScores};
use bivad::metrics::EvalReport;
use bivad::pipeline::Model;
use bivad::train::{prepare_frames, train_model, TrainReport};

/// Reads the config file (when given) and applies `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut run = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    run.apply_overrides(overrides)?;
    run.model.validate()?;
    Ok(run)
}

fn build_model(run: &RunConfig) -> Result<Model<f32>> {
    Model::new(&run.model, run.seed)
}

fn trained_model(run: &RunConfig) -> Result<Model<f32>> {
    let model = build_model(run)?;
    model.load_checkpoint(run.checkpoint_path())?;
    Ok(model)
}

pub fn cmd_train(run: &RunConfig) -> Result<TrainReport> {
    let sources = load_split(&run.data_root, "train")
        .map_err(|e| Error::Config(format!("cannot load training videos from {}: {e}", run.data_root.display())))?;
    if sources.is_empty() {
        return Err(Error::Config(format!("no training videos under {}", run.data_root.join("train").display())));
    }
    let videos = sources.iter().map(|v| prepare_frames(v, &run.model)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&run.output_dir)?;
    fs::write(run.output_dir.join("model.cfg"), RunConfig::model_to_text(&run.model))?;
    let model = build_model(run)?;
    let report = train_model(&model, &videos, run, &run.output_dir, |e| {
        println!(
            "epoch {} train_loss={:.6} val_loss={:.6} lr={} time={:.1}s",
            e.epoch, e.train_loss, e.val_loss, e.lr, e.seconds
        )
    })?;
    println!("mfl={:.6} best_epoch={} checkpoint={}", report.mfl, report.best_epoch, report.checkpoint.display());
    Ok(report)
}

pub fn cmd_infer(run: &RunConfig) -> Result<Vec<VideoScores>> {
    let model = trained_model(run)?;
    let sources = load_split(&run.data_root, "test")?;
    if sources.is_empty() {
        return Err(Error::Config(format!("no test videos under {}", run.data_root.join("test").display())));
    }
    let videos = sources
        .iter()
        .map(|v| Ok((v.id.clone(), prepare_frames(v, &run.model)?)))
        .collect::<Result<Vec<_>>>()?;
    let scores = infer_videos(&model, &videos, run)?;
    for v in &scores {
        println!("{}: {} scored frames from index {}", v.id, v.raw.len(), v.first_frame);
    }
    println!("scores written to {}", run.scores_path().display());
    Ok(scores)
}

pub fn cmd_eval(run: &RunConfig) -> Result<EvalReport> {
    let test_dir = run.data_root.join("test");
    let mut truths = Vec::new();
    for path in list_videos(&test_dir)? {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format(format!("bad video name {}", path.display())))?
            .to_string();
        if let Some(gt) = load_ground_truth(&test_dir, &id)? {
            truths.push((id, gt));
        }
    }
    let report = evaluate(&run.scores_path(), &truths, &run.eval)?;
    report.write(&run.output_dir)?;
    print!("{}", report.to_kv());
    Ok(report)
}

pub fn cmd_synth(run: &RunConfig) -> Result<PathBuf> {
    synth_dataset(&run.synth, &run.data_root, run.seed, run.model.margin())?;
    println!(
        "wrote {} training and {} test videos to {}",
        run.synth.train_videos,
        run.synth.test_videos,
        run.data_root.display()
    );
    Ok(run.data_root.clone())
}

pub fn cmd_bench(run: &RunConfig) -> Result<BenchReport> {
    let model = build_model(run)?;
    let ckpt = run.checkpoint_path();
    if run.checkpoint.is_some() || ckpt.exists() {
        model.load_checkpoint(&ckpt)?;
    } else {
        log::warn!("no checkpoint at {}; timing freshly initialized weights", ckpt.display());
    }
    let size = run.model.image_size;
    let spec = SynthSpec {
        image_size: size,
        sprites: run.synth.sprites,
        sprite_size: (size / 8).max(1),
        speed_min: run.synth.speed_min,
        speed_max: run.synth.speed_max,
        length: 2 * run.model.margin() + 1 + 63,
        anomalies: Vec::new(),
        seed: run.seed,
    };
    let source = synth_generate(&spec)?.to_source("bench");
    let frames = prepare_frames(&source, &run.model)?;
    let report = bench_model(&model, &frames, &run.bench)?;
    fs::create_dir_all(&run.output_dir)?;
    fs::write(run.output_dir.join("bench.txt"), report.to_text())?;
    print!("{}", report.to_text());
    Ok(report)
}
