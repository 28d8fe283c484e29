//! Frame scoring with a trained model, score files, and error-map export.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use bivad_tensor::io::{load_tensor, save_tensor};
use bivad_tensor::{no_grad, Tensor};

use crate::config::{NormScope, RunConfig};
use crate::error::{Error, Result};
use crate::objective::{anomaly_score, error_map, minmax_normalize, GaussianWindow};
use crate::pipeline::{clip_centers, slice_clips, stack_clips, ClipSample, Model};

/// Worker threads: `BIVAD_THREADS` when set, else the available cores.
pub fn worker_threads() -> usize {
    std::env::var("BIVAD_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Scores of one video's scored frames, `first_frame..first_frame + raw.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoScores {
    pub id: String,
    pub first_frame: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    /// One `[H,W]` map per scored frame, when requested.
    pub error_maps: Option<Vec<Tensor<f32>>>,
}

struct ClipResult {
    score: f64,
    map: Option<Tensor<f32>>,
}

fn score_batch(
    model: &Model<f32>,
    clips: &[&ClipSample<f32>],
    window: &GaussianWindow,
    want_maps: bool,
) -> Result<Vec<ClipResult>> {
    let batch = stack_clips(clips)?;
    let bundle = model.model_forward(&batch)?;
    let mid = bundle.fused[model.config.m].value().clone();
    let frame_shape = clips[0].frames[0].shape().to_vec();
    clips
        .iter()
        .enumerate()
        .map(|(b, clip)| {
            let pred = mid.narrow(0, b, 1)?.reshape(&frame_shape)?;
            let frame = &clip.frames[clip.n];
            Ok(ClipResult {
                score: anomaly_score(frame, &pred, window, model.config.lambda)?,
                map: if want_maps { Some(error_map(frame, &pred)?) } else { None },
            })
        })
        .collect()
}

/// Raw scores (and optional error maps) for every full-margin frame.
/// Clips are split into contiguous ranges across `threads` workers.
pub fn score_frames(
    model: &Model<f32>,
    frames: &[Tensor<f32>],
    batch_size: usize,
    threads: usize,
    want_maps: bool,
) -> Result<(usize, Vec<f64>, Option<Vec<Tensor<f32>>>)> {
    let cfg = &model.config;
    let window = GaussianWindow::from_config(cfg)?;
    let clips = slice_clips(frames, cfg.stride, cfg.n, cfg.m);
    let first = clip_centers(frames.len(), cfg.stride, cfg.n).start;
    if clips.is_empty() {
        return Ok((first, Vec::new(), want_maps.then(Vec::new)));
    }
    let refs: Vec<&ClipSample<f32>> = clips.iter().collect();
    let per_worker = refs.len().div_ceil(threads.max(1));
    let parts: Vec<Result<Vec<ClipResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = refs
            .chunks(per_worker)
            .map(|range| {
                let window = &window;
                s.spawn(move || {
                    let _g = no_grad();
                    let mut out = Vec::with_capacity(range.len());
                    for chunk in range.chunks(batch_size.max(1)) {
                        out.extend(score_batch(model, chunk, window, want_maps)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring worker panicked")).collect()
    });
    let mut scores = Vec::with_capacity(refs.len());
    let mut maps = want_maps.then(|| Vec::with_capacity(refs.len()));
    for part in parts {
        for r in part? {
            scores.push(r.score);
            if let (Some(maps), Some(m)) = (maps.as_mut(), r.map) {
                maps.push(m);
            }
        }
    }
    Ok((first, scores, maps))
}

/// Applies min-max normalization per video or across all videos.
pub fn normalize_scores(videos: &mut [VideoScores], scope: NormScope) -> Result<()> {
    match scope {
        NormScope::PerVideo => {
            for v in videos.iter_mut().filter(|v| !v.raw.is_empty()) {
                v.normalized = minmax_normalize(&v.raw)?;
            }
        }
        NormScope::Global => {
            let all: Vec<f64> = videos.iter().flat_map(|v| v.raw.iter().copied()).collect();
            if all.is_empty() {
                return Ok(());
            }
            let norm = minmax_normalize(&all)?;
            let mut offset = 0;
            for v in videos.iter_mut() {
                v.normalized = norm[offset..offset + v.raw.len()].to_vec();
                offset += v.raw.len();
            }
        }
    }
    Ok(())
}

pub fn raw_scores_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_raw.txt"))
}

pub fn normalized_scores_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_norm.txt"))
}

pub fn error_maps_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_errmaps.bvt"))
}

/// Writes one `<frame_index> <score>` line per scored frame.
pub fn write_score_file(path: &Path, first_frame: usize, scores: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (i, s) in scores.iter().enumerate() {
        writeln!(f, "{} {s}", first_frame + i)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a score file; indices must be consecutive.
pub fn read_score_file(path: &Path) -> Result<(usize, Vec<f64>)> {
    let text = fs::read_to_string(path)?;
    let mut first = None;
    let mut scores = Vec::new();
    for (line_no, line) in text.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let bad = || Error::Format(format!("{}: malformed line '{line}'", path.display()));
        let (idx, val) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
        let idx: usize = idx.parse().map_err(|_| bad())?;
        let val: f64 = val.trim().parse().map_err(|_| bad())?;
        let start = *first.get_or_insert(idx);
        if idx != start + line_no {
            return Err(Error::Format(format!("{}: frame indices are not consecutive at '{line}'", path.display())));
        }
        scores.push(val);
    }
    Ok((first.unwrap_or(0), scores))
}

/// Grayscale PGM scaled so `max` maps to 255.
pub fn write_pgm(path: &Path, map: &Tensor<f32>, max: f32) -> Result<()> {
    let &[h, w] = map.shape() else {
        return Err(Error::InvalidArgument(format!("error map must be [H,W], got {:?}", map.shape())));
    };
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8));
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes score files and, when present, error maps as one `[K,H,W]` tensor
/// plus a directory of PGM images.
pub fn write_video_scores(dir: &Path, v: &VideoScores) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_score_file(&raw_scores_path(dir, &v.id), v.first_frame, &v.raw)?;
    write_score_file(&normalized_scores_path(dir, &v.id), v.first_frame, &v.normalized)?;
    if let Some(maps) = v.error_maps.as_ref().filter(|m| !m.is_empty()) {
        let refs: Vec<&Tensor<f32>> = maps.iter().collect();
        let (h, w) = (maps[0].shape()[0], maps[0].shape()[1]);
        let stacked = Tensor::concat(&refs, 0)?.reshape(&[maps.len(), h, w])?;
        save_tensor(error_maps_path(dir, &v.id), &stacked)?;
        let pgm_dir = dir.join(format!("{}_errmaps", v.id));
        fs::create_dir_all(&pgm_dir)?;
        let max = stacked.data().iter().copied().fold(0.0f32, f32::max);
        for (i, m) in maps.iter().enumerate() {
            write_pgm(&pgm_dir.join(format!("{:06}.pgm", v.first_frame + i)), m, max)?;
        }
    }
    Ok(())
}

/// Loads `<id>_errmaps.bvt` as one map per scored frame.
pub fn read_error_maps(dir: &Path, id: &str) -> Result<Option<Vec<Tensor<f32>>>> {
    let path = error_maps_path(dir, id);
    if !path.exists() {
        return Ok(None);
    }
    let t: Tensor<f32> = load_tensor(&path)?;
    let &[k, h, w] = t.shape() else {
        return Err(Error::Format(format!("{}: error maps must be [K,H,W]", path.display())));
    };
    (0..k).map(|i| Ok(t.narrow(0, i, 1)?.reshape(&[h, w])?)).collect::<Result<Vec<_>>>().map(Some)
}

/// Scores every video and writes the results under `run.scores_path()`.
pub fn infer_videos(model: &Model<f32>, videos: &[(String, Vec<Tensor<f32>>)], run: &RunConfig) -> Result<Vec<VideoScores>> {
    let threads = worker_threads();
    let mut out = Vec::with_capacity(videos.len());
    for (id, frames) in videos {
        let (first_frame, raw, error_maps) =
            score_frames(model, frames, run.infer.batch_size, threads, run.infer.export_error_maps)?;
        log::info!("scored {id}: {} frames", raw.len());
        out.push(VideoScores { id: id.clone(), first_frame, raw, normalized: Vec::new(), error_maps });
    }
    normalize_scores(&mut out, run.infer.normalization)?;
    let dir = run.scores_path();
    for v in &out {
        write_video_scores(&dir, v)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn video(len: usize, size: usize) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..len).map(|_| Tensor::uniform(&[1, size, size], 1.0, &mut rng)).collect()
    }

    #[test]
    fn hundred_frames_give_76_scores() {
        let model = Model::<f32>::new(&ModelConfig::micro(), 0).unwrap();
        let (first, scores, maps) = score_frames(&model, &video(100, 8), 4, 1, true).unwrap();
        assert_eq!(first, 12);
        assert_eq!(scores.len(), 76);
        assert_eq!(maps.unwrap().len(), 76);
        assert!(scores.iter().all(|s| s.is_finite() && *s >= 0.0));
    }

    #[test]
    fn thread_count_does_not_change_scores() {
        let model = Model::<f32>::new(&ModelConfig::micro(), 1).unwrap();
        let v = video(40, 8);
        let (_, one, _) = score_frames(&model, &v, 3, 1, false).unwrap();
        let (_, three, _) = score_frames(&model, &v, 3, 3, false).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn forward_only_matches_eta_one() {
        let mut cfg = ModelConfig::micro();
        cfg.eta = 1.0;
        let bi = Model::<f32>::new(&cfg, 2).unwrap();
        cfg.direction_mode = crate::config::DirectionMode::ForwardOnly;
        let fwd = Model::<f32>::new(&cfg, 2).unwrap();
        let v = video(30, 8);
        let (_, a, _) = score_frames(&bi, &v, 2, 1, false).unwrap();
        let (_, b, _) = score_frames(&fwd, &v, 2, 1, false).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn score_files_roundtrip_and_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let mut vids = vec![
            VideoScores { id: "a".into(), first_frame: 12, raw: vec![1.0, 3.0, 2.0], normalized: vec![], error_maps: None },
            VideoScores { id: "b".into(), first_frame: 12, raw: vec![5.0, 7.0], normalized: vec![], error_maps: None },
        ];
        normalize_scores(&mut vids, NormScope::PerVideo).unwrap();
        assert_eq!(vids[0].normalized, vec![0.0, 1.0, 0.5]);
        assert_eq!(vids[1].normalized, vec![0.0, 1.0]);
        normalize_scores(&mut vids, NormScope::Global).unwrap();
        assert_eq!(vids[0].normalized, vec![0.0, 2.0 / 6.0, 1.0 / 6.0]);
        assert!(vids.iter().flat_map(|v| &v.normalized).all(|s| (0.0..=1.0).contains(s)));
        write_video_scores(dir.path(), &vids[0]).unwrap();
        let (first, s) = read_score_file(&normalized_scores_path(dir.path(), "a")).unwrap();
        assert_eq!((first, s), (12, vids[0].normalized.clone()));
        fs::write(dir.path().join("bad.txt"), "3 0.1\n5 0.2\n").unwrap();
        assert!(matches!(read_score_file(&dir.path().join("bad.txt")), Err(Error::Format(_))));
    }

    #[test]
    fn error_maps_export_as_tensor_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let maps = vec![Tensor::<f32>::full(&[4, 5], 0.5), Tensor::<f32>::full(&[4, 5], 1.0)];
        let v = VideoScores {
            id: "v".into(),
            first_frame: 12,
            raw: vec![0.1, 0.2],
            normalized: vec![0.0, 1.0],
            error_maps: Some(maps.clone()),
        };
        write_video_scores(dir.path(), &v).unwrap();
        assert_eq!(read_error_maps(dir.path(), "v").unwrap().unwrap(), maps);
        let pgm = fs::read(dir.path().join("v_errmaps").join("000013.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n5 4\n255\n"));
        assert!(pgm.ends_with(&[255u8; 20]));
        let img = image::open(dir.path().join("v_errmaps").join("000012.pgm")).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 128));
    }
}
