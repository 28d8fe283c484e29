//! Aligns score files with ground truth and computes the evaluation report.

use std::collections::BTreeMap;
use std::path::Path;

use bivad_tensor::Tensor;

use crate::config::EvalConfig;
use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::infer::{normalized_scores_path, read_error_maps, read_score_file};
use crate::metrics::{extract_regions, frame_auc, quantile_thresholds, rbdc, tbdc, EvalReport, GroundTruth, RegionBox};

/// Ground truth restricted to `first..first + len`.
fn slice_truth(gt: &GroundTruth, first: usize, len: usize) -> GroundTruth {
    GroundTruth {
        frame_labels: gt.frame_labels[first..first + len].to_vec(),
        region_masks: gt.region_masks.as_ref().map(|m| m[first..first + len].to_vec()),
        tracks: None,
    }
}

/// Evaluates the scores in `scores_dir` against `truths` (video id, ground
/// truth). Region and track criteria need masks and exported error maps.
pub fn evaluate(scores_dir: &Path, truths: &[(String, GroundTruth)], cfg: &EvalConfig) -> Result<EvalReport> {
    if truths.is_empty() {
        return Err(Error::Config("no labelled videos to evaluate".into()));
    }
    let want_regions = cfg.rbdc || cfg.tbdc;
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut per_video_auc = BTreeMap::new();
    let mut parts = Vec::new();
    let mut maps: Vec<Tensor<f32>> = Vec::new();
    for (id, gt) in truths {
        let (first, scores) = read_score_file(&normalized_scores_path(scores_dir, id))?;
        if first + scores.len() > gt.frame_labels.len() {
            return Err(Error::Format(format!(
                "{id}: scores cover frames {first}..{} but only {} labels exist",
                first + scores.len(),
                gt.frame_labels.len()
            )));
        }
        let part = slice_truth(gt, first, scores.len());
        if let Ok(auc) = frame_auc(&scores, &part.frame_labels) {
            per_video_auc.insert(id.clone(), auc);
        }
        all_scores.extend_from_slice(&scores);
        all_labels.extend_from_slice(&part.frame_labels);
        if want_regions {
            let masks = part
                .region_masks
                .as_ref()
                .ok_or_else(|| Error::UnsupportedMetric(format!("{id}: region masks are not available")))?;
            let video_maps = read_error_maps(scores_dir, id)?
                .ok_or_else(|| Error::UnsupportedMetric(format!("{id}: no exported error maps")))?;
            if video_maps.len() != scores.len() {
                return Err(Error::Format(format!("{id}: {} error maps for {} scores", video_maps.len(), scores.len())));
            }
            for (map, mask) in video_maps.into_iter().zip(masks) {
                let (h, w) = (map.shape()[0], map.shape()[1]);
                let map = if (h, w) == (mask.height, mask.width) {
                    map
                } else {
                    resize_bilinear(&map.reshape(&[1, h, w])?, mask.height, mask.width).reshape(&[mask.height, mask.width])?
                };
                maps.push(map);
            }
        }
        parts.push(part);
    }
    let auc = frame_auc(&all_scores, &all_labels)?;
    let mut report = EvalReport {
        auc,
        rbdc: None,
        tbdc: None,
        per_video_auc,
        alpha: cfg.alpha,
        beta: cfg.beta,
        frames: all_scores.len(),
    };
    if want_regions {
        let mut gt = GroundTruth::concat(&parts);
        gt.link_tracks()?;
        let peaks: Vec<f64> = maps.iter().map(|m| m.data().iter().copied().fold(0.0f32, f32::max) as f64).collect();
        let thresholds = quantile_thresholds(&peaks, cfg.thresholds);
        let detections = thresholds
            .iter()
            .map(|&thr| {
                let mut boxes: Vec<RegionBox> = Vec::new();
                for (i, m) in maps.iter().enumerate() {
                    boxes.extend(extract_regions(m, i, thr, cfg.min_area)?);
                }
                Ok(boxes)
            })
            .collect::<Result<Vec<_>>>()?;
        if cfg.rbdc {
            report.rbdc = Some(rbdc(&detections, &gt, cfg.beta, cfg.overlap)?);
        }
        if cfg.tbdc {
            report.tbdc = Some(tbdc(&detections, &gt, cfg.alpha, cfg.beta, cfg.overlap)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::{write_video_scores, VideoScores};
    use crate::metrics::Mask;

    fn truth(labels: &[bool], with_masks: bool) -> GroundTruth {
        let masks = with_masks.then(|| {
            labels
                .iter()
                .map(|&l| {
                    let mut data = vec![false; 64];
                    if l {
                        for y in 2..5 {
                            for x in 2..5 {
                                data[y * 8 + x] = true;
                            }
                        }
                    }
                    Mask { height: 8, width: 8, data }
                })
                .collect()
        });
        GroundTruth { frame_labels: labels.to_vec(), region_masks: masks, tracks: None }
    }

    fn perfect(dir: &Path, labels: &[bool], with_maps: bool) {
        let scored = &labels[2..labels.len() - 2];
        let maps = with_maps.then(|| {
            scored
                .iter()
                .map(|&l| {
                    let mut d = vec![0.01f32; 64];
                    if l {
                        for y in 2..5 {
                            for x in 2..5 {
                                d[y * 8 + x] = 1.0;
                            }
                        }
                    }
                    Tensor::new(&[8, 8], d).unwrap()
                })
                .collect()
        });
        let s: Vec<f64> = scored.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let v = VideoScores { id: "v".into(), first_frame: 2, raw: s.clone(), normalized: s, error_maps: maps };
        write_video_scores(dir, &v).unwrap();
    }

    fn labels() -> Vec<bool> {
        (0..20).map(|i| (8..12).contains(&i)).collect()
    }

    #[test]
    fn perfect_scores_give_auc_one_and_report_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        perfect(dir.path(), &labels(), true);
        let cfg = EvalConfig { rbdc: true, tbdc: true, ..EvalConfig::default() };
        let r = evaluate(dir.path(), &[("v".into(), truth(&labels(), true))], &cfg).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.frames, 16);
        assert_eq!(r.rbdc, Some(1.0));
        assert_eq!(r.tbdc, Some(1.0));
        r.write(dir.path()).unwrap();
        let back = EvalReport::parse_kv(&std::fs::read_to_string(dir.path().join("report.txt")).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn region_criteria_without_masks_are_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        perfect(dir.path(), &labels(), true);
        let cfg = EvalConfig { rbdc: true, ..EvalConfig::default() };
        let err = evaluate(dir.path(), &[("v".into(), truth(&labels(), false))], &cfg).unwrap_err();
        assert!(matches!(err, Error::UnsupportedMetric(_)));
    }

    #[test]
    fn too_many_scores_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        perfect(dir.path(), &labels(), false);
        let short = truth(&labels()[..10], false);
        let err = evaluate(dir.path(), &[("v".into(), short)], &EvalConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
