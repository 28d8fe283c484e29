//! Frame-level ROC AUC, region extraction from error maps, and region- and
//! track-based detection criteria.
//!
//! The detection criteria sweep a set of error thresholds. Each threshold
//! yields one operating point: the fraction of ground-truth regions (or
//! tracks) detected versus false-positive detections per frame. The curve
//! is the best detection rate reachable within a false-positive budget,
//! anchored at the origin, and its area over a budget of `[0, 1]` FP/frame
//! is reported.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use bivad_tensor::{Real, Tensor};

use crate::config::OverlapRule;
use crate::error::{invalid, Error, Result};

/// ROC AUC via the rank statistic; tied scores count one half.
pub fn frame_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both normal and anomalous frames".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid!("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Tight inclusive bounding box of a connected region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionBox {
    pub frame_index: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Largest error inside the box (1 for ground-truth regions).
    pub score: f64,
}

impl RegionBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    pub fn intersection(&self, other: &RegionBox) -> usize {
        let w = self.x1.min(other.x1) as isize - self.x0.max(other.x0) as isize + 1;
        let h = self.y1.min(other.y1) as isize - self.y0.max(other.y0) as isize + 1;
        if w <= 0 || h <= 0 {
            0
        } else {
            (w * h) as usize
        }
    }

    pub fn iou(&self, other: &RegionBox) -> f64 {
        let inter = self.intersection(other) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }

    /// Overlap of a detection (`self`) with a ground-truth box under `rule`.
    pub fn overlap(&self, gt: &RegionBox, rule: OverlapRule) -> f64 {
        match rule {
            OverlapRule::Iou => self.iou(gt),
            OverlapRule::GtFraction => self.intersection(gt) as f64 / gt.area() as f64,
        }
    }
}

/// 8-connected components of `mask` (row-major `h × w`) as pixel lists.
fn components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        out.push(pixels);
    }
    out
}

fn bounding_box(pixels: &[usize], w: usize, frame_index: usize, score: f64) -> RegionBox {
    let mut b = RegionBox { frame_index, x0: usize::MAX, y0: usize::MAX, x1: 0, y1: 0, score };
    for &p in pixels {
        let (y, x) = (p / w, p % w);
        b.x0 = b.x0.min(x);
        b.y0 = b.y0.min(y);
        b.x1 = b.x1.max(x);
        b.y1 = b.y1.max(y);
    }
    b
}

/// Boxes around 8-connected components of `{error >= threshold}` holding at
/// least `min_area` pixels.
pub fn extract_regions<T: Real>(
    error_map: &Tensor<T>,
    frame_index: usize,
    threshold: f64,
    min_area: usize,
) -> Result<Vec<RegionBox>> {
    let &[h, w] = error_map.shape() else {
        return Err(invalid!("error map must be [H,W], got {:?}", error_map.shape()));
    };
    if !(threshold > 0.0) {
        return Err(invalid!("threshold must be positive, got {threshold}"));
    }
    let values = error_map.to_f64_vec();
    let mask: Vec<bool> = values.iter().map(|&v| v >= threshold).collect();
    Ok(components(&mask, h, w)
        .into_iter()
        .filter(|c| c.len() >= min_area.max(1))
        .map(|c| {
            let score = c.iter().map(|&p| values[p]).fold(f64::NEG_INFINITY, f64::max);
            bounding_box(&c, w, frame_index, score)
        })
        .collect())
}

/// Binary pixel mask of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Boxes of the mask's 8-connected components.
    pub fn regions(&self, frame_index: usize) -> Vec<RegionBox> {
        components(&self.data, self.height, self.width)
            .iter()
            .map(|c| bounding_box(c, self.width, frame_index, 1.0))
            .collect()
    }
}

/// Ground truth for a sequence of scored frames.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub frame_labels: Vec<bool>,
    /// One mask per frame.
    pub region_masks: Option<Vec<Mask>>,
    /// Each track lists indices into [`GroundTruth::regions`].
    pub tracks: Option<Vec<Vec<usize>>>,
}

impl GroundTruth {
    /// Ground-truth boxes of every frame, in frame order.
    pub fn regions(&self) -> Result<Vec<RegionBox>> {
        let masks = self
            .region_masks
            .as_ref()
            .ok_or_else(|| Error::UnsupportedMetric("region masks are not available".into()))?;
        Ok(masks.iter().enumerate().flat_map(|(f, m)| m.regions(f)).collect())
    }

    /// Groups regions into tracks: regions in consecutive frames whose boxes
    /// overlap belong to the same track.
    pub fn link_tracks(&mut self) -> Result<()> {
        let regions = self.regions()?;
        let mut parent: Vec<usize> = (0..regions.len()).collect();
        fn root(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for (i, a) in regions.iter().enumerate() {
            for (j, b) in regions.iter().enumerate().skip(i + 1) {
                if b.frame_index == a.frame_index + 1 && a.intersection(b) > 0 {
                    let (ra, rb) = (root(&mut parent, i), root(&mut parent, j));
                    parent[rb] = ra;
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..regions.len() {
            let r = root(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        self.tracks = Some(groups.into_values().collect());
        Ok(())
    }

    /// Concatenates several videos' ground truth into one frame sequence.
    pub fn concat(parts: &[GroundTruth]) -> GroundTruth {
        let frame_labels = parts.iter().flat_map(|g| g.frame_labels.iter().copied()).collect();
        let region_masks = parts
            .iter()
            .map(|g| g.region_masks.clone())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect());
        let mut out = GroundTruth { frame_labels, region_masks, tracks: None };
        if parts.iter().all(|g| g.tracks.is_some()) && out.region_masks.is_some() {
            let _ = out.link_tracks();
        }
        out
    }
}

/// One operating point per threshold: `(fp_per_frame, detection_rate)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub fp_per_frame: f64,
    pub rate: f64,
}

/// Area under the best-rate-within-budget step curve for FP/frame in
/// `[0, 1]`, anchored at (0, 0).
pub fn curve_area(points: &[CurvePoint]) -> f64 {
    let mut pts: Vec<CurvePoint> = points.iter().copied().filter(|p| p.fp_per_frame <= 1.0).collect();
    pts.push(CurvePoint { fp_per_frame: 0.0, rate: 0.0 });
    pts.sort_by(|a, b| a.fp_per_frame.total_cmp(&b.fp_per_frame));
    let mut area = 0.0;
    let mut best = 0.0f64;
    for (i, p) in pts.iter().enumerate() {
        best = best.max(p.rate);
        let next = pts.get(i + 1).map_or(1.0, |q| q.fp_per_frame);
        area += best * (next - p.fp_per_frame);
    }
    area
}

struct Matched {
    /// Per ground-truth region: detected at this threshold.
    detected: Vec<bool>,
    false_positives: usize,
}

fn match_threshold(dets: &[RegionBox], gt: &[RegionBox], beta: f64, rule: OverlapRule) -> Matched {
    let mut detected = vec![false; gt.len()];
    let mut false_positives = 0;
    for d in dets {
        let mut hit = false;
        for (g, flag) in gt.iter().zip(detected.iter_mut()) {
            if g.frame_index == d.frame_index && d.overlap(g, rule) >= beta {
                *flag = true;
                hit = true;
            }
        }
        if !hit {
            false_positives += 1;
        }
    }
    Matched { detected, false_positives }
}

fn frames_of(gt: &GroundTruth) -> Result<usize> {
    let n = gt.frame_labels.len();
    if n == 0 {
        return Err(invalid!("ground truth covers no frames"));
    }
    Ok(n)
}

/// Region-based detection criterion; `detections[k]` holds all boxes of
/// threshold `k`.
pub fn rbdc(detections: &[Vec<RegionBox>], gt: &GroundTruth, beta: f64, rule: OverlapRule) -> Result<f64> {
    let regions = gt.regions()?;
    let frames = frames_of(gt)? as f64;
    if regions.is_empty() {
        return Err(Error::UndefinedMetric("no ground-truth regions".into()));
    }
    let points: Vec<CurvePoint> = detections
        .iter()
        .map(|dets| {
            let m = match_threshold(dets, &regions, beta, rule);
            CurvePoint {
                fp_per_frame: m.false_positives as f64 / frames,
                rate: m.detected.iter().filter(|&&d| d).count() as f64 / regions.len() as f64,
            }
        })
        .collect();
    Ok(curve_area(&points))
}

/// Track-based detection criterion: a track counts once at least `alpha`
/// of its regions are detected.
pub fn tbdc(
    detections: &[Vec<RegionBox>],
    gt: &GroundTruth,
    alpha: f64,
    beta: f64,
    rule: OverlapRule,
) -> Result<f64> {
    let tracks = gt
        .tracks
        .as_ref()
        .ok_or_else(|| Error::UnsupportedMetric("ground-truth tracks are not available".into()))?;
    let regions = gt.regions()?;
    let frames = frames_of(gt)? as f64;
    if tracks.is_empty() {
        return Err(Error::UndefinedMetric("no ground-truth tracks".into()));
    }
    if tracks.iter().flatten().any(|&r| r >= regions.len()) {
        return Err(invalid!("track refers to a missing region"));
    }
    let points: Vec<CurvePoint> = detections
        .iter()
        .map(|dets| {
            let m = match_threshold(dets, &regions, beta, rule);
            let hit = tracks
                .iter()
                .filter(|t| {
                    let found = t.iter().filter(|&&r| m.detected[r]).count() as f64;
                    !t.is_empty() && found / t.len() as f64 >= alpha
                })
                .count();
            CurvePoint { fp_per_frame: m.false_positives as f64 / frames, rate: hit as f64 / tracks.len() as f64 }
        })
        .collect();
    Ok(curve_area(&points))
}

/// `count` thresholds at evenly spaced quantiles `k / (count + 1)` of
/// `values`, keeping only positive, distinct ones.
pub fn quantile_thresholds(values: &[f64], count: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return Vec::new();
    }
    sorted.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = (1..=count)
        .map(|k| {
            let q = k as f64 / (count + 1) as f64;
            sorted[((sorted.len() - 1) as f64 * q).round() as usize]
        })
        .filter(|&t| t > 0.0)
        .collect();
    out.dedup();
    out
}

/// Evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub rbdc: Option<f64>,
    pub tbdc: Option<f64>,
    /// Per-video AUC; absent where a video has a single class.
    pub per_video_auc: BTreeMap<String, f64>,
    pub alpha: f64,
    pub beta: f64,
    pub frames: usize,
}

impl EvalReport {
    fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![("auc".to_string(), self.auc.to_string())];
        if let Some(v) = self.rbdc {
            rows.push(("rbdc".into(), v.to_string()));
        }
        if let Some(v) = self.tbdc {
            rows.push(("tbdc".into(), v.to_string()));
        }
        rows.push(("alpha".into(), self.alpha.to_string()));
        rows.push(("beta".into(), self.beta.to_string()));
        rows.push(("frames".into(), self.frames.to_string()));
        for (id, v) in &self.per_video_auc {
            rows.push((format!("auc.{id}"), v.to_string()));
        }
        rows
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut r = EvalReport {
            auc: f64::NAN,
            rbdc: None,
            tbdc: None,
            per_video_auc: BTreeMap::new(),
            alpha: f64::NAN,
            beta: f64::NAN,
            frames: 0,
        };
        let num = |k: &str, v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Format(format!("bad value '{v}' for '{k}'")))
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad report line '{line}'")))?;
            match k {
                "auc" => r.auc = num(k, v)?,
                "rbdc" => r.rbdc = Some(num(k, v)?),
                "tbdc" => r.tbdc = Some(num(k, v)?),
                "alpha" => r.alpha = num(k, v)?,
                "beta" => r.beta = num(k, v)?,
                "frames" => r.frames = num(k, v)? as usize,
                _ => match k.strip_prefix("auc.") {
                    Some(id) => {
                        r.per_video_auc.insert(id.to_string(), num(k, v)?);
                    }
                    None => return Err(Error::Format(format!("unknown report key '{k}'"))),
                },
            }
        }
        if r.auc.is_nan() {
            return Err(Error::Format("report lacks auc".into()));
        }
        Ok(r)
    }

    /// Writes `report.txt` (key=value) and `report.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.to_kv())?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(frame_auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(frame_auc(&[0.8, 0.7, 0.6, 0.5], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(frame_auc(&[0.1, 0.2, 0.9, 0.8], &[true, true, false, false]).unwrap(), 0.0);
        assert!(matches!(frame_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert_eq!(frame_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn auc_equals_pair_counting(data in prop::collection::vec((0u8..20, any::<bool>()), 2..200)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 7.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = frame_auc(&scores, &labels).unwrap();
            prop_assert_eq!(a, pair_count_auc(&scores, &labels));
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 2.0).collect();
            prop_assert_eq!(frame_auc(&warped, &labels).unwrap(), a);
        }

        #[test]
        fn components_are_disjoint(bits in prop::collection::vec(any::<bool>(), 64)) {
            let map = Tensor::<f64>::new(&[8, 8], bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
            let mask: Vec<bool> = bits.clone();
            let comps = components(&mask, 8, 8);
            let mut owner = [usize::MAX; 64];
            for (ci, c) in comps.iter().enumerate() {
                for &p in c {
                    prop_assert_eq!(owner[p], usize::MAX);
                    owner[p] = ci;
                }
            }
            prop_assert_eq!(comps.iter().map(Vec::len).sum::<usize>(), bits.iter().filter(|&&b| b).count());
            prop_assert_eq!(extract_regions(&map, 0, 0.5, 1).unwrap().len(), comps.len());
        }
    }

    fn blocks(cells: &[(usize, usize, usize)], h: usize, w: usize) -> Tensor<f64> {
        let mut d = vec![0.0; h * w];
        for &(y, x, s) in cells {
            for yy in y..y + s {
                for xx in x..x + s {
                    d[yy * w + xx] = 1.0;
                }
            }
        }
        Tensor::new(&[h, w], d).unwrap()
    }

    #[test]
    fn region_examples() {
        assert!(extract_regions(&Tensor::<f64>::zeros(&[8, 8]), 0, 0.5, 1).unwrap().is_empty());
        let one = extract_regions(&blocks(&[(2, 3, 3)], 10, 10), 4, 0.5, 1).unwrap();
        assert_eq!(one, vec![RegionBox { frame_index: 4, x0: 3, y0: 2, x1: 5, y1: 4, score: 1.0 }]);
        let diag = extract_regions(&blocks(&[(0, 0, 2), (2, 2, 2)], 8, 8), 0, 0.5, 1).unwrap();
        assert_eq!(diag.len(), 1);
        assert_eq!((diag[0].x1, diag[0].y1), (3, 3));
        assert!(extract_regions(&blocks(&[(0, 0, 2)], 8, 8), 0, 0.5, 9).unwrap().is_empty());
        assert!(extract_regions(&Tensor::<f64>::zeros(&[8, 8]), 0, 0.0, 1).is_err());
    }

    fn gt_with_boxes(frames: usize, boxes: &[(usize, usize, usize, usize)]) -> GroundTruth {
        let mut masks: Vec<Mask> = (0..frames).map(|_| Mask { height: 16, width: 16, data: vec![false; 256] }).collect();
        for &(f, y, x, s) in boxes {
            for yy in y..y + s {
                for xx in x..x + s {
                    masks[f].data[yy * 16 + xx] = true;
                }
            }
        }
        let labels = masks.iter().map(|m| !m.is_empty()).collect();
        let mut gt = GroundTruth { frame_labels: labels, region_masks: Some(masks), tracks: None };
        gt.link_tracks().unwrap();
        gt
    }

    #[test]
    fn rbdc_examples() {
        let gt = gt_with_boxes(4, &[(1, 2, 2, 4), (2, 3, 3, 4)]);
        let exact = gt.regions().unwrap();
        let dets = vec![exact.clone(); 5];
        assert_eq!(rbdc(&dets, &gt, 0.1, OverlapRule::Iou).unwrap(), 1.0);
        assert_eq!(rbdc(&[vec![], vec![]], &gt, 0.1, OverlapRule::Iou).unwrap(), 0.0);

        let single = gt_with_boxes(1, &[(0, 0, 0, 10)]);
        let weak = RegionBox { frame_index: 0, x0: 9, y0: 0, x1: 13, y1: 9, score: 1.0 };
        assert!(weak.iou(&single.regions().unwrap()[0]) < 0.1);
        let m = match_threshold(&[weak], &single.regions().unwrap(), 0.1, OverlapRule::Iou);
        assert_eq!(m.false_positives, 1);
        assert!(!m.detected[0]);
        assert!(weak.overlap(&single.regions().unwrap()[0], OverlapRule::GtFraction) >= 0.1);

        let no_masks = GroundTruth { frame_labels: vec![false, true], region_masks: None, tracks: None };
        assert!(matches!(rbdc(&dets, &no_masks, 0.1, OverlapRule::Iou), Err(Error::UnsupportedMetric(_))));
        assert!(matches!(tbdc(&dets, &no_masks, 0.1, 0.1, OverlapRule::Iou), Err(Error::UnsupportedMetric(_))));
    }

    #[test]
    fn tbdc_examples() {
        let boxes: Vec<_> = (0..10).map(|f| (f, 2, 2 + f / 3, 4)).collect();
        let gt = gt_with_boxes(10, &boxes);
        assert_eq!(gt.tracks.as_ref().unwrap().len(), 1);
        assert_eq!(gt.tracks.as_ref().unwrap()[0].len(), 10);
        let regions = gt.regions().unwrap();
        assert_eq!(tbdc(&[regions.clone()], &gt, 0.1, 0.1, OverlapRule::Iou).unwrap(), 1.0);
        let one = vec![vec![regions[4]]];
        assert_eq!(tbdc(&one, &gt, 0.1, 0.1, OverlapRule::Iou).unwrap(), 1.0);
        assert_eq!(tbdc(&one, &gt, 0.2, 0.1, OverlapRule::Iou).unwrap(), 0.0);
        assert_eq!(tbdc(&[vec![]], &gt, 0.1, 0.1, OverlapRule::Iou).unwrap(), 0.0);
    }

    #[test]
    fn curve_area_uses_budget_envelope() {
        let pts = [
            CurvePoint { fp_per_frame: 0.5, rate: 0.5 },
            CurvePoint { fp_per_frame: 0.25, rate: 1.0 },
            CurvePoint { fp_per_frame: 3.0, rate: 1.0 },
        ];
        assert!((curve_area(&pts) - 0.75).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn adding_true_detections_never_lowers_criteria(
            gt_cells in prop::collection::vec((0usize..6, 0usize..12, 0usize..12), 1..6),
            noise in prop::collection::vec((0usize..6, 0usize..14, 0usize..14), 0..6),
            pick in prop::collection::vec(any::<bool>(), 6),
        ) {
            let boxes: Vec<_> = gt_cells.iter().map(|&(f, y, x)| (f, y, x, 3)).collect();
            let gt = gt_with_boxes(6, &boxes);
            let regions = gt.regions().unwrap();
            let base: Vec<RegionBox> = noise
                .iter()
                .map(|&(f, y, x)| RegionBox { frame_index: f, x0: x, y0: y, x1: x + 1, y1: y + 1, score: 1.0 })
                .collect();
            let mut more = base.clone();
            more.extend(regions.iter().zip(&pick).filter(|(_, &p)| p).map(|(r, _)| *r));
            let r0 = rbdc(&[base.clone()], &gt, 0.1, OverlapRule::Iou).unwrap();
            let r1 = rbdc(&[more.clone()], &gt, 0.1, OverlapRule::Iou).unwrap();
            prop_assert!(r1 >= r0);
            let t0 = tbdc(&[base], &gt, 0.1, 0.1, OverlapRule::Iou).unwrap();
            let t1 = tbdc(&[more], &gt, 0.1, 0.1, OverlapRule::Iou).unwrap();
            prop_assert!(t1 >= t0);
        }
    }

    #[test]
    fn report_roundtrip() {
        let mut per = BTreeMap::new();
        per.insert("video_01".to_string(), 0.912345678901);
        let r = EvalReport {
            auc: 0.87654321,
            rbdc: Some(0.1 + 0.2),
            tbdc: None,
            per_video_auc: per,
            alpha: 0.1,
            beta: 0.1,
            frames: 1104,
        };
        assert_eq!(EvalReport::parse_kv(&r.to_kv()).unwrap(), r);
        assert!(r.to_csv().starts_with("metric,value\nauc,0.87654321\n"));
    }

    #[test]
    fn quantiles_are_positive_and_sorted() {
        let vals: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let t = quantile_thresholds(&vals, 9);
        assert_eq!(t.len(), 9);
        assert!(t.windows(2).all(|p| p[0] < p[1]));
        assert!(quantile_thresholds(&[0.0; 10], 5).is_empty());
    }
}
