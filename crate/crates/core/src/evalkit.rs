//! Detection scoring: per-class average precision, motion-split evaluation
//! and sequence-level rescoring across frames.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::datagen::VideoSample;
use crate::error::{Error, Result};

/// One scored box in the detection dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub frame: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// One ground-truth instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub video_id: String,
    pub frame: usize,
    pub track_id: u32,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Flatten video annotations, keeping only the listed frames of each video
/// (all frames when `frames` is `None`).
pub fn gt_records(videos: &[VideoSample], frames: Option<&dyn Fn(&VideoSample) -> Vec<usize>>) -> Vec<GtRecord> {
    let mut out = Vec::new();
    for v in videos {
        let keep: Vec<usize> = match frames {
            Some(f) => f(v),
            None => (0..v.annotations.len()).collect(),
        };
        for t in keep {
            for o in &v.annotations[t] {
                out.push(GtRecord { video_id: v.video_id.clone(), frame: t, track_id: o.track_id, class_id: o.class_id, bbox: o.bbox });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionBucket {
    Slow,
    Medium,
    Fast,
}

impl MotionBucket {
    pub const ALL: [MotionBucket; 3] = [MotionBucket::Slow, MotionBucket::Medium, MotionBucket::Fast];

    pub fn from_mean_iou(v: f64) -> Self {
        if v > 0.9 {
            MotionBucket::Slow
        } else if v < 0.7 {
            MotionBucket::Fast
        } else {
            MotionBucket::Medium
        }
    }
}

/// Bucket each ground truth by its mean IoU with the same track within
/// `radius` frames; instances with no neighbours are slow.
pub fn motion_split(gts: &[GtRecord], radius: usize) -> Vec<MotionBucket> {
    let mut by_track: BTreeMap<(&str, u32), BTreeMap<usize, BBox>> = BTreeMap::new();
    for g in gts {
        by_track.entry((g.video_id.as_str(), g.track_id)).or_default().insert(g.frame, g.bbox);
    }
    gts.iter()
        .map(|g| {
            let track = &by_track[&(g.video_id.as_str(), g.track_id)];
            let lo = g.frame.saturating_sub(radius);
            let ious: Vec<f64> =
                track.range(lo..=g.frame + radius).filter(|(&f, _)| f != g.frame).map(|(_, b)| iou(&g.bbox, b)).collect();
            if ious.is_empty() {
                MotionBucket::Slow
            } else {
                MotionBucket::from_mean_iou(ious.iter().sum::<f64>() / ious.len() as f64)
            }
        })
        .collect()
}

/// All-point interpolated area under a precision/recall curve.
pub fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len()).filter(|&i| mrec[i] != mrec[i - 1]).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
}

/// Average precision for one class.
///
/// Detections are visited by descending score (stable for ties); each takes
/// its highest-IoU ground truth in the same frame. Ground truth flagged in
/// `ignored` is excluded from recall, and detections landing on it count
/// neither way. Returns `None` when no counted ground truth exists.
pub fn average_precision_masked(
    dets: &[DetectionRecord],
    gts: &[GtRecord],
    class_id: usize,
    iou_thresh: f64,
    ignored: Option<&[bool]>,
) -> Option<f64> {
    let is_ignored = |i: usize| ignored.is_some_and(|m| m[i]);
    let mut frames: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    let mut npos = 0;
    for (i, g) in gts.iter().enumerate() {
        if g.class_id == class_id {
            frames.entry((g.video_id.as_str(), g.frame)).or_default().push(i);
            if !is_ignored(i) {
                npos += 1;
            }
        }
    }
    if npos == 0 {
        return None;
    }
    let mut order: Vec<&DetectionRecord> = dets.iter().filter(|d| d.class_id == class_id).collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut matched = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut recall, mut precision) = (Vec::new(), Vec::new());
    for d in order {
        let best = frames.get(&(d.video_id.as_str(), d.frame)).and_then(|cands| {
            cands.iter().map(|&i| (i, iou(&d.bbox, &gts[i].bbox))).fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((i, v)),
            })
        });
        match best {
            Some((i, v)) if v >= iou_thresh => {
                if is_ignored(i) {
                    continue;
                }
                if matched[i] {
                    fp += 1;
                } else {
                    matched[i] = true;
                    tp += 1;
                }
            }
            _ => fp += 1,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    Some(interpolated_ap(&recall, &precision))
}

pub fn average_precision(dets: &[DetectionRecord], gts: &[GtRecord], class_id: usize, iou_thresh: f64) -> Option<f64> {
    average_precision_masked(dets, gts, class_id, iou_thresh, None)
}

fn mean_defined(aps: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = aps.iter().flatten().copied().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub motion_radius: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_thresh: 0.5, motion_radius: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub per_class: Vec<Option<f64>>,
    pub map_slow: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_fast: Option<f64>,
    /// Ground-truth counts per bucket (slow, medium, fast).
    pub bucket_counts: [usize; 3],
    pub num_detections: usize,
    pub num_gts: usize,
}

impl EvalReport {
    pub fn bucket(&self, b: MotionBucket) -> Option<f64> {
        match b {
            MotionBucket::Slow => self.map_slow,
            MotionBucket::Medium => self.map_medium,
            MotionBucket::Fast => self.map_fast,
        }
    }
}

/// Overall and motion-split mAP. `split_gts` supplies the track context for
/// bucketing (usually every annotated frame) while `gts` holds the evaluated
/// instances.
pub fn evaluate(
    dets: &[DetectionRecord],
    gts: &[GtRecord],
    split_gts: &[GtRecord],
    num_classes: usize,
    cfg: &EvalConfig,
) -> EvalReport {
    let context = motion_split(split_gts, cfg.motion_radius);
    let lookup: BTreeMap<(&str, usize, u32), MotionBucket> =
        split_gts.iter().zip(&context).map(|(g, &b)| ((g.video_id.as_str(), g.frame, g.track_id), b)).collect();
    let buckets: Vec<MotionBucket> = gts
        .iter()
        .map(|g| lookup.get(&(g.video_id.as_str(), g.frame, g.track_id)).copied().unwrap_or(MotionBucket::Slow))
        .collect();
    let per_class: Vec<Option<f64>> =
        (0..num_classes).map(|c| average_precision(dets, gts, c, cfg.iou_thresh)).collect();
    let split = |b: MotionBucket| {
        let mask: Vec<bool> = buckets.iter().map(|&x| x != b).collect();
        let aps: Vec<Option<f64>> =
            (0..num_classes).map(|c| average_precision_masked(dets, gts, c, cfg.iou_thresh, Some(&mask))).collect();
        mean_defined(&aps)
    };
    let mut counts = [0; 3];
    for b in &buckets {
        counts[*b as usize] += 1;
    }
    EvalReport {
        map: mean_defined(&per_class).unwrap_or(0.0),
        per_class,
        map_slow: split(MotionBucket::Slow),
        map_medium: split(MotionBucket::Medium),
        map_fast: split(MotionBucket::Fast),
        bucket_counts: counts,
        num_detections: dets.len(),
        num_gts: gts.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeqNmsConfig {
    pub link_iou: f64,
    pub suppress_iou: f64,
}

impl Default for SeqNmsConfig {
    fn default() -> Self {
        Self { link_iou: 0.5, suppress_iou: 0.5 }
    }
}

/// Best path found by the dynamic program: `(score sum, [(frame slot, index)])`.
fn best_path(frames: &[Vec<(BBox, f64)>], alive: &[Vec<bool>], linked: &dyn Fn(usize, usize, usize) -> bool) -> Option<(f64, Vec<(usize, usize)>)> {
    let mut acc: Vec<Vec<(f64, Option<usize>)>> = Vec::with_capacity(frames.len());
    let mut best: Option<(f64, usize, usize)> = None;
    for (f, dets) in frames.iter().enumerate() {
        let mut row = Vec::with_capacity(dets.len());
        for (i, d) in dets.iter().enumerate() {
            if !alive[f][i] {
                row.push((f64::NEG_INFINITY, None));
                continue;
            }
            let mut entry = (d.1, None);
            if f > 0 {
                for (j, &(s, _)) in acc[f - 1].iter().enumerate() {
                    if alive[f - 1][j] && linked(f, j, i) && s + d.1 > entry.0 {
                        entry = (s + d.1, Some(j));
                    }
                }
            }
            if best.is_none_or(|b| entry.0 > b.0) {
                best = Some((entry.0, f, i));
            }
            row.push(entry);
        }
        acc.push(row);
    }
    let (score, mut f, mut i) = best?;
    let mut path = vec![(f, i)];
    while let Some(j) = acc[f][i].1 {
        f -= 1;
        i = j;
        path.push((f, i));
    }
    path.reverse();
    Some((score, path))
}

/// Sequence rescoring for the detections of one video.
///
/// Per class, repeatedly takes the maximum-score chain of detections linked
/// across consecutive frames, assigns every member the chain's mean score,
/// and drops same-frame overlaps of the members. Stops once no links remain
/// among the surviving detections, which keep their scores. Boxes and class
/// ids are never modified.
pub fn seq_nms(dets: &[DetectionRecord], cfg: &SeqNmsConfig) -> Vec<DetectionRecord> {
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        classes.entry(d.class_id).or_default().push(i);
    }
    let mut out = Vec::new();
    for idx in classes.values() {
        let first = idx.iter().map(|&i| dets[i].frame).min().unwrap_or(0);
        let last = idx.iter().map(|&i| dets[i].frame).max().unwrap_or(0);
        let mut slots: Vec<Vec<usize>> = vec![Vec::new(); last - first + 1];
        for &i in idx {
            slots[dets[i].frame - first].push(i);
        }
        let frames: Vec<Vec<(BBox, f64)>> = slots.iter().map(|s| s.iter().map(|&i| (dets[i].bbox, dets[i].score)).collect()).collect();
        let links: Vec<Vec<Vec<bool>>> = (0..frames.len())
            .map(|f| {
                if f == 0 {
                    return Vec::new();
                }
                frames[f - 1].iter().map(|p| frames[f].iter().map(|c| iou(&p.0, &c.0) >= cfg.link_iou).collect()).collect()
            })
            .collect();
        let linked = |f: usize, j: usize, i: usize| links[f][j][i];
        let mut alive: Vec<Vec<bool>> = frames.iter().map(|f| vec![true; f.len()]).collect();
        let mut scores: Vec<Vec<f64>> = frames.iter().map(|f| f.iter().map(|d| d.1).collect()).collect();
        let mut kept: Vec<Vec<bool>> = alive.clone();
        loop {
            let any_link = (1..frames.len()).any(|f| {
                (0..frames[f - 1].len()).any(|j| alive[f - 1][j] && (0..frames[f].len()).any(|i| alive[f][i] && linked(f, j, i)))
            });
            if !any_link {
                break;
            }
            let Some((sum, path)) = best_path(&frames, &alive, &linked) else { break };
            let mean = sum / path.len() as f64;
            for &(f, i) in &path {
                scores[f][i] = mean;
                alive[f][i] = false;
                for k in 0..frames[f].len() {
                    if alive[f][k] && iou(&frames[f][i].0, &frames[f][k].0) >= cfg.suppress_iou {
                        alive[f][k] = false;
                        kept[f][k] = false;
                    }
                }
            }
        }
        for (f, slot) in slots.iter().enumerate() {
            for (k, &i) in slot.iter().enumerate() {
                if kept[f][k] {
                    out.push(DetectionRecord { score: scores[f][k], ..dets[i].clone() });
                }
            }
        }
    }
    out.sort_by(|a, b| a.frame.cmp(&b.frame).then(a.class_id.cmp(&b.class_id)).then(b.score.total_cmp(&a.score)));
    out
}

/// Apply [`seq_nms`] video by video.
pub fn seq_nms_all(dets: &[DetectionRecord], cfg: &SeqNmsConfig) -> Vec<DetectionRecord> {
    let mut videos: BTreeMap<&str, Vec<DetectionRecord>> = BTreeMap::new();
    for d in dets {
        videos.entry(d.video_id.as_str()).or_default().push(d.clone());
    }
    videos.values().flat_map(|v| seq_nms(v, cfg)).collect()
}

pub fn write_detections(path: &Path, dets: &[DetectionRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in dets {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| Error::AnnotationParse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
