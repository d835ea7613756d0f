//! Box geometry, regression encoding, NMS and target assignment.
//!
//! Boxes are corner format `(x1, y1, x2, y2)` in pixels everywhere; the
//! centre/size parameterisation only appears inside [`BoxDelta`].

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on `dw`/`dh` before exponentiation.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Mirror about the vertical centre line of an image `width` wide.
    pub fn hflip(&self, width: f64) -> BBox {
        BBox::new(width - self.x2, self.y1, width - self.x1, self.y2)
    }

    /// Box scaled into a grid with the given stride.
    pub fn to_feature(&self, stride: usize) -> [f64; 4] {
        let s = stride as f64;
        [self.x1 / s, self.y1 / s, self.x2 / s, self.y2 / s]
    }
}

/// Intersection over union; degenerate boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta { dx: 0.0, dy: 0.0, dw: 0.0, dh: 0.0 };

    pub fn from_slice(v: &[f64]) -> Self {
        Self { dx: v[0], dy: v[1], dw: v[2], dh: v[3] }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }
}

/// Delta encoder with per-coordinate scale factors.
///
/// Unit weights give the plain Faster R-CNN parameterisation; the second-stage
/// heads use larger weights so their targets are not crushed into the
/// quadratic part of smooth-L1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self::UNIT
    }
}

impl BoxCoder {
    pub const UNIT: BoxCoder = BoxCoder { weights: [1.0, 1.0, 1.0, 1.0] };
    pub const REFINE: BoxCoder = BoxCoder { weights: [10.0, 10.0, 5.0, 5.0] };

    pub fn encode(&self, anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
        if anchor.is_degenerate() {
            return Err(Error::DegenerateBox(anchor.to_array()));
        }
        if target.is_degenerate() {
            return Err(Error::DegenerateBox(target.to_array()));
        }
        let (ax, ay) = anchor.center();
        let (tx, ty) = target.center();
        let [wx, wy, ww, wh] = self.weights;
        Ok(BoxDelta {
            dx: wx * (tx - ax) / anchor.width(),
            dy: wy * (ty - ay) / anchor.height(),
            dw: ww * (target.width() / anchor.width()).ln(),
            dh: wh * (target.height() / anchor.height()).ln(),
        })
    }

    pub fn decode(&self, anchor: &BBox, delta: &BoxDelta) -> Result<BBox> {
        if anchor.is_degenerate() {
            return Err(Error::DegenerateBox(anchor.to_array()));
        }
        let (ax, ay) = anchor.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        let [wx, wy, ww, wh] = self.weights;
        let cx = ax + delta.dx / wx * aw;
        let cy = ay + delta.dy / wy * ah;
        let w = aw * (delta.dw / ww).min(MAX_LOG_SCALE).exp();
        let h = ah * (delta.dh / wh).min(MAX_LOG_SCALE).exp();
        Ok(BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h))
    }

    /// Decode and clip to an image of `(width, height)`.
    pub fn decode_clipped(&self, anchor: &BBox, delta: &BoxDelta, image: (f64, f64)) -> Result<BBox> {
        Ok(self.decode(anchor, delta)?.clip(image.0, image.1))
    }
}

pub fn encode_delta(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    BoxCoder::UNIT.encode(anchor, target)
}

pub fn decode_delta(anchor: &BBox, delta: &BoxDelta) -> Result<BBox> {
    BoxCoder::UNIT.decode(anchor, delta)
}

/// Greedy NMS. Candidates are visited by descending score, ties broken by lower
/// index; returns kept indices in visiting order.
pub fn nms(boxes: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let order = score_order(boxes.iter().map(|b| b.1));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i].0, &boxes[j].0) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Indices sorted by descending score, then ascending index.
pub fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<Label>,
    /// Best-overlap ground truth per candidate (set for every positive).
    pub matched: Vec<Option<usize>>,
    /// Regression target for positives, encoded with the caller's coder.
    pub targets: Vec<Option<BoxDelta>>,
    pub max_iou: Vec<f64>,
}

impl AssignmentResult {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| **l == Label::Positive).map(|(i, _)| i)
    }

    pub fn num_positive(&self) -> usize {
        self.positives().count()
    }
}

/// Label candidates against ground truth.
///
/// Positive when max IoU >= `pos_iou`, or when the candidate attains the best
/// (non-zero) IoU for some ground truth; negative when max IoU < `neg_iou`;
/// otherwise ignored.
pub fn assign_targets(candidates: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64) -> AssignmentResult {
    assign_targets_with(candidates, gts, pos_iou, neg_iou, &BoxCoder::UNIT)
}

pub fn assign_targets_with(
    candidates: &[BBox],
    gts: &[BBox],
    pos_iou: f64,
    neg_iou: f64,
    coder: &BoxCoder,
) -> AssignmentResult {
    debug_assert!((0.0..=1.0).contains(&neg_iou) && neg_iou <= pos_iou && pos_iou <= 1.0);
    let n = candidates.len();
    let mut res = AssignmentResult {
        labels: vec![Label::Negative; n],
        matched: vec![None; n],
        targets: vec![None; n],
        max_iou: vec![0.0; n],
    };
    if gts.is_empty() {
        return res;
    }
    let table: Vec<Vec<f64>> = candidates.iter().map(|c| gts.iter().map(|g| iou(c, g)).collect()).collect();
    let mut gt_best = vec![0.0f64; gts.len()];
    for row in &table {
        for (j, &v) in row.iter().enumerate() {
            gt_best[j] = gt_best[j].max(v);
        }
    }
    for (i, row) in table.iter().enumerate() {
        let (best_j, best) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        res.max_iou[i] = best;
        let forced = row.iter().zip(&gt_best).any(|(&v, &b)| b > 0.0 && v == b);
        res.labels[i] = if best >= pos_iou || forced {
            Label::Positive
        } else if best < neg_iou {
            Label::Negative
        } else {
            Label::Ignore
        };
        if res.labels[i] == Label::Positive {
            res.matched[i] = Some(best_j);
            res.targets[i] = coder.encode(&candidates[i], &gts[best_j]).ok();
        } else if best > 0.0 {
            res.matched[i] = Some(best_j);
        }
    }
    res
}

/// Sample up to `total` labelled candidates with at most `pos_fraction` positives.
/// Returns `(positive indices, negative indices)`, each sorted.
pub fn sample_balanced(
    labels: &[Label],
    total: usize,
    pos_fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Positive).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Negative).collect();
    let max_pos = (total as f64 * pos_fraction).floor() as usize;
    if pos.len() > max_pos {
        pos.shuffle(rng);
        pos.truncate(max_pos);
    }
    let max_neg = total - pos.len();
    if neg.len() > max_neg {
        neg.shuffle(rng);
        neg.truncate(max_neg);
    }
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}
