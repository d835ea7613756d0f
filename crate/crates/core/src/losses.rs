//! Training targets and the three-part detection loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::{assign_targets_with, iou, sample_balanced, BBox, BoxCoder, Label};
use crate::datagen::GroundTruthObject;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub roi_fg_iou: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            roi_batch: 128,
            roi_pos_fraction: 0.25,
            roi_fg_iou: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

/// Per-anchor RPN targets; anchors outside the sample have zero weight.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    pub objectness: Vec<f64>,
    pub cls_weights: Vec<f64>,
    /// `[A, 4]`, zero rows for non-positives.
    pub deltas: Tensor,
    pub reg_weights: Vec<f64>,
    pub sampled: usize,
    pub positives: usize,
}

/// Assign anchors at the configured IoUs and sample a balanced batch.
pub fn rpn_targets(anchors: &[BBox], gts: &[BBox], cfg: &SamplingConfig, rng: &mut impl Rng) -> RpnTargets {
    let a = anchors.len();
    let assign = assign_targets_with(anchors, gts, cfg.rpn_pos_iou, cfg.rpn_neg_iou, &BoxCoder::UNIT);
    let (pos, neg) = sample_balanced(&assign.labels, cfg.rpn_batch, cfg.rpn_pos_fraction, rng);
    let n = (pos.len() + neg.len()).max(1) as f64;
    let mut t = RpnTargets {
        objectness: vec![0.0; a],
        cls_weights: vec![0.0; a],
        deltas: Tensor::zeros(&[a, 4]),
        reg_weights: vec![0.0; a],
        sampled: pos.len() + neg.len(),
        positives: 0,
    };
    for &i in &neg {
        t.cls_weights[i] = 1.0 / n;
    }
    for &i in &pos {
        t.objectness[i] = 1.0;
        t.cls_weights[i] = 1.0 / n;
        if let Some(d) = assign.targets[i] {
            t.deltas.data_mut()[i * 4..i * 4 + 4].copy_from_slice(&d.to_array());
            t.reg_weights[i] = 1.0 / n;
            t.positives += 1;
        }
    }
    t
}

/// `(L_cls, L_reg)`: sample-normalised BCE and positive smooth-L1.
pub fn rpn_loss(g: &mut Graph<'_>, logits: Var, deltas: Var, t: &RpnTargets) -> (Var, Var) {
    let cls = g.bce_with_logits(logits, &t.objectness, &t.cls_weights);
    let reg = g.smooth_l1(deltas, &t.deltas, &t.reg_weights);
    (cls, reg)
}

/// Second-stage proposals chosen for one training window.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    pub boxes: Vec<BBox>,
    /// 0 = background, otherwise the ground-truth class id plus one.
    pub labels: Vec<usize>,
    /// Matched ground-truth index in the reference frame, positives only.
    pub matched: Vec<Option<usize>>,
}

/// Match proposals (plus the ground-truth boxes themselves) at `roi_fg_iou`
/// with no forced positives, then sample a batch.
pub fn sample_rois(proposals: &[BBox], gts: &[GroundTruthObject], cfg: &SamplingConfig, rng: &mut impl Rng) -> RoiSample {
    let mut cands: Vec<BBox> = proposals.to_vec();
    cands.extend(gts.iter().map(|o| o.bbox));
    let labels: Vec<(Label, Option<usize>)> = cands
        .iter()
        .map(|c| {
            let best = gts
                .iter()
                .enumerate()
                .map(|(j, o)| (j, iou(c, &o.bbox)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, b)) if b >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) if v >= cfg.roi_fg_iou => (Label::Positive, Some(j)),
                _ => (Label::Negative, None),
            }
        })
        .collect();
    let flat: Vec<Label> = labels.iter().map(|l| l.0).collect();
    let (pos, neg) = sample_balanced(&flat, cfg.roi_batch, cfg.roi_pos_fraction, rng);
    let mut out = RoiSample { boxes: Vec::new(), labels: Vec::new(), matched: Vec::new() };
    for &i in pos.iter().chain(&neg) {
        out.boxes.push(cands[i]);
        out.matched.push(labels[i].1);
        out.labels.push(labels[i].1.map_or(0, |j| gts[j].class_id + 1));
    }
    out
}

/// Targets for the linked-box refinement loss.
#[derive(Clone, Debug, PartialEq)]
pub struct RefTargets {
    pub labels: Vec<usize>,
    /// Per frame, per proposal delta target against the shared anchor.
    pub frame_deltas: Vec<Vec<Option<[f64; 4]>>>,
}

impl RefTargets {
    /// `N_pos^j` for each frame `j`.
    pub fn positives_per_frame(&self) -> Vec<usize> {
        self.frame_deltas.iter().map(|f| f.iter().filter(|d| d.is_some()).count()).collect()
    }
}

/// Follow each positive anchor's matched track through the window.
pub fn ref_targets(sample: &RoiSample, window_gts: &[Vec<GroundTruthObject>], reference: usize) -> RefTargets {
    let coder = BoxCoder::REFINE;
    let frame_deltas = window_gts
        .iter()
        .map(|frame| {
            sample
                .boxes
                .iter()
                .zip(&sample.matched)
                .map(|(anchor, m)| {
                    let track = window_gts[reference][(*m)?].track_id;
                    let gt = frame.iter().find(|o| o.track_id == track)?;
                    coder.encode(anchor, &gt.bbox).ok().map(|d| d.to_array())
                })
                .collect()
        })
        .collect();
    RefTargets { labels: sample.labels.clone(), frame_deltas }
}

/// `(1/N_ref) sum CE + (1/sum_j N_pos^j) sum_j sum_i SL1`.
pub fn ref_loss(g: &mut Graph<'_>, class_logits: Var, frame_deltas: &[Var], t: &RefTargets) -> Var {
    let k = t.labels.len();
    if k == 0 {
        return g.input(Tensor::scalar(0.0));
    }
    let ce = g.softmax_cross_entropy(class_logits, &t.labels, &vec![1.0 / k as f64; k]);
    let total_pos: usize = t.positives_per_frame().iter().sum();
    if total_pos == 0 {
        return ce;
    }
    let w = 1.0 / total_pos as f64;
    let mut terms = vec![ce];
    for (&d, targets) in frame_deltas.iter().zip(&t.frame_deltas) {
        let mut tgt = Tensor::zeros(&[k, 4]);
        let mut wts = vec![0.0; k];
        for (i, target) in targets.iter().enumerate() {
            if let Some(v) = target {
                tgt.data_mut()[i * 4..i * 4 + 4].copy_from_slice(v);
                wts[i] = w;
            }
        }
        terms.push(g.smooth_l1(d, &tgt, &wts));
    }
    g.add_n(&terms)
}

/// Detection-head targets: labels plus deltas of the matched ground truth
/// against the refined reference boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets {
    pub labels: Vec<usize>,
    pub deltas: Vec<Option<[f64; 4]>>,
}

pub fn det_targets(sample: &RoiSample, refined: &[BBox], gts: &[GroundTruthObject]) -> DetTargets {
    let deltas = refined
        .iter()
        .zip(&sample.matched)
        .map(|(b, m)| BoxCoder::REFINE.encode(b, &gts[(*m)?].bbox).ok().map(|d| d.to_array()))
        .collect();
    DetTargets { labels: sample.labels.clone(), deltas }
}

/// `CE / N + positive SL1 / N`.
pub fn det_loss(g: &mut Graph<'_>, logits: Var, deltas: Var, t: &DetTargets) -> Var {
    let k = t.labels.len();
    if k == 0 {
        return g.input(Tensor::scalar(0.0));
    }
    let w = 1.0 / k as f64;
    let ce = g.softmax_cross_entropy(logits, &t.labels, &vec![w; k]);
    let mut tgt = Tensor::zeros(&[k, 4]);
    let mut wts = vec![0.0; k];
    for (i, d) in t.deltas.iter().enumerate() {
        if let (Some(v), true) = (d, t.labels[i] > 0) {
            tgt.data_mut()[i * 4..i * 4 + 4].copy_from_slice(v);
            wts[i] = w;
        }
    }
    let reg = g.smooth_l1(deltas, &tgt, &wts);
    g.add(ce, reg)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub l_rpn: f64,
    pub l_ref: f64,
    pub l_det: f64,
    pub l_total: f64,
    pub n_ref: usize,
    pub n_pos_per_frame: Vec<usize>,
}

/// `alpha L_rpn + beta L_ref + gamma L_det`; fails on a non-finite component.
pub fn total_loss(l_rpn: f64, l_ref: f64, l_det: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("L_rpn", l_rpn), ("L_ref", l_ref), ("L_det", l_det)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(w.alpha * l_rpn + w.beta * l_ref + w.gamma * l_det)
}

/// Graph version of [`total_loss`].
pub fn total_loss_var(g: &mut Graph<'_>, l_rpn: Var, l_ref: Var, l_det: Var, w: &LossWeights) -> Var {
    let a = g.scale(l_rpn, w.alpha);
    let b = g.scale(l_ref, w.beta);
    let c = g.scale(l_det, w.gamma);
    g.add_n(&[a, b, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::smooth_l1;
    use crate::gradcheck::{check_inputs, Tolerance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obj(track: u32, class: usize, b: BBox) -> GroundTruthObject {
        GroundTruthObject { track_id: track, class_id: class, bbox: b, occluded: false, blur_level: 0.0 }
    }

    #[test]
    fn rpn_uniform_half_is_ln2() {
        let anchors: Vec<BBox> = (0..8).map(|i| BBox::new(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 16.0, 16.0)).collect();
        let gts = [anchors[1], anchors[5]];
        let t = rpn_targets(&anchors, &gts, &SamplingConfig { rpn_batch: 4, ..Default::default() }, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(t.sampled, 4);
        assert_eq!(t.positives, 2);
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[8]));
        let deltas = g.input(Tensor::zeros(&[8, 4]));
        let (cls, reg) = rpn_loss(&mut g, logits, deltas, &t);
        assert!((g.value(cls).item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g.value(reg).item(), 0.0);
    }

    #[test]
    fn rpn_loss_gradient() {
        let anchors: Vec<BBox> = (0..4).map(|i| BBox::new(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 16.0, 16.0)).collect();
        let gts = [BBox::new(1.0, 1.0, 17.0, 15.0)];
        let t = rpn_targets(&anchors, &gts, &SamplingConfig::default(), &mut ChaCha8Rng::seed_from_u64(2));
        let inputs = [Tensor::from_fn(&[4], |i| i as f64 * 0.3 - 0.5), Tensor::from_fn(&[4, 4], |i| (i as f64).sin() * 0.4)];
        let report = check_inputs(&inputs, |g, v| {
            let (a, b) = rpn_loss(g, v[0], v[1], &t);
            g.add(a, b)
        }, Tolerance::default());
        assert!(report.passed(), "{report:?}");
    }

    fn static_fixture(absent: Option<usize>) -> (RoiSample, Vec<Vec<GroundTruthObject>>) {
        let b = BBox::new(20.0, 20.0, 50.0, 44.0);
        let frames: Vec<Vec<GroundTruthObject>> =
            (0..5).map(|j| if Some(j) == absent { vec![] } else { vec![obj(7, 1, b)] }).collect();
        let sample = sample_rois(&[b], &frames[2], &SamplingConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        (sample, frames)
    }

    #[test]
    fn perfect_refinement_is_zero() {
        let (sample, frames) = static_fixture(None);
        let t = ref_targets(&sample, &frames, 2);
        assert_eq!(t.labels, vec![2, 2]);
        assert_eq!(t.positives_per_frame(), vec![2; 5]);
        let mut g = Graph::new();
        let mut logits = Tensor::full(&[2, 3], -800.0);
        logits.data_mut()[2] = 800.0;
        logits.data_mut()[5] = 800.0;
        let logits = g.input(logits);
        let deltas: Vec<Var> = (0..5).map(|_| g.input(Tensor::zeros(&[2, 4]))).collect();
        let l = ref_loss(&mut g, logits, &deltas, &t);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn absent_track_not_counted() {
        let (sample, frames) = static_fixture(Some(4));
        let t = ref_targets(&sample, &frames, 2);
        let per: Vec<usize> = t.positives_per_frame().iter().map(|&n| n / 2).collect();
        assert_eq!(per, vec![1, 1, 1, 1, 0]);
    }

    #[test]
    fn det_loss_cases() {
        let mut g = Graph::new();
        let mut l = Tensor::full(&[2, 3], -800.0);
        l.data_mut()[0] = 800.0;
        l.data_mut()[3] = 800.0;
        let logits = g.input(l);
        let deltas = g.input(Tensor::from_fn(&[2, 4], |i| i as f64));
        let t = DetTargets { labels: vec![0, 0], deltas: vec![None, None] };
        let loss = det_loss(&mut g, logits, deltas, &t);
        assert_eq!(g.value(loss).item(), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert!((smooth_l1(1.0 - 1e-12) - smooth_l1(1.0 + 1e-12)).abs() < 1e-11);
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, &w).unwrap(), 6.0);
        assert_eq!(total_loss(0.0, 2.0, 0.0, &w).unwrap(), 2.0);
        let w2 = LossWeights { alpha: 2.0, beta: 0.0, gamma: 0.0 };
        assert_eq!(total_loss(1.5, 2.0, 3.0, &w2).unwrap(), 3.0);
        let err = total_loss(1.0, f64::NAN, 0.0, &w).unwrap_err();
        assert!(err.to_string().contains("L_ref"));
    }
}
