//! Motion-aware temporal box refinement.
//!
//! Each RPN proposal serves as a shared anchor for every frame of the window.
//! A frame-local offset head predicts where the object sits in each frame,
//! then visual and motion features are pooled at those linked boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::{BBox, BoxCoder, BoxDelta};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `F^(M)_{t+i} = F_{t+i} + M_{t+i}` per frame.
pub fn motion_aware_maps(g: &mut Graph<'_>, feats: &[Var], motion: &[Var]) -> Result<Vec<Var>> {
    if feats.len() != motion.len() {
        return Err(Error::Shape(format!("{} feature maps but {} motion maps", feats.len(), motion.len())));
    }
    feats
        .iter()
        .zip(motion)
        .map(|(&f, &m)| {
            if g.shape(f) != g.shape(m) {
                return Err(Error::Shape(format!("{:?} vs {:?}", g.shape(f), g.shape(m))));
            }
            Ok(g.add(f, m))
        })
        .collect()
}

/// RoI-align `boxes` (image pixels) from a `[C,H',W']` map into `[K,C,P,P]`.
pub fn roi_align(g: &mut Graph<'_>, map: Var, boxes: &[BBox], stride: usize, pooled: usize) -> Result<Var> {
    let regions = boxes
        .iter()
        .map(|b| if b.is_degenerate() { Err(Error::DegenerateBox(b.to_array())) } else { Ok(b.to_feature(stride)) })
        .collect::<Result<Vec<_>>>()?;
    Ok(g.roi_align(map, &regions, pooled))
}

/// Decode a delta against `anchor`; keeps the anchor if the result collapses after clipping.
pub fn decode_linked(coder: &BoxCoder, anchor: &BBox, delta: &BoxDelta, image: (f64, f64)) -> BBox {
    match coder.decode_clipped(anchor, delta, image) {
        Ok(b) if b.is_finite() && b.width() >= 1.0 && b.height() >= 1.0 => b,
        _ => *anchor,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TbocConfig {
    pub pooled: usize,
    pub hidden: usize,
}

impl Default for TbocConfig {
    fn default() -> Self {
        Self { pooled: 7, hidden: 128 }
    }
}

/// One proposal linked across the window; `boxes[reference]` is the refined box at `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkedProposal {
    pub anchor: BBox,
    pub boxes: Vec<BBox>,
}

/// Graph outputs of the offset and class heads for `K` anchors.
#[derive(Clone, Debug)]
pub struct TbocOutput {
    /// Per frame `[K, 4]` deltas relative to the anchors.
    pub deltas: Vec<Var>,
    /// `[K, classes + 1]`, training only.
    pub class_logits: Var,
}

impl TbocOutput {
    /// Decode every frame's deltas against the shared anchors.
    pub fn link(&self, g: &Graph<'_>, anchors: &[BBox], image: (f64, f64)) -> Vec<LinkedProposal> {
        let coder = BoxCoder::REFINE;
        anchors
            .iter()
            .enumerate()
            .map(|(k, a)| LinkedProposal {
                anchor: *a,
                boxes: self
                    .deltas
                    .iter()
                    .map(|&d| decode_linked(&coder, a, &BoxDelta::from_slice(&g.value(d).data()[k * 4..k * 4 + 4]), image))
                    .collect(),
            })
            .collect()
    }
}

/// Temporal box offset calibration: a shared per-frame offset head and a
/// class head over the frame-averaged pooled features.
#[derive(Clone, Debug)]
pub struct Tboc {
    pub config: TbocConfig,
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
}

impl Tboc {
    pub fn new(channels: usize, num_classes: usize, config: TbocConfig) -> Self {
        Self {
            fc1: Linear::new("tboc.fc1", channels, config.hidden),
            fc2: Linear::new("tboc.fc2", config.hidden, 4),
            cls: Linear::new("tboc.cls", channels, num_classes + 1),
            config,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.fc1.init(store, rng);
        self.fc2.init_normal(store, 0.001, rng);
        self.cls.init_normal(store, 0.01, rng);
    }

    pub fn forward(&self, g: &mut Graph<'_>, aware: &[Var], anchors: &[BBox], stride: usize) -> Result<TbocOutput> {
        let k = anchors.len();
        let mut pooled = Vec::with_capacity(aware.len());
        for &m in aware {
            let r = roi_align(g, m, anchors, stride, self.config.pooled)?;
            pooled.push(g.mean_trailing(r, 2));
        }
        let mut deltas = Vec::with_capacity(aware.len());
        for &f in &pooled {
            let h = self.fc1.forward(g, f);
            let h = g.relu(h);
            deltas.push(self.fc2.forward(g, h));
        }
        let avg = g.add_n(&pooled);
        let avg = g.scale(avg, 1.0 / pooled.len() as f64);
        let class_logits = self.cls.forward(g, avg);
        debug_assert_eq!(g.shape(class_logits)[0], k);
        Ok(TbocOutput { deltas, class_logits })
    }
}

/// Batched box-level features for `K` proposals over the window.
#[derive(Clone, Debug)]
pub struct RoIFeatureBundle {
    /// `[K,C,P,P]` from the aggregated map at the refined reference box.
    pub aggregated: Var,
    /// Per frame `[K,C,P,P]` from the plain feature maps.
    pub visual: Vec<Var>,
    /// Per frame `[K,C,P,P]` from the motion maps.
    pub motion: Vec<Var>,
    pub count: usize,
}

/// Pool `r^(A)`, `r^(F)` and `r^(M)` at the frame-matched linked boxes.
/// `motion` may be empty when the variant has no motion branch.
pub fn pool_all(
    g: &mut Graph<'_>,
    aggregated: Var,
    feats: &[Var],
    motion: &[Var],
    linked: &[LinkedProposal],
    reference: usize,
    stride: usize,
    pooled: usize,
) -> Result<RoIFeatureBundle> {
    if linked.iter().any(|p| p.boxes.len() != feats.len()) {
        return Err(Error::Shape("linked proposal length differs from window".into()));
    }
    let frame_boxes = |i: usize| linked.iter().map(|p| p.boxes[i]).collect::<Vec<_>>();
    let agg = roi_align(g, aggregated, &frame_boxes(reference), stride, pooled)?;
    let mut visual = Vec::with_capacity(feats.len());
    for (i, &f) in feats.iter().enumerate() {
        visual.push(roi_align(g, f, &frame_boxes(i), stride, pooled)?);
    }
    let mut mot = Vec::with_capacity(motion.len());
    for (i, &m) in motion.iter().enumerate() {
        mot.push(roi_align(g, m, &frame_boxes(i), stride, pooled)?);
    }
    Ok(RoIFeatureBundle { aggregated: agg, visual, motion: mot, count: linked.len() })
}

/// Constant `[C,H,W]` helper used by examples and tests.
pub fn constant_map(c: usize, h: usize, w: usize, v: f64) -> Tensor {
    Tensor::full(&[c, h, w], v)
}
