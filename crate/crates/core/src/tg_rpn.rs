//! Temporally gated region proposal network.
//!
//! Pixel-level fusion of neighbouring feature maps into the reference map
//! through complementary sigmoid gates, pixel-level motion maps built from
//! feature differences with channel attention, and the RPN that runs on the
//! fused map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::{nms, score_order, BBox, BoxCoder, BoxDelta};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Complementary gate maps for one neighbour pair, each `[1, H', W']`.
#[derive(Clone, Copy, Debug)]
pub struct GatePair {
    pub reference: Var,
    pub neighbour: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    #[default]
    Sum,
    Mean,
}

fn check_same(g: &Graph<'_>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Gate network: two 3x3 convs over the concatenated pair, one output channel.
#[derive(Clone, Debug)]
pub struct GateModel {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl GateModel {
    pub fn new(channels: usize, hidden: usize) -> Self {
        Self {
            conv1: Conv2d::new("gam.conv1", 2 * channels, hidden, 3, 1),
            conv2: Conv2d::new("gam.conv2", hidden, 1, 3, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init_normal(store, 0.01, 0.0, rng);
    }

    /// `A_t = sigmoid(conv(F_t ++ F_{t-i}))`, `A_{t-i} = 1 - A_t`.
    pub fn gate(&self, g: &mut Graph<'_>, reference: Var, neighbour: Var) -> Result<GatePair> {
        check_same(g, reference, neighbour)?;
        let x = g.concat(&[reference, neighbour], 0);
        let h = self.conv1.forward(g, x);
        let h = g.relu(h);
        let logit = self.conv2.forward(g, h);
        let a_ref = g.sigmoid(logit);
        let a_nb = g.one_minus(a_ref);
        Ok(GatePair { reference: a_ref, neighbour: a_nb })
    }
}

/// `F^(G) = A_t * F_t + A_{t-i} * F_{t-i}`, gates broadcast over channels.
pub fn gated_fuse(g: &mut Graph<'_>, reference: Var, neighbour: Var, gates: &GatePair) -> Result<Var> {
    check_same(g, reference, neighbour)?;
    let a = g.mul(gates.reference, reference);
    let b = g.mul(gates.neighbour, neighbour);
    Ok(g.add(a, b))
}

/// Combine gated maps by elementwise sum or mean.
pub fn aggregate(g: &mut Graph<'_>, gated: &[Var], mode: AggregateMode) -> Result<Var> {
    if gated.is_empty() {
        return Err(Error::Shape("nothing to aggregate".into()));
    }
    for &v in &gated[1..] {
        check_same(g, gated[0], v)?;
    }
    let s = g.add_n(gated);
    Ok(match mode {
        AggregateMode::Sum => s,
        AggregateMode::Mean => g.scale(s, 1.0 / gated.len() as f64),
    })
}

/// Motion attention: bias-free convs on `F_{t-i} - F_t` followed by
/// squeeze-excite channel weighting.
#[derive(Clone, Debug)]
pub struct MotionModel {
    conv1: Conv2d,
    conv2: Conv2d,
    squeeze: Linear,
    excite: Linear,
}

impl MotionModel {
    pub const REDUCTION: usize = 4;

    pub fn new(channels: usize) -> Self {
        let mid = (channels / Self::REDUCTION).max(1);
        Self {
            conv1: Conv2d::new("mam.conv1", channels, channels, 3, 1).without_bias(),
            conv2: Conv2d::new("mam.conv2", channels, channels, 3, 1).without_bias(),
            squeeze: Linear::new("mam.cwa.fc1", channels, mid),
            excite: Linear::new("mam.cwa.fc2", mid, channels),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init_normal(store, 0.5 * (1.0 / (9.0 * self.conv2.in_ch as f64)).sqrt(), 0.0, rng);
        self.squeeze.init(store, rng);
        self.excite.init(store, rng);
    }

    /// Channel weights in (0, 1) for a `[C, H, W]` map, shape `[C, 1, 1]`.
    pub fn channel_weights(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let c = g.shape(x)[0];
        let z = g.mean_trailing(x, 2);
        let z = g.reshape(z, &[1, c]);
        let h = self.squeeze.forward(g, z);
        let h = g.relu(h);
        let s = self.excite.forward(g, h);
        let s = g.sigmoid(s);
        g.reshape(s, &[c, 1, 1])
    }

    /// `M_{t-i} = CWA(conv(F_{t-i} - F_t))`.
    pub fn motion(&self, g: &mut Graph<'_>, reference: Var, neighbour: Var) -> Result<Var> {
        check_same(g, reference, neighbour)?;
        let diff = g.sub(neighbour, reference);
        let h = self.conv1.forward(g, diff);
        let h = g.relu(h);
        let x = self.conv2.forward(g, h);
        let w = self.channel_weights(g, x);
        Ok(g.mul(x, w))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { scales: vec![16.0, 32.0, 64.0], ratios: vec![0.5, 1.0, 2.0] }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Anchor boxes for an `h x w` grid, ordered anchor-type-major:
/// index `a * h * w + y * w + x`.
pub fn generate_anchors(h: usize, w: usize, stride: usize, cfg: &AnchorConfig) -> Vec<BBox> {
    let s = stride as f64;
    let mut out = Vec::with_capacity(cfg.per_cell() * h * w);
    for &scale in &cfg.scales {
        for &ratio in &cfg.ratios {
            let bw = scale / ratio.sqrt();
            let bh = scale * ratio.sqrt();
            for y in 0..h {
                for x in 0..w {
                    let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                    out.push(BBox::new(cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh));
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpnConfig {
    pub nms_iou: f64,
    pub pre_nms_top_n: usize,
    pub top_k_train: usize,
    pub top_k_eval: usize,
    pub min_size: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self { nms_iou: 0.7, pre_nms_top_n: 1000, top_k_train: 300, top_k_eval: 100, min_size: 2.0 }
    }
}

/// Raw per-anchor RPN outputs.
#[derive(Clone, Debug)]
pub struct RpnOutput {
    /// Objectness logits `[A]`.
    pub logits: Var,
    /// Deltas `[A, 4]`.
    pub deltas: Var,
    pub anchors: Vec<BBox>,
}

#[derive(Clone, Debug)]
pub struct RpnHead {
    pub anchors: AnchorConfig,
    conv: Conv2d,
    cls: Conv2d,
    reg: Conv2d,
}

impl RpnHead {
    pub fn new(channels: usize, anchors: AnchorConfig) -> Self {
        let a = anchors.per_cell();
        Self {
            conv: Conv2d::new("rpn.conv", channels, channels, 3, 1),
            cls: Conv2d::new("rpn.cls", channels, a, 1, 1),
            reg: Conv2d::new("rpn.reg", channels, 4 * a, 1, 1),
            anchors,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv.init_normal(store, 0.01, 0.0, rng);
        self.cls.init_normal(store, 0.01, 0.0, rng);
        self.reg.init_normal(store, 0.01, 0.0, rng);
    }

    pub fn forward(&self, g: &mut Graph<'_>, fmap: Var, stride: usize) -> RpnOutput {
        let (h, w) = (g.shape(fmap)[1], g.shape(fmap)[2]);
        let a = self.anchors.per_cell();
        let x = self.conv.forward(g, fmap);
        let x = g.relu(x);
        let logits = self.cls.forward(g, x);
        let logits = g.reshape(logits, &[a * h * w]);
        // regression channels are coordinate-major: channel = coord * A + a
        let deltas = self.reg.forward(g, x);
        let deltas = g.reshape(deltas, &[4, a * h * w]);
        let deltas = g.transpose(deltas);
        RpnOutput { logits, deltas, anchors: generate_anchors(h, w, stride, &self.anchors) }
    }
}

/// Decode, clip, filter, NMS and keep the `top_k` best proposals.
pub fn select_proposals(
    logits: &Tensor,
    deltas: &Tensor,
    anchors: &[BBox],
    image: (f64, f64),
    cfg: &RpnConfig,
    top_k: usize,
) -> Vec<(BBox, f64)> {
    let order = score_order(logits.data().iter().copied());
    let mut cands = Vec::new();
    for &i in order.iter() {
        if cands.len() >= cfg.pre_nms_top_n {
            break;
        }
        let d = BoxDelta::from_slice(&deltas.data()[i * 4..i * 4 + 4]);
        let Ok(b) = BoxCoder::UNIT.decode_clipped(&anchors[i], &d, image) else { continue };
        if b.width() < cfg.min_size || b.height() < cfg.min_size || !b.is_finite() {
            continue;
        }
        cands.push((b, logits.data()[i]));
    }
    let keep = nms(&cands, cfg.nms_iou);
    keep.into_iter().take(top_k).map(|i| (cands[i].0, crate::tensor::sigmoid(cands[i].1))).collect()
}
