//! Joint temporal and motion feature generation plus the detection head.
//!
//! Three box-level features per proposal: cosine-weighted visual
//! aggregation, an encoding of the linked box displacements, and a
//! bidirectional GRU summary of the pooled motion features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::{BBox, BoxCoder, BoxDelta};
use crate::mtbr::LinkedProposal;
use crate::nn::{GruCell, Linear};
use crate::params::ParamStore;
use crate::tensor::{softmax_rows, Tensor};

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JtmgConfig {
    pub visual_dim: usize,
    pub diff_dim: usize,
    pub gru_hidden: usize,
    pub head_dim: usize,
    /// Backward GRU reuses the forward parameters.
    #[serde(default)]
    pub tied_gru: bool,
}

impl Default for JtmgConfig {
    fn default() -> Self {
        Self { visual_dim: 256, diff_dim: 64, gru_hidden: 64, head_dim: 256, tied_gru: false }
    }
}

impl JtmgConfig {
    pub fn motion_dim(&self) -> usize {
        2 * self.gru_hidden
    }
}

/// Global average pool `[K,C,P,P] -> [K,C]`.
pub fn gap(g: &mut Graph<'_>, r: Var) -> Var {
    g.mean_trailing(r, 2)
}

/// `w'_i = cos(phi(r^A), phi(r^F_i))` per frame, each `[K,1]`.
pub fn cosine_weights(g: &mut Graph<'_>, aggregated: Var, visual: &[Var]) -> Vec<Var> {
    let a = gap(g, aggregated);
    visual
        .iter()
        .map(|&r| {
            let f = gap(g, r);
            g.cosine_rows(a, f, COSINE_EPS)
        })
        .collect()
}

/// The pre-fc input `sum_i w'_i phi(r^F_i) + phi(r^A)`, `[K,C]`.
pub fn weighted_visual_sum(g: &mut Graph<'_>, aggregated: Var, visual: &[Var], weights: &[Var]) -> Var {
    let mut terms = vec![gap(g, aggregated)];
    for (&r, &w) in visual.iter().zip(weights) {
        let f = gap(g, r);
        terms.push(g.mul(w, f));
    }
    g.add_n(&terms)
}

/// Box displacements `p_i = b_i - b_t`, divided by the reference width and
/// height, one `[4 * T]` row per proposal.
pub fn box_differences(linked: &[LinkedProposal], reference: usize) -> Tensor {
    let t = linked.first().map_or(0, |p| p.boxes.len());
    let mut data = Vec::with_capacity(linked.len() * 4 * t);
    for p in linked {
        let r = p.boxes[reference];
        let (w, h) = (r.width().max(1e-6), r.height().max(1e-6));
        for b in &p.boxes {
            data.extend_from_slice(&[(b.x1 - r.x1) / w, (b.y1 - r.y1) / h, (b.x2 - r.x2) / w, (b.y2 - r.y2) / h]);
        }
    }
    Tensor::new(&[linked.len(), 4 * t], data)
}

#[derive(Clone, Debug)]
pub struct Jtmg {
    pub config: JtmgConfig,
    pub frames: usize,
    visual_fc: Linear,
    diff_fc1: Linear,
    diff_fc2: Linear,
    gru_fwd: GruCell,
    gru_bwd: GruCell,
}

impl Jtmg {
    pub fn new(channels: usize, frames: usize, config: JtmgConfig) -> Self {
        let bwd_prefix = if config.tied_gru { "jtmg.gru_fwd" } else { "jtmg.gru_bwd" };
        Self {
            visual_fc: Linear::new("jtmg.visual_fc", channels, config.visual_dim),
            diff_fc1: Linear::new("jtmg.diff_fc1", 4 * frames, config.diff_dim),
            diff_fc2: Linear::new("jtmg.diff_fc2", config.diff_dim, config.diff_dim),
            gru_fwd: GruCell::new("jtmg.gru_fwd", channels, config.gru_hidden),
            gru_bwd: GruCell::new(bwd_prefix, channels, config.gru_hidden),
            frames,
            config,
        }
    }

    /// Visual fc only; used by variants without the displacement or motion branches.
    pub fn init_visual(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.visual_fc.init(store, rng);
    }

    pub fn init_temporal(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.diff_fc1.init(store, rng);
        self.diff_fc2.init(store, rng);
        self.gru_fwd.init(store, rng);
        if !self.config.tied_gru {
            self.gru_bwd.init(store, rng);
        }
    }

    /// `g^F = relu(fc(x))` for a prepared `[K,C]` input.
    pub fn visual_feature(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let y = self.visual_fc.forward(g, x);
        g.relu(y)
    }

    /// Cosine-gated box-level visual aggregation, `[K, visual_dim]`.
    pub fn box_level_aggregate(&self, g: &mut Graph<'_>, aggregated: Var, visual: &[Var]) -> Var {
        let w = cosine_weights(g, aggregated, visual);
        let x = weighted_visual_sum(g, aggregated, visual, &w);
        self.visual_feature(g, x)
    }

    /// `g^D`, `[K, diff_dim]`.
    pub fn box_diff_encode(&self, g: &mut Graph<'_>, linked: &[LinkedProposal], reference: usize) -> Var {
        let p = g.input(box_differences(linked, reference));
        let h = self.diff_fc1.forward(g, p);
        let h = g.relu(h);
        let h = self.diff_fc2.forward(g, h);
        g.relu(h)
    }

    /// `g^M`: final states of both GRU directions over the pooled motion
    /// sequence, `[K, 2 * hidden]` with the forward half first.
    pub fn motion_gru(&self, g: &mut Graph<'_>, motion: &[Var]) -> Var {
        let seq: Vec<Var> = motion.iter().map(|&r| gap(g, r)).collect();
        let rows = seq.first().map_or(0, |&v| g.shape(v)[0]);
        let f = self.gru_fwd.run(g, seq.iter(), rows);
        let b = self.gru_bwd.run(g, seq.iter().rev(), rows);
        g.concat(&[f, b], 1)
    }
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
}

impl DetectionHead {
    pub fn new(input: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            fc1: Linear::new("head.fc1", input, hidden),
            fc2: Linear::new("head.fc2", hidden, hidden),
            cls: Linear::new("head.cls", hidden, num_classes + 1),
            reg: Linear::new("head.reg", hidden, 4),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
        self.cls.init_normal(store, 0.01, rng);
        self.reg.init_normal(store, 0.001, rng);
    }

    /// Concatenated features to `(class logits [K, classes+1], deltas [K, 4])`.
    pub fn forward(&self, g: &mut Graph<'_>, features: &[Var]) -> (Var, Var) {
        let x = g.concat(features, 1);
        let h = self.fc1.forward(g, x);
        let h = g.relu(h);
        let h = self.fc2.forward(g, h);
        let h = g.relu(h);
        (self.cls.forward(g, h), self.reg.forward(g, h))
    }
}

/// One detection at the reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub probs: Vec<f64>,
    pub bbox: BBox,
    /// Best non-background class, 1-based.
    pub class_id: usize,
    pub score: f64,
}

/// Softmax the logits and apply the deltas to the refined reference boxes.
pub fn decode_detections(logits: &Tensor, deltas: &Tensor, refined: &[BBox], image: (f64, f64)) -> Vec<Detection> {
    let probs = softmax_rows(logits);
    let cols = logits.dim(1);
    refined
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let row = probs.data()[k * cols..(k + 1) * cols].to_vec();
            let d = BoxDelta::from_slice(&deltas.data()[k * 4..k * 4 + 4]);
            let bbox = crate::mtbr::decode_linked(&BoxCoder::REFINE, b, &d, image);
            let (class_id, score) = row
                .iter()
                .enumerate()
                .skip(1)
                .fold((1, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
            Detection { probs: row, bbox, class_id, score }
        })
        .collect()
}
