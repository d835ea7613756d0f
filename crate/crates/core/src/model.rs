//! The full two-stage video detector and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::boxes::{nms, BBox};
use crate::datagen::GroundTruthObject;
use crate::error::{Error, Result};
use crate::jtmg::{decode_detections, gap, DetectionHead, Jtmg, JtmgConfig};
use crate::losses::{
    det_loss, det_targets, ref_loss, ref_targets, rpn_loss, rpn_targets, sample_rois, total_loss, total_loss_var, LossReport,
    LossWeights, RoiSample, RpnTargets, SamplingConfig,
};
use crate::mtbr::{motion_aware_maps, pool_all, LinkedProposal, RoIFeatureBundle, Tboc, TbocConfig, TbocOutput};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tg_rpn::{aggregate, gated_fuse, select_proposals, AggregateMode, AnchorConfig, GateModel, GatePair, MotionModel, RpnConfig, RpnHead, RpnOutput};

/// Ablation ladder. Each step adds one mechanism to the previous one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Single-frame two-stage detector.
    A,
    /// Adds pixel-level gated fusion of neighbouring maps.
    B,
    /// Adds motion maps and linked-box refinement with plain feature summation.
    C,
    /// Cosine-weighted box-level aggregation.
    D,
    /// Adds displacement and recurrent motion features.
    #[default]
    E,
    /// `E` with sequence rescoring at evaluation.
    F,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F];

    pub fn letter(self) -> char {
        match self {
            Variant::A => 'a',
            Variant::B => 'b',
            Variant::C => 'c',
            Variant::D => 'd',
            Variant::E => 'e',
            Variant::F => 'f',
        }
    }

    pub fn gating(self) -> bool {
        self >= Variant::B
    }

    pub fn refinement(self) -> bool {
        self >= Variant::C
    }

    pub fn cosine(self) -> bool {
        self >= Variant::D
    }

    pub fn box_motion(self) -> bool {
        self >= Variant::E
    }

    pub fn seq_nms(self) -> bool {
        self == Variant::F
    }

    /// Parse a comma-separated list such as `a,c,e`.
    pub fn parse_list(s: &str) -> Result<Vec<Variant>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| s.eq_ignore_ascii_case(&v.letter().to_string()))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}, expected one of a-f")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Past frames in the window.
    pub before: usize,
    /// Future frames in the window.
    pub after: usize,
    /// Foreground classes; the heads add one background class.
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub gate_hidden: usize,
    pub aggregate: AggregateMode,
    pub anchors: AnchorConfig,
    pub rpn: RpnConfig,
    pub tboc: TbocConfig,
    pub jtmg: JtmgConfig,
    pub sampling: SamplingConfig,
    pub loss_weights: LossWeights,
    pub score_thresh: f64,
    pub det_nms_iou: f64,
    pub max_detections: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::E,
            before: 2,
            after: 2,
            num_classes: 2,
            backbone: BackboneConfig::default(),
            gate_hidden: 32,
            aggregate: AggregateMode::Sum,
            anchors: AnchorConfig::default(),
            rpn: RpnConfig::default(),
            tboc: TbocConfig::default(),
            jtmg: JtmgConfig::default(),
            sampling: SamplingConfig::default(),
            loss_weights: LossWeights::default(),
            score_thresh: 0.05,
            det_nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

impl ModelConfig {
    pub fn window_len(&self) -> usize {
        self.before + self.after + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.variant.gating() && self.window_len() < 2 {
            return bad(format!("variant {} needs at least one neighbouring frame", self.variant));
        }
        if !self.backbone.out_channels().is_multiple_of(self.backbone.groups) {
            return bad("backbone channels must divide into norm groups".into());
        }
        if self.anchors.scales.is_empty() || self.anchors.ratios.is_empty() {
            return bad("anchor scales and ratios must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.score_thresh) {
            return bad("score_thresh must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// First-stage values for one window.
#[derive(Clone, Debug)]
pub struct StageOne {
    /// Backbone maps in temporal order; a single map for the single-frame variant.
    pub maps: Vec<Var>,
    pub reference: usize,
    pub gates: Vec<GatePair>,
    pub gated: Vec<Var>,
    pub aggregated: Var,
    /// Motion maps per frame, zero at the reference; empty without refinement.
    pub motion: Vec<Var>,
    pub aware: Vec<Var>,
    pub rpn: RpnOutput,
}

/// Second-stage values for `K` regions.
#[derive(Clone, Debug)]
pub struct StageTwo {
    pub tboc: Option<TbocOutput>,
    pub linked: Vec<LinkedProposal>,
    pub bundle: RoIFeatureBundle,
    pub g_visual: Var,
    pub g_diff: Var,
    pub g_motion: Var,
    pub class_logits: Var,
    pub deltas: Var,
}

impl StageTwo {
    pub fn refined(&self, reference: usize) -> Vec<BBox> {
        self.linked.iter().map(|p| p.boxes[reference]).collect()
    }
}

/// Every discrete choice of one training step, so that the loss becomes a
/// smooth function of the parameters when replayed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub rpn: RpnTargets,
    pub rois: RoiSample,
    pub linked: Option<Vec<LinkedProposal>>,
}

/// One training or evaluation window.
#[derive(Clone, Debug)]
pub struct WindowInput {
    /// `[3,H,W]` frames in temporal order.
    pub frames: Vec<Tensor>,
    /// Ground truth per window frame.
    pub gts: Vec<Vec<GroundTruthObject>>,
    pub reference: usize,
}

impl WindowInput {
    pub fn image_size(&self) -> (f64, f64) {
        let t = &self.frames[0];
        (t.dim(2) as f64, t.dim(1) as f64)
    }
}

/// Final per-frame output after thresholding and per-class NMS.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDetection {
    /// Dataset class id (0-based).
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub gate: GateModel,
    pub motion: MotionModel,
    pub rpn: RpnHead,
    pub tboc: Tboc,
    pub jtmg: Jtmg,
    pub head: DetectionHead,
}

impl Detector {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.backbone.out_channels();
        let j = &config.jtmg;
        Ok(Self {
            backbone: Backbone::new(config.backbone.clone()),
            gate: GateModel::new(c, config.gate_hidden),
            motion: MotionModel::new(c),
            rpn: RpnHead::new(c, config.anchors.clone()),
            tboc: Tboc::new(c, config.num_classes, config.tboc.clone()),
            jtmg: Jtmg::new(c, config.window_len(), j.clone()),
            head: DetectionHead::new(j.visual_dim + j.diff_dim + j.motion_dim(), j.head_dim, config.num_classes),
            config,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn stride(&self) -> usize {
        self.config.backbone.stride()
    }

    /// Fresh parameters. Each module draws from its own stream, so modules
    /// shared between variants start identical under one seed.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let v = self.variant();
        let mut store = ParamStore::new();
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        self.backbone.init(&mut store, &mut stream(1));
        self.rpn.init(&mut store, &mut stream(2));
        self.jtmg.init_visual(&mut store, &mut stream(3));
        self.head.init(&mut store, &mut stream(4));
        if v.gating() {
            self.gate.init(&mut store, &mut stream(5));
        }
        if v.refinement() {
            self.motion.init(&mut store, &mut stream(6));
            self.tboc.init(&mut store, &mut stream(7));
        }
        if v.box_motion() {
            self.jtmg.init_temporal(&mut store, &mut stream(8));
        }
        store
    }

    /// Window positions that need backbone maps.
    pub fn frames_needed(&self, reference: usize, len: usize) -> Vec<usize> {
        if self.variant().gating() {
            (0..len).collect()
        } else {
            vec![reference]
        }
    }

    /// Backbone maps for the needed window frames, and the reference index among them.
    pub fn backbone_maps(&self, g: &mut Graph<'_>, input: &WindowInput) -> Result<(Vec<Var>, usize)> {
        let need = self.frames_needed(input.reference, input.frames.len());
        let vars: Vec<Var> = need.iter().map(|&i| g.input(input.frames[i].clone())).collect();
        let reference = need.iter().position(|&i| i == input.reference).expect("reference is needed");
        let fs = self.backbone.forward(g, &vars, reference)?;
        Ok((fs.maps, reference))
    }

    /// Gated fusion, motion maps and RPN on prepared backbone maps.
    pub fn stage_one(&self, g: &mut Graph<'_>, maps: Vec<Var>, reference: usize) -> Result<StageOne> {
        let v = self.variant();
        let f_t = maps[reference];
        let (mut gates, mut gated) = (Vec::new(), Vec::new());
        let aggregated = if v.gating() {
            for (i, &f) in maps.iter().enumerate() {
                if i == reference {
                    continue;
                }
                let gp = self.gate.gate(g, f_t, f)?;
                gated.push(gated_fuse(g, f_t, f, &gp)?);
                gates.push(gp);
            }
            aggregate(g, &gated, self.config.aggregate)?
        } else {
            f_t
        };
        let (mut motion, mut aware) = (Vec::new(), Vec::new());
        if v.refinement() {
            for (i, &f) in maps.iter().enumerate() {
                if i == reference {
                    motion.push(g.input(Tensor::zeros(g.shape(f_t))));
                } else {
                    motion.push(self.motion.motion(g, f_t, f)?);
                }
            }
            aware = motion_aware_maps(g, &maps, &motion)?;
        }
        let rpn = self.rpn.forward(g, aggregated, self.stride());
        Ok(StageOne { maps, reference, gates, gated, aggregated, motion, aware, rpn })
    }

    /// Proposals from the RPN values of `s1`.
    pub fn proposals(&self, g: &Graph<'_>, s1: &StageOne, image: (f64, f64), top_k: usize) -> Vec<(BBox, f64)> {
        select_proposals(g.value(s1.rpn.logits), g.value(s1.rpn.deltas), &s1.rpn.anchors, image, &self.config.rpn, top_k)
    }

    /// Linked-box refinement, pooling, box-level features and the head for `rois`.
    /// `linked` replaces the decoded linked boxes when given.
    pub fn stage_two(
        &self,
        g: &mut Graph<'_>,
        s1: &StageOne,
        rois: &[BBox],
        linked: Option<&[LinkedProposal]>,
        image: (f64, f64),
    ) -> Result<StageTwo> {
        let v = self.variant();
        let stride = self.stride();
        let k = rois.len();
        let tboc = if v.refinement() { Some(self.tboc.forward(g, &s1.aware, rois, stride)?) } else { None };
        let linked: Vec<LinkedProposal> = match (linked, &tboc) {
            (Some(l), _) => l.to_vec(),
            (None, Some(t)) => t.link(g, rois, image),
            (None, None) => rois.iter().map(|b| LinkedProposal { anchor: *b, boxes: vec![*b; s1.maps.len()] }).collect(),
        };
        let bundle = pool_all(g, s1.aggregated, &s1.maps, &s1.motion, &linked, s1.reference, stride, self.config.tboc.pooled)?;
        let g_visual = if v.cosine() {
            self.jtmg.box_level_aggregate(g, bundle.aggregated, &bundle.visual)
        } else if v.refinement() {
            let mut terms = vec![gap(g, bundle.aggregated)];
            for &r in bundle.visual.iter().chain(&bundle.motion) {
                terms.push(gap(g, r));
            }
            let x = g.add_n(&terms);
            self.jtmg.visual_feature(g, x)
        } else {
            let x = gap(g, bundle.aggregated);
            self.jtmg.visual_feature(g, x)
        };
        let j = &self.config.jtmg;
        let (g_diff, g_motion) = if v.box_motion() {
            (self.jtmg.box_diff_encode(g, &linked, s1.reference), self.jtmg.motion_gru(g, &bundle.motion))
        } else {
            (g.input(Tensor::zeros(&[k, j.diff_dim])), g.input(Tensor::zeros(&[k, j.motion_dim()])))
        };
        let (class_logits, deltas) = self.head.forward(g, &[g_visual, g_diff, g_motion]);
        Ok(StageTwo { tboc, linked, bundle, g_visual, g_diff, g_motion, class_logits, deltas })
    }

    /// Training loss for one window. Without a plan, the discrete choices are
    /// made from the current values using `rng` and returned.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        input: &WindowInput,
        plan: Option<&TrainPlan>,
        rng: &mut impl Rng,
    ) -> Result<(Var, LossReport, TrainPlan)> {
        let image = input.image_size();
        let (maps, reference) = self.backbone_maps(g, input)?;
        let s1 = self.stage_one(g, maps, reference)?;
        let ref_gts = &input.gts[input.reference];
        let gt_boxes: Vec<BBox> = ref_gts.iter().map(|o| o.bbox).collect();
        let sampling = &self.config.sampling;

        let rpn_t = match plan {
            Some(p) => p.rpn.clone(),
            None => rpn_targets(&s1.rpn.anchors, &gt_boxes, sampling, rng),
        };
        let (rpn_cls, rpn_reg) = rpn_loss(g, s1.rpn.logits, s1.rpn.deltas, &rpn_t);
        let l_rpn = g.add(rpn_cls, rpn_reg);

        let rois = match plan {
            Some(p) => p.rois.clone(),
            None => {
                let props: Vec<BBox> =
                    self.proposals(g, &s1, image, self.config.rpn.top_k_train).into_iter().map(|p| p.0).collect();
                sample_rois(&props, ref_gts, sampling, rng)
            }
        };
        let s2 = self.stage_two(g, &s1, &rois.boxes, plan.and_then(|p| p.linked.as_deref()), image)?;

        let mut report = LossReport { n_ref: rois.boxes.len(), ..LossReport::default() };
        let l_ref = match &s2.tboc {
            Some(t) => {
                let targets = ref_targets(&rois, &input.gts, input.reference);
                report.n_pos_per_frame = targets.positives_per_frame();
                ref_loss(g, t.class_logits, &t.deltas, &targets)
            }
            None => g.input(Tensor::scalar(0.0)),
        };
        let det_t = det_targets(&rois, &s2.refined(s1.reference), ref_gts);
        let l_det = det_loss(g, s2.class_logits, s2.deltas, &det_t);
        let total = total_loss_var(g, l_rpn, l_ref, l_det, &self.config.loss_weights);

        report.rpn_cls = g.value(rpn_cls).item();
        report.rpn_reg = g.value(rpn_reg).item();
        report.l_rpn = g.value(l_rpn).item();
        report.l_ref = g.value(l_ref).item();
        report.l_det = g.value(l_det).item();
        report.l_total = total_loss(report.l_rpn, report.l_ref, report.l_det, &self.config.loss_weights)?;
        let linked = s2.tboc.as_ref().map(|_| s2.linked.clone());
        Ok((total, report, TrainPlan { rpn: rpn_t, rois, linked }))
    }

    /// Thresholded, per-class NMS detections for the reference frame of a
    /// window whose backbone maps are given.
    pub fn detect_from_maps(&self, g: &mut Graph<'_>, maps: Vec<Var>, reference: usize, image: (f64, f64)) -> Result<Vec<FrameDetection>> {
        let s1 = self.stage_one(g, maps, reference)?;
        let rois: Vec<BBox> = self.proposals(g, &s1, image, self.config.rpn.top_k_eval).into_iter().map(|p| p.0).collect();
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let s2 = self.stage_two(g, &s1, &rois, None, image)?;
        let dets = decode_detections(g.value(s2.class_logits), g.value(s2.deltas), &s2.refined(s1.reference), image);
        Ok(self.postprocess(&dets))
    }

    /// Detections for the reference frame of `input`.
    pub fn detect(&self, store: &ParamStore, input: &WindowInput) -> Result<Vec<FrameDetection>> {
        let mut g = Graph::with_params(store);
        let (maps, reference) = self.backbone_maps(&mut g, input)?;
        self.detect_from_maps(&mut g, maps, reference, input.image_size())
    }

    /// Score threshold, per-class NMS and the per-frame cap.
    pub fn postprocess(&self, dets: &[crate::jtmg::Detection]) -> Vec<FrameDetection> {
        let mut out = Vec::new();
        for c in 1..=self.config.num_classes {
            let cands: Vec<(BBox, f64)> =
                dets.iter().filter(|d| d.probs[c] > self.config.score_thresh).map(|d| (d.bbox, d.probs[c])).collect();
            for i in nms(&cands, self.config.det_nms_iou) {
                out.push(FrameDetection { class_id: c - 1, score: cands[i].1, bbox: cands[i].0 });
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
        out.truncate(self.config.max_detections);
        out
    }
}
