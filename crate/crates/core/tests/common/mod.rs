//! Shared fixtures, brute-force oracles and check suites for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use motionvod::autograd::{Graph, Var};
use motionvod::backbone::BackboneConfig;
use motionvod::boxes::{assign_targets, iou, nms, BBox, Label};
use motionvod::datagen::GroundTruthObject;
use motionvod::evalkit::{
    average_precision, evaluate, motion_split, seq_nms, DetectionRecord, EvalConfig, GtRecord, MotionBucket, SeqNmsConfig,
};
use motionvod::gradcheck::{check_inputs, check_inputs_with_params, check_params, GradCheckReport, Tolerance};
use motionvod::jtmg::{box_differences, cosine_weights, decode_detections, DetectionHead, Jtmg, JtmgConfig};
use motionvod::losses::{det_loss, ref_loss, ref_targets, rpn_loss, DetTargets, RefTargets, RoiSample, RpnTargets};
use motionvod::model::{Detector, ModelConfig, Variant, WindowInput};
use motionvod::mtbr::{roi_align, LinkedProposal, Tboc, TbocConfig};
use motionvod::params::ParamStore;
use motionvod::tensor::Tensor;
use motionvod::tg_rpn::{aggregate, gated_fuse, AggregateMode, AnchorConfig, GateModel, MotionModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named pass/fail results for one suite.
#[derive(Debug, Default)]
pub struct Suite {
    pub results: Vec<(String, bool, String)>,
}

impl Suite {
    pub fn check(&mut self, label: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.results.push((label.into(), ok, detail.into()));
    }

    pub fn grad(&mut self, label: &str, r: GradCheckReport) {
        let detail = format!("{} probes, max abs err {:.2e}", r.checked, r.max_abs_err);
        let detail = match r.failures.first() {
            Some(f) => format!("{detail}; first failure {f}"),
            None => detail,
        };
        self.check(label, r.passed(), detail);
    }

    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(|r| r.1)
    }

    pub fn failures(&self) -> Vec<String> {
        self.results.iter().filter(|r| !r.1).map(|r| format!("{}: {}", r.0, r.2)).collect()
    }

    pub fn summary(&self) -> String {
        let ok = self.results.iter().filter(|r| r.1).count();
        format!("{ok}/{} checks", self.results.len())
    }

    pub fn assert_all(&self) {
        for (label, ok, detail) in &self.results {
            println!("{} {label}: {detail}", if *ok { "ok  " } else { "FAIL" });
        }
        assert!(self.passed(), "failed: {:#?}", self.failures());
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Box with integer corners inside `[0, span]`.
pub fn int_box(r: &mut ChaCha8Rng, span: i32) -> BBox {
    let x1 = r.gen_range(0..span - 1);
    let y1 = r.gen_range(0..span - 1);
    let x2 = r.gen_range(x1 + 1..=span);
    let y2 = r.gen_range(y1 + 1..=span);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

pub fn jitter(store: &mut ParamStore, amount: f64, seed: u64) {
    let mut r = rng(seed);
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-amount..amount));
    }
}

/// Scalar readout with fixed pseudo-random weights, so every output entry matters.
pub fn readout(g: &mut Graph<'_>, v: Var, salt: f64) -> Var {
    let w = g.input(Tensor::from_fn(g.shape(v), |i| ((i as f64 + salt) * 0.731).sin()));
    let p = g.mul(v, w);
    g.sum_all(p)
}

// ---------------------------------------------------------------- oracles

/// IoU of integer-corner boxes by counting unit cells.
pub fn iou_by_cells(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    let lo = a.x1.min(b.x1) as i64;
    let hi = a.x2.max(b.x2) as i64;
    let top = a.y1.min(b.y1) as i64;
    let bot = a.y2.max(b.y2) as i64;
    let inside = |bx: &BBox, x: i64, y: i64| (x as f64) >= bx.x1 && ((x + 1) as f64) <= bx.x2 && (y as f64) >= bx.y1 && ((y + 1) as f64) <= bx.y2;
    for y in top..bot {
        for x in lo..hi {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 || inter == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy NMS characterised without iteration: the kept set is the unique
/// subset in which every member has no higher-priority kept neighbour above
/// the threshold and every non-member has one. Found by enumerating subsets.
pub fn nms_by_subsets(boxes: &[(BBox, f64)], thr: f64) -> Vec<BTreeSet<usize>> {
    let n = boxes.len();
    let higher = |j: usize, i: usize| boxes[j].1 > boxes[i].1 || (boxes[j].1 == boxes[i].1 && j < i);
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let inset = |i: usize| mask >> i & 1 == 1;
        let ok = (0..n).all(|i| {
            let covered = (0..n).any(|j| j != i && inset(j) && higher(j, i) && iou(&boxes[j].0, &boxes[i].0) > thr);
            inset(i) != covered
        });
        if ok {
            found.push((0..n).filter(|&i| inset(i)).collect());
        }
    }
    found
}

/// Candidate labels straight from the definition, with cell-counted IoU.
pub fn assign_oracle(cands: &[BBox], gts: &[BBox], pos: f64, neg: f64) -> Vec<(Label, Option<usize>)> {
    let table: Vec<Vec<f64>> = cands.iter().map(|c| gts.iter().map(|g| iou_by_cells(c, g)).collect()).collect();
    let gt_best: Vec<f64> = (0..gts.len()).map(|j| table.iter().map(|r| r[j]).fold(0.0, f64::max)).collect();
    table
        .iter()
        .map(|row| {
            if gts.is_empty() {
                return (Label::Negative, None);
            }
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let arg = row.iter().position(|&v| v == best).unwrap();
            let forced = (0..gts.len()).any(|j| gt_best[j] > 0.0 && row[j] == gt_best[j]);
            if best >= pos || forced {
                (Label::Positive, Some(arg))
            } else if best < neg {
                (Label::Negative, None)
            } else {
                (Label::Ignore, None)
            }
        })
        .collect()
}

/// AP as the mean, over ground truth, of the best precision reached at or
/// after the rank where it is recalled (zero if never recalled).
pub fn ap_oracle(dets: &[DetectionRecord], gts: &[GtRecord], class: usize, thr: f64) -> Option<f64> {
    let gt_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].class_id == class).collect();
    if gt_idx.is_empty() {
        return None;
    }
    let mut ds: Vec<&DetectionRecord> = dets.iter().filter(|d| d.class_id == class).collect();
    ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut is_tp = Vec::new();
    for d in &ds {
        let mut best: Option<(usize, f64)> = None;
        for &i in &gt_idx {
            if gts[i].video_id == d.video_id && gts[i].frame == d.frame {
                let v = iou_by_cells(&d.bbox, &gts[i].bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        let tp = match best {
            Some((i, v)) if v >= thr && !taken[i] => {
                taken[i] = true;
                true
            }
            _ => false,
        };
        is_tp.push(tp);
    }
    let precision: Vec<f64> = (0..is_tp.len())
        .map(|k| is_tp[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64)
        .collect();
    let total: f64 = (0..is_tp.len())
        .filter(|&k| is_tp[k])
        .map(|k| precision[k..].iter().cloned().fold(0.0, f64::max))
        .sum();
    Some(total / gt_idx.len() as f64)
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Refinement loss written out term by term.
pub fn ref_loss_oracle(logits: &Tensor, frame_deltas: &[Tensor], labels: &[usize], targets: &[Vec<Option<[f64; 4]>>]) -> f64 {
    let k = labels.len();
    let c = logits.dim(1);
    let mut ce = 0.0;
    for i in 0..k {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ce += lse - row[labels[i]];
    }
    let mut reg = 0.0;
    let mut pairs = 0usize;
    for (d, t) in frame_deltas.iter().zip(targets) {
        for i in 0..k {
            if let Some(tv) = t[i] {
                pairs += 1;
                reg += (0..4).map(|j| smooth_l1(d.data()[i * 4 + j] - tv[j])).sum::<f64>();
            }
        }
    }
    ce / k as f64 + if pairs > 0 { reg / pairs as f64 } else { 0.0 }
}

/// Every chain of linked detections in consecutive frames (at least one member).
fn all_paths(frames: &[Vec<(BBox, f64)>], alive: &[Vec<bool>], link_iou: f64) -> Vec<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    fn extend(
        path: &mut Vec<(usize, usize)>,
        frames: &[Vec<(BBox, f64)>],
        alive: &[Vec<bool>],
        link_iou: f64,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        out.push(path.clone());
        let &(f, i) = path.last().unwrap();
        if f + 1 < frames.len() {
            for k in 0..frames[f + 1].len() {
                if alive[f + 1][k] && iou(&frames[f][i].0, &frames[f + 1][k].0) >= link_iou {
                    path.push((f + 1, k));
                    extend(path, frames, alive, link_iou, out);
                    path.pop();
                }
            }
        }
    }
    for f in 0..frames.len() {
        for i in 0..frames[f].len() {
            if alive[f][i] {
                extend(&mut vec![(f, i)], frames, alive, link_iou, &mut out);
            }
        }
    }
    out
}

/// Sequence rescoring with the best path found by exhaustive enumeration.
pub fn seq_nms_oracle(dets: &[DetectionRecord], cfg: &SeqNmsConfig) -> Vec<DetectionRecord> {
    let mut out = Vec::new();
    let classes: BTreeSet<usize> = dets.iter().map(|d| d.class_id).collect();
    for c in classes {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == c).collect();
        let first = idx.iter().map(|&i| dets[i].frame).min().unwrap();
        let last = idx.iter().map(|&i| dets[i].frame).max().unwrap();
        let mut slots: Vec<Vec<usize>> = vec![Vec::new(); last - first + 1];
        for &i in &idx {
            slots[dets[i].frame - first].push(i);
        }
        let frames: Vec<Vec<(BBox, f64)>> = slots.iter().map(|s| s.iter().map(|&i| (dets[i].bbox, dets[i].score)).collect()).collect();
        let mut alive: Vec<Vec<bool>> = frames.iter().map(|f| vec![true; f.len()]).collect();
        let mut kept = alive.clone();
        let mut scores: Vec<Vec<f64>> = frames.iter().map(|f| f.iter().map(|d| d.1).collect()).collect();
        loop {
            let paths = all_paths(&frames, &alive, cfg.link_iou);
            if !paths.iter().any(|p| p.len() > 1) {
                break;
            }
            let sum = |p: &Vec<(usize, usize)>| p.iter().fold(0.0, |s, &(f, i)| s + frames[f][i].1);
            let best = paths.iter().max_by(|a, b| sum(a).partial_cmp(&sum(b)).unwrap()).unwrap().clone();
            let mean = sum(&best) / best.len() as f64;
            for &(f, i) in &best {
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
    out
}

fn canonical(mut v: Vec<DetectionRecord>) -> Vec<(String, usize, usize, [u64; 4], f64)> {
    v.sort_by(|a, b| {
        (a.video_id.as_str(), a.frame, a.class_id)
            .cmp(&(b.video_id.as_str(), b.frame, b.class_id))
            .then_with(|| a.bbox.to_array().map(f64::to_bits).cmp(&b.bbox.to_array().map(f64::to_bits)))
            .then(a.score.total_cmp(&b.score))
    });
    v.into_iter()
        .map(|d| (d.video_id, d.frame, d.class_id, d.bbox.to_array().map(f64::to_bits), d.score))
        .collect()
}

// ---------------------------------------------------------------- fixtures

/// The small model used for gradient checks: 8 output channels, 16×16 input.
pub fn micro_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        backbone: BackboneConfig { channels: [4, 4, 8, 8], strides: [2, 2, 1, 1], groups: 2 },
        gate_hidden: 4,
        anchors: AnchorConfig { scales: vec![6.0, 10.0], ratios: vec![1.0] },
        tboc: TbocConfig { pooled: 2, hidden: 6 },
        jtmg: JtmgConfig { visual_dim: 6, diff_dim: 4, gru_hidden: 3, head_dim: 6, tied_gru: false },
        ..ModelConfig::default()
    }
}

/// A 5-frame 16×16 window with one object moving one pixel per frame.
pub fn micro_window(seed: u64) -> WindowInput {
    let mut r = rng(seed);
    let frames = (0..5).map(|_| random_tensor(&[3, 16, 16], &mut r)).collect();
    let gts = (0..5)
        .map(|f| {
            let x = 2.0 + f as f64;
            vec![GroundTruthObject { track_id: 0, class_id: 1, bbox: BBox::new(x, 3.0, x + 8.0, 11.0), occluded: false, blur_level: 0.0 }]
        })
        .collect();
    WindowInput { frames, gts, reference: 2 }
}

fn random_gt_records(r: &mut ChaCha8Rng, videos: usize, frames: usize, tracks: u32) -> Vec<GtRecord> {
    let mut out = Vec::new();
    for v in 0..videos {
        for t in 0..tracks {
            let mut b = int_box(r, 40);
            let (vx, vy) = (r.gen_range(-6..=6) as f64, r.gen_range(-6..=6) as f64);
            let class_id = r.gen_range(0..2);
            for f in 0..frames {
                if r.gen_bool(0.85) {
                    out.push(GtRecord { video_id: format!("v{v}"), frame: f, track_id: t, class_id, bbox: b });
                }
                b = BBox::new(b.x1 + vx, b.y1 + vy, b.x2 + vx, b.y2 + vy);
            }
        }
    }
    out
}

/// Detections scattered around ground truth, plus clutter.
fn random_detections(r: &mut ChaCha8Rng, gts: &[GtRecord], clutter: usize) -> Vec<DetectionRecord> {
    let mut out = Vec::new();
    for g in gts {
        for _ in 0..r.gen_range(0..3) {
            let dx = r.gen_range(-4..=4) as f64;
            let dy = r.gen_range(-4..=4) as f64;
            let class_id = if r.gen_bool(0.85) { g.class_id } else { 1 - g.class_id };
            out.push(DetectionRecord {
                video_id: g.video_id.clone(),
                frame: g.frame,
                class_id,
                score: r.gen_range(0.0..1.0),
                bbox: BBox::new(g.bbox.x1 + dx, g.bbox.y1 + dy, g.bbox.x2 + dx, g.bbox.y2 + dy),
            });
        }
    }
    let frames: BTreeSet<(String, usize)> = gts.iter().map(|g| (g.video_id.clone(), g.frame)).collect();
    let frames: Vec<_> = frames.into_iter().collect();
    for _ in 0..clutter {
        if frames.is_empty() {
            break;
        }
        let (v, f) = frames[r.gen_range(0..frames.len())].clone();
        out.push(DetectionRecord { video_id: v, frame: f, class_id: r.gen_range(0..2), score: r.gen_range(0.0..1.0), bbox: int_box(r, 40) });
    }
    out
}

// ---------------------------------------------------------------- suites

/// Structural invariants: gate complementarity, cosine range, zero
/// self-displacement, motion nullity, motion-split partition and softmax
/// normalisation, each over randomized inputs.
pub fn invariant_suite() -> Suite {
    let mut s = Suite::default();
    let mut r = rng(101);

    let mut worst = 0.0f64;
    for trial in 0..20 {
        let gm = GateModel::new(6, 4);
        let mut store = ParamStore::new();
        gm.init(&mut store, &mut rng(trial));
        jitter(&mut store, 0.5, trial + 1000);
        let mut g = Graph::with_params(&store);
        let a = g.input(random_tensor(&[6, 8, 8], &mut r));
        let b = g.input(random_tensor(&[6, 8, 8], &mut r).map(|v| 5.0 * v));
        let gp = gm.gate(&mut g, a, b).unwrap();
        let sum = g.value(gp.reference).zip_map(g.value(gp.neighbour), |x, y| (x + y - 1.0).abs());
        worst = worst.max(sum.max_abs());
    }
    s.check("gate complementarity", worst < 1e-6, format!("max |A_t + A_t-i - 1| = {worst:.2e}"));

    let (mut lo, mut hi, mut self_err) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..50 {
        let mut g = Graph::new();
        let agg_t = random_tensor(&[4, 5, 3, 3], &mut r);
        let agg = g.input(agg_t.clone());
        let mut vis: Vec<Var> = (0..4).map(|_| g.input(random_tensor(&[4, 5, 3, 3], &mut r).map(|v| v * 3.0))).collect();
        vis.push(g.input(agg_t.clone()));
        vis.push(g.input(agg_t.map(|v| -2.0 * v)));
        let w = cosine_weights(&mut g, agg, &vis);
        for &wi in &w {
            for &v in g.value(wi).data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        for &v in g.value(w[4]).data() {
            self_err = self_err.max((v - 1.0).abs());
        }
    }
    s.check("cosine weights in [-1, 1]", lo >= -1.0 && hi <= 1.0, format!("range [{lo:.6}, {hi:.6}]"));
    s.check("cosine self-similarity is 1 - O(eps)", self_err < 1e-6, format!("max |w - 1| = {self_err:.2e}"));

    let mut max_pt = 0.0f64;
    for _ in 0..100 {
        let reference = r.gen_range(0..5);
        let linked: Vec<LinkedProposal> = (0..6)
            .map(|_| {
                let boxes: Vec<BBox> = (0..5).map(|_| int_box(&mut r, 90)).collect();
                LinkedProposal { anchor: boxes[reference], boxes }
            })
            .collect();
        let p = box_differences(&linked, reference);
        for k in 0..6 {
            for j in 0..4 {
                max_pt = max_pt.max(p.data()[k * 20 + reference * 4 + j].abs());
            }
        }
    }
    s.check("p_t = 0 at the reference frame", max_pt == 0.0, format!("max |p_t| = {max_pt:e}"));

    let mut max_motion = 0.0f64;
    for trial in 0..20 {
        let mm = MotionModel::new(8);
        let mut store = ParamStore::new();
        mm.init(&mut store, &mut rng(trial + 50));
        jitter(&mut store, 0.3, trial);
        let mut g = Graph::with_params(&store);
        let x = random_tensor(&[8, 6, 6], &mut r);
        let a = g.input(x.clone());
        let b = g.input(x);
        let m = mm.motion(&mut g, a, b).unwrap();
        max_motion = max_motion.max(g.value(m).max_abs());
    }
    s.check("identical frames give a zero motion map", max_motion == 0.0, format!("max |M| = {max_motion:e}"));

    let mut partition_ok = true;
    let mut seen = [0usize; 3];
    for _ in 0..100 {
        let gts = random_gt_records(&mut r, 2, 8, 3);
        let split = motion_split(&gts, 2);
        partition_ok &= split.len() == gts.len();
        let report = evaluate(&[], &gts, &gts, 2, &EvalConfig::default());
        partition_ok &= report.bucket_counts.iter().sum::<usize>() == gts.len();
        for b in split {
            seen[b as usize] += 1;
        }
    }
    s.check(
        "motion split is a partition",
        partition_ok && seen.iter().all(|&n| n > 0),
        format!("bucket totals slow/medium/fast = {seen:?}"),
    );

    let mut max_dev = 0.0f64;
    for _ in 0..100 {
        let k = r.gen_range(1..6);
        let c = r.gen_range(2..32);
        let scale = [1.0, 30.0, 700.0][r.gen_range(0..3)];
        let logits = Tensor::from_fn(&[k, c], |_| r.gen_range(-scale..scale));
        let deltas = random_tensor(&[k, 4], &mut r);
        let refined: Vec<BBox> = (0..k).map(|_| int_box(&mut r, 90)).collect();
        for d in decode_detections(&logits, &deltas, &refined, (96.0, 96.0)) {
            max_dev = max_dev.max((d.probs.iter().sum::<f64>() - 1.0).abs());
        }
    }
    s.check("softmax sums to 1", max_dev < 1e-6, format!("max |sum p - 1| = {max_dev:.2e}"));
    s
}

/// Finite-difference checks of every differentiable stage, inputs at most 16×16.
pub fn gradient_suite() -> Suite {
    let tol = Tolerance::default();
    let mut s = Suite::default();
    let mut r = rng(202);

    let gm = GateModel::new(3, 4);
    let mut gstore = ParamStore::new();
    gm.init(&mut gstore, &mut rng(1));
    jitter(&mut gstore, 0.3, 2);
    let pair = [random_tensor(&[3, 6, 6], &mut r), random_tensor(&[3, 6, 6], &mut r)];
    s.grad(
        "gate (inputs)",
        check_inputs_with_params(&gstore, &pair, |g, v| {
            let gp = gm.gate(g, v[0], v[1]).unwrap();
            readout(g, gp.reference, 0.0)
        }, tol),
    );
    s.grad(
        "gate (params)",
        check_params(&gstore, |g| {
            let a = g.input(pair[0].clone());
            let b = g.input(pair[1].clone());
            let gp = gm.gate(g, a, b).unwrap();
            readout(g, gp.neighbour, 1.0)
        }, None, tol),
    );
    s.grad(
        "gated fusion and aggregation",
        check_inputs_with_params(&gstore, &[pair[0].clone(), pair[1].clone(), random_tensor(&[3, 6, 6], &mut r)], |g, v| {
            let g1 = gm.gate(g, v[0], v[1]).unwrap();
            let f1 = gated_fuse(g, v[0], v[1], &g1).unwrap();
            let g2 = gm.gate(g, v[0], v[2]).unwrap();
            let f2 = gated_fuse(g, v[0], v[2], &g2).unwrap();
            let agg = aggregate(g, &[f1, f2], AggregateMode::Mean).unwrap();
            readout(g, agg, 2.0)
        }, tol),
    );

    let mm = MotionModel::new(4);
    let mut mstore = ParamStore::new();
    mm.init(&mut mstore, &mut rng(3));
    jitter(&mut mstore, 0.2, 4);
    let mpair = [random_tensor(&[4, 5, 5], &mut r), random_tensor(&[4, 5, 5], &mut r)];
    s.grad(
        "motion attention (inputs)",
        check_inputs_with_params(&mstore, &mpair, |g, v| {
            let m = mm.motion(g, v[0], v[1]).unwrap();
            readout(g, m, 3.0)
        }, tol),
    );
    s.grad(
        "motion attention (params)",
        check_params(&mstore, |g| {
            let a = g.input(mpair[0].clone());
            let b = g.input(mpair[1].clone());
            let m = mm.motion(g, a, b).unwrap();
            readout(g, m, 4.0)
        }, None, tol),
    );

    let boxes = [BBox::new(3.3, 5.1, 25.7, 19.2), BBox::new(-4.0, 10.0, 12.5, 35.0), BBox::new(30.0, 2.0, 60.0, 61.0)];
    s.grad(
        "roi align",
        check_inputs(&[random_tensor(&[2, 8, 8], &mut r)], |g, v| {
            let p = roi_align(g, v[0], &boxes, 8, 3).unwrap();
            readout(g, p, 5.0)
        }, tol),
    );

    let tboc = Tboc::new(3, 2, TbocConfig { pooled: 2, hidden: 5 });
    let mut tstore = ParamStore::new();
    tboc.init(&mut tstore, &mut rng(5));
    jitter(&mut tstore, 0.2, 6);
    let maps: Vec<Tensor> = (0..5).map(|_| random_tensor(&[3, 6, 6], &mut r)).collect();
    let anchors = [BBox::new(2.0, 3.0, 30.0, 40.0), BBox::new(10.0, 12.0, 44.0, 40.0)];
    let tboc_out = |g: &mut Graph<'_>, v: &[Var]| {
        let out = tboc.forward(g, v, &anchors, 8).unwrap();
        let mut terms = vec![readout(g, out.class_logits, 6.0)];
        for (i, &d) in out.deltas.iter().enumerate() {
            terms.push(readout(g, d, 7.0 + i as f64));
        }
        g.add_n(&terms)
    };
    s.grad("offset calibration head (maps)", check_inputs_with_params(&tstore, &maps, tboc_out, tol));
    s.grad(
        "offset calibration head (params)",
        check_params(&tstore, |g| {
            let v: Vec<Var> = maps.iter().map(|m| g.input(m.clone())).collect();
            tboc_out(g, &v)
        }, None, tol),
    );

    let jt = Jtmg::new(3, 5, JtmgConfig { visual_dim: 4, diff_dim: 3, gru_hidden: 8, head_dim: 4, tied_gru: false });
    let mut jstore = ParamStore::new();
    jt.init_visual(&mut jstore, &mut rng(7));
    jt.init_temporal(&mut jstore, &mut rng(8));
    jitter(&mut jstore, 0.2, 9);
    let mut agg_inputs = vec![random_tensor(&[2, 3, 2, 2], &mut r)];
    agg_inputs.extend((0..5).map(|_| random_tensor(&[2, 3, 2, 2], &mut r)));
    s.grad(
        "box-level cosine aggregation",
        check_inputs_with_params(&jstore, &agg_inputs, |g, v| {
            let out = jt.box_level_aggregate(g, v[0], &v[1..]);
            readout(g, out, 8.0)
        }, tol),
    );
    let seq: Vec<Tensor> = (0..5).map(|_| random_tensor(&[2, 3, 2, 2], &mut r)).collect();
    s.grad(
        "bidirectional GRU (inputs)",
        check_inputs_with_params(&jstore, &seq, |g, v| {
            let out = jt.motion_gru(g, v);
            readout(g, out, 9.0)
        }, tol),
    );
    s.grad(
        "bidirectional GRU (params)",
        check_params(&jstore, |g| {
            let v: Vec<Var> = seq.iter().map(|t| g.input(t.clone())).collect();
            let out = jt.motion_gru(g, &v);
            readout(g, out, 10.0)
        }, None, tol),
    );

    let head = DetectionHead::new(5, 4, 2);
    let mut hstore = ParamStore::new();
    head.init(&mut hstore, &mut rng(10));
    jitter(&mut hstore, 0.3, 11);
    s.grad(
        "detection head",
        check_inputs_with_params(&hstore, &[random_tensor(&[3, 2], &mut r), random_tensor(&[3, 3], &mut r)], |g, v| {
            let (l, d) = head.forward(g, &[v[0], v[1]]);
            let a = readout(g, l, 11.0);
            let b = readout(g, d, 12.0);
            g.add(a, b)
        }, tol),
    );

    // losses: targets chosen so no smooth-L1 argument sits on its kink
    let rpn_t = RpnTargets {
        objectness: vec![1.0, 0.0, 0.0, 1.0, 0.0],
        cls_weights: vec![0.25, 0.25, 0.0, 0.25, 0.25],
        deltas: Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.41).sin() * 1.7),
        reg_weights: vec![0.5, 0.0, 0.0, 0.5, 0.0],
        sampled: 4,
        positives: 2,
    };
    s.grad(
        "rpn loss",
        check_inputs(&[random_tensor(&[5], &mut r), random_tensor(&[5, 4], &mut r)], |g, v| {
            let (c, reg) = rpn_loss(g, v[0], v[1], &rpn_t);
            g.add(c, reg)
        }, tol),
    );
    let ref_t = RefTargets {
        labels: vec![1, 0, 2],
        frame_deltas: (0..5)
            .map(|f| {
                vec![
                    if f == 1 { None } else { Some([0.3 * f as f64, -1.9, 0.2, 2.6]) },
                    None,
                    Some([-0.7, 0.1 * f as f64, 1.4, -0.2]),
                ]
            })
            .collect(),
    };
    let mut ref_inputs = vec![random_tensor(&[3, 3], &mut r)];
    ref_inputs.extend((0..5).map(|_| random_tensor(&[3, 4], &mut r)));
    s.grad(
        "refinement loss",
        check_inputs(&ref_inputs, |g, v| ref_loss(g, v[0], &v[1..], &ref_t), tol),
    );
    let det_t = DetTargets { labels: vec![2, 0, 1], deltas: vec![Some([0.2, -2.2, 0.9, 0.1]), None, Some([1.6, 0.4, -0.3, 0.05])] };
    s.grad(
        "detection loss",
        check_inputs(&[random_tensor(&[3, 3], &mut r), random_tensor(&[3, 4], &mut r)], |g, v| det_loss(g, v[0], v[1], &det_t), tol),
    );

    for v in [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E] {
        let det = Detector::new(micro_config(v)).unwrap();
        let mut store = det.init_params(11);
        // zero-initialised biases put ReLUs exactly on their kink
        jitter(&mut store, 0.05, 2);
        let input = micro_window(5);
        let plan = {
            let mut g = Graph::with_params(&store);
            det.loss(&mut g, &input, None, &mut rng(1)).unwrap().2
        };
        s.grad(
            &format!("micro model L_total, variant ({v})"),
            check_params(&store, |g| det.loss(g, &input, Some(&plan), &mut rng(0)).unwrap().0, Some(3), tol),
        );
    }
    s
}

pub const ORACLE_INSTANCES: usize = 200;

/// Library results against brute-force oracles on random small instances.
pub fn oracle_suite() -> Suite {
    let mut s = Suite::default();
    let mut r = rng(303);
    let n = ORACLE_INSTANCES;

    let mut worst = 0.0f64;
    for _ in 0..n {
        let (a, b) = (int_box(&mut r, 24), int_box(&mut r, 24));
        worst = worst.max((iou(&a, &b) - iou_by_cells(&a, &b)).abs());
    }
    s.check("iou vs cell counting", worst <= 1e-12, format!("{n} pairs, max err {worst:.1e}"));

    let mut bad = 0;
    for _ in 0..n {
        let k = r.gen_range(0..=9);
        let boxes: Vec<(BBox, f64)> = (0..k).map(|_| (int_box(&mut r, 16), (r.gen_range(0..5) as f64) * 0.25)).collect();
        let thr = [0.3, 0.5, 0.7][r.gen_range(0..3)];
        let sets = nms_by_subsets(&boxes, thr);
        let got: BTreeSet<usize> = nms(&boxes, thr).into_iter().collect();
        if sets.len() != 1 || sets[0] != got {
            bad += 1;
        }
    }
    s.check("nms vs subset characterisation", bad == 0, format!("{n} instances (with score ties), {bad} mismatches"));

    let mut bad = 0;
    for _ in 0..n {
        let cands: Vec<BBox> = (0..r.gen_range(1..12)).map(|_| int_box(&mut r, 20)).collect();
        let gts: Vec<BBox> = (0..r.gen_range(0..4)).map(|_| int_box(&mut r, 20)).collect();
        let got = assign_targets(&cands, &gts, 0.7, 0.3);
        let want = assign_oracle(&cands, &gts, 0.7, 0.3);
        for (i, (label, m)) in want.iter().enumerate() {
            let lib_m = if got.labels[i] == Label::Positive { got.matched[i] } else { None };
            if got.labels[i] != *label || lib_m != *m {
                bad += 1;
                break;
            }
        }
    }
    s.check("assignment vs definition", bad == 0, format!("{n} instances, {bad} mismatches"));

    let (mut bad, mut worst) = (0, 0.0f64);
    for _ in 0..n {
        let gts = random_gt_records(&mut r, 2, 3, 3);
        let dets = random_detections(&mut r, &gts, 4);
        let mut aps = Vec::new();
        for c in 0..2 {
            let got = average_precision(&dets, &gts, c, 0.5);
            let want = ap_oracle(&dets, &gts, c, 0.5);
            match (got, want) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => bad += 1,
            }
            aps.extend(want);
        }
        let report = evaluate(&dets, &gts, &gts, 2, &EvalConfig::default());
        let want_map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
        worst = worst.max((report.map - want_map).abs());
    }
    s.check("AP / mAP vs PR enumeration", bad == 0 && worst <= 1e-6, format!("{n} instances, max err {worst:.1e}"));

    let (mut worst, mut bad) = (0.0f64, 0);
    for _ in 0..n {
        let k = r.gen_range(1..7);
        let frames = 5;
        let reference = 2;
        let tracks: Vec<u32> = (0..3).collect();
        let window_gts: Vec<Vec<GroundTruthObject>> = (0..frames)
            .map(|f| {
                let mut objs = Vec::new();
                for &t in &tracks {
                    if f == reference || r.gen_bool(0.7) {
                        let b = int_box(&mut r, 60);
                        objs.push(GroundTruthObject { track_id: t, class_id: (t % 2) as usize, bbox: b, occluded: false, blur_level: 0.0 });
                    }
                }
                objs
            })
            .collect();
        let matched: Vec<Option<usize>> = (0..k).map(|_| if r.gen_bool(0.6) { Some(r.gen_range(0..3)) } else { None }).collect();
        let labels: Vec<usize> = matched.iter().map(|m| m.map_or(0, |j| window_gts[reference][j].class_id + 1)).collect();
        let sample = RoiSample { boxes: (0..k).map(|_| int_box(&mut r, 60)).collect(), labels: labels.clone(), matched: matched.clone() };
        let t = ref_targets(&sample, &window_gts, reference);

        let expected_pairs: usize = (0..frames)
            .map(|f| {
                matched
                    .iter()
                    .filter(|m| m.is_some_and(|j| window_gts[f].iter().any(|o| o.track_id == window_gts[reference][j].track_id)))
                    .count()
            })
            .sum();
        if t.positives_per_frame().iter().sum::<usize>() != expected_pairs {
            bad += 1;
        }
        let logits = Tensor::from_fn(&[k, 3], |_| r.gen_range(-3.0..3.0));
        let deltas: Vec<Tensor> = (0..frames).map(|_| Tensor::from_fn(&[k, 4], |_| r.gen_range(-3.0..3.0))).collect();
        let mut g = Graph::new();
        let lv = g.input(logits.clone());
        let dv: Vec<Var> = deltas.iter().map(|d| g.input(d.clone())).collect();
        let loss = ref_loss(&mut g, lv, &dv, &t);
        let got = g.value(loss).item();
        let want = ref_loss_oracle(&logits, &deltas, &labels, &t.frame_deltas);
        worst = worst.max((got - want).abs());
    }
    s.check(
        "refinement loss vs term-by-term sum",
        bad == 0 && worst <= 1e-6,
        format!("{n} instances, {bad} denominator mismatches, max err {worst:.1e}"),
    );

    let (mut bad, mut worst) = (0, 0.0f64);
    let cfg = SeqNmsConfig::default();
    for _ in 0..n {
        let frames = r.gen_range(1..=4);
        let mut dets = Vec::new();
        let anchors: Vec<BBox> = (0..2).map(|_| int_box(&mut r, 30)).collect();
        for f in 0..frames {
            for _ in 0..r.gen_range(0..=5) {
                let a = anchors[r.gen_range(0..2)];
                let (dx, dy) = (r.gen_range(-3..=3) as f64, r.gen_range(-3..=3) as f64);
                dets.push(DetectionRecord {
                    video_id: "v".into(),
                    frame: f,
                    class_id: r.gen_range(0..2),
                    score: r.gen_range(0.01..1.0),
                    bbox: BBox::new(a.x1 + dx, a.y1 + dy, a.x2 + dx, a.y2 + dy),
                });
            }
        }
        let got = canonical(seq_nms(&dets, &cfg));
        let want = canonical(seq_nms_oracle(&dets, &cfg));
        if got.len() != want.len() || got.iter().zip(&want).any(|(a, b)| (&a.0, a.1, a.2, a.3) != (&b.0, b.1, b.2, b.3)) {
            bad += 1;
        } else {
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a.4 - b.4).abs());
            }
        }
    }
    s.check("seq-nms vs exhaustive path search", bad == 0 && worst <= 1e-6, format!("{n} instances, {bad} kept-set mismatches, max score err {worst:.1e}"));
    s
}

/// Bucket labels per evaluated GT, for tables.
pub fn bucket_names() -> [&'static str; 3] {
    
    MotionBucket::ALL.map(|b| match b {
        MotionBucket::Slow => "slow",
        MotionBucket::Medium => "medium",
        MotionBucket::Fast => "fast",
    })
}

pub fn params_fingerprint(store: &ParamStore) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (name, t) in store.iter() {
        name.hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

pub fn group_by_video(dets: &[DetectionRecord]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for d in dets {
        *m.entry(d.video_id.as_str()).or_insert(0) += 1;
    }
    m
}

fn hash_tensor(h: &mut impl std::hash::Hasher, t: &Tensor) {
    use std::hash::Hash;
    t.shape().hash(h);
    for v in t.data() {
        v.to_bits().hash(h);
    }
}

/// A 5-frame 96×96 window cut from a generated video.
pub fn full_size_window(seed: u64) -> WindowInput {
    let cfg = motionvod::datagen::SceneConfig { seed, ..Default::default() };
    let video = motionvod::datagen::generate_video(&cfg, seed).expect("video");
    let frames = video.frames[3..8].iter().map(motionvod::backbone::frame_to_tensor).collect();
    WindowInput { frames, gts: video.annotations[3..8].to_vec(), reference: 2 }
}

/// One forward pass of the default model (31-way output) checked against the
/// documented shapes. Also returns a hash of every intermediate value.
pub fn shape_suite(seed: u64) -> (Suite, u64, std::time::Duration) {
    use std::hash::Hasher;
    let mut s = Suite::default();
    let cfg = ModelConfig { num_classes: 30, ..ModelConfig::default() };
    let det = Detector::new(cfg).expect("model");
    let store = det.init_params(seed);
    let input = full_size_window(seed);
    let start = std::time::Instant::now();

    let mut g = Graph::with_params(&store);
    let (maps, reference) = det.backbone_maps(&mut g, &input).expect("backbone");
    let s1 = det.stage_one(&mut g, maps, reference).expect("stage one");
    let image = input.image_size();
    let rois: Vec<BBox> = det.proposals(&g, &s1, image, det.config.rpn.top_k_eval).into_iter().map(|p| p.0).collect();
    let s2 = det.stage_two(&mut g, &s1, &rois, None, image).expect("stage two");
    let dets = decode_detections(g.value(s2.class_logits), g.value(s2.deltas), &s2.refined(s1.reference), image);
    let elapsed = start.elapsed();

    let k = rois.len();
    let a = 12 * 12 * det.config.anchors.per_cell();
    let map = vec![64, 12, 12];
    let all = |vs: &[Var], want: &[usize]| vs.iter().all(|&v| g.shape(v) == want);
    s.check("proposals", k > 0 && k <= det.config.rpn.top_k_eval, format!("K = {k}"));
    s.check("backbone maps 5 x [64,12,12]", s1.maps.len() == 5 && all(&s1.maps, &map), format!("{:?}", g.shape(s1.maps[0])));
    s.check(
        "gates [1,12,12] per neighbour",
        s1.gates.len() == 4 && s1.gates.iter().all(|p| g.shape(p.reference) == [1, 12, 12] && g.shape(p.neighbour) == [1, 12, 12]),
        format!("{} pairs", s1.gates.len()),
    );
    s.check("gated maps 4 x [64,12,12]", s1.gated.len() == 4 && all(&s1.gated, &map), "");
    s.check("aggregated map [64,12,12]", g.shape(s1.aggregated) == map, format!("{:?}", g.shape(s1.aggregated)));
    s.check("motion maps 5 x [64,12,12]", s1.motion.len() == 5 && all(&s1.motion, &map), "");
    s.check("motion-aware maps 5 x [64,12,12]", s1.aware.len() == 5 && all(&s1.aware, &map), "");
    s.check(
        "rpn outputs [A], [A,4]",
        g.shape(s1.rpn.logits) == [a] && g.shape(s1.rpn.deltas) == [a, 4] && s1.rpn.anchors.len() == a,
        format!("A = {a}"),
    );
    let tboc = s2.tboc.as_ref();
    s.check(
        "offset head 5 x [K,4] and [K,31]",
        tboc.is_some_and(|t| t.deltas.len() == 5 && all(&t.deltas, &[k, 4]) && g.shape(t.class_logits) == [k, 31]),
        "",
    );
    s.check("linked proposals carry 5 boxes", s2.linked.len() == k && s2.linked.iter().all(|l| l.boxes.len() == 5), "");
    let b = &s2.bundle;
    s.check(
        "roi bundle [K,64,7,7], 5 visual + 5 motion",
        g.shape(b.aggregated) == [k, 64, 7, 7] && b.visual.len() == 5 && b.motion.len() == 5 && all(&b.visual, &[k, 64, 7, 7]) && all(&b.motion, &[k, 64, 7, 7]),
        "",
    );
    s.check("g_visual [K,256]", g.shape(s2.g_visual) == [k, 256], format!("{:?}", g.shape(s2.g_visual)));
    s.check("g_diff [K,64]", g.shape(s2.g_diff) == [k, 64], format!("{:?}", g.shape(s2.g_diff)));
    s.check("g_motion [K,128]", g.shape(s2.g_motion) == [k, 128], format!("{:?}", g.shape(s2.g_motion)));
    s.check("head outputs [K,31], [K,4]", g.shape(s2.class_logits) == [k, 31] && g.shape(s2.deltas) == [k, 4], "");
    s.check(
        "one 31-way distribution and box per proposal",
        dets.len() == k && dets.iter().all(|d| d.probs.len() == 31 && (d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6),
        "",
    );
    let finite = s1.maps.iter().chain(&s1.aware).chain([&s2.class_logits, &s2.deltas, &s2.g_visual, &s2.g_motion]).all(|&v| g.value(v).all_finite());
    s.check("activations finite", finite, "");
    s.check("runtime < 10 s", elapsed.as_secs_f64() < 10.0, format!("{:.2} s", elapsed.as_secs_f64()));

    let mut h = std::collections::hash_map::DefaultHasher::new();
    for &v in s1.maps.iter().chain(&s1.gated).chain(&s1.motion).chain(&s1.aware) {
        hash_tensor(&mut h, g.value(v));
    }
    for v in [s1.aggregated, s1.rpn.logits, s1.rpn.deltas, b.aggregated, s2.g_visual, s2.g_diff, s2.g_motion, s2.class_logits, s2.deltas] {
        hash_tensor(&mut h, g.value(v));
    }
    for l in &s2.linked {
        for bx in &l.boxes {
            for c in bx.to_array() {
                h.write_u64(c.to_bits());
            }
        }
    }
    (s, h.finish(), elapsed)
}
