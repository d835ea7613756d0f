//! End-to-end runs: dataset split, evaluation reports, ablation tables and plots.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, seq_nms_all, write_detections, DetectionRecord, EvalReport, GtRecord, MotionBucket};
use crate::model::{Detector, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{train, PreparedVideo, TrainOptions};

/// Split in manifest order: the last `val_fraction` of the videos are held out.
pub fn split<T>(videos: &[T], val_fraction: f64) -> (&[T], &[T]) {
    let n_val = ((videos.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(videos.len().saturating_sub(1));
    videos.split_at(videos.len() - n_val)
}

/// Frames that can be the reference of an unclamped window.
pub fn eval_frames(num_frames: usize, before: usize, after: usize) -> std::ops::Range<usize> {
    if num_frames < before + after + 1 {
        0..0
    } else {
        before..num_frames - after
    }
}

/// Ground truth on the evaluated frames, and on every frame (for motion context).
pub fn ground_truth(videos: &[PreparedVideo], model: &ModelConfig) -> (Vec<GtRecord>, Vec<GtRecord>) {
    let (mut scored, mut all) = (Vec::new(), Vec::new());
    for v in videos {
        let keep = eval_frames(v.num_frames(), model.before, model.after);
        for (t, objs) in v.annotations.iter().enumerate() {
            for o in objs {
                let r = GtRecord { video_id: v.video_id.clone(), frame: t, track_id: o.track_id, class_id: o.class_id, bbox: o.bbox };
                if keep.contains(&t) {
                    scored.push(r.clone());
                }
                all.push(r);
            }
        }
    }
    (scored, all)
}

/// Run the detector on every evaluated frame. Backbone maps are computed
/// once per frame and shared by the windows that contain it.
pub fn detect_videos(det: &Detector, params: &ParamStore, videos: &[PreparedVideo]) -> Result<Vec<DetectionRecord>> {
    let (before, after) = (det.config.before, det.config.after);
    let len = before + after + 1;
    let mut out = Vec::new();
    for v in videos {
        let frames = eval_frames(v.num_frames(), before, after);
        if frames.is_empty() {
            continue;
        }
        let need = det.frames_needed(before, len);
        let mut maps: Vec<Option<Tensor>> = vec![None; v.num_frames()];
        for t in frames.clone() {
            for &k in &need {
                let f = t - before + k;
                if maps[f].is_none() {
                    let mut g = Graph::with_params(params);
                    let x = g.input(v.frames[f].clone());
                    let m = det.backbone.forward_frame(&mut g, x);
                    maps[f] = Some(g.value(m).clone());
                }
            }
        }
        let image = (v.frames[0].dim(2) as f64, v.frames[0].dim(1) as f64);
        for t in frames {
            let mut g = Graph::with_params(params);
            let vars = need.iter().map(|&k| g.input(maps[t - before + k].clone().expect("cached"))).collect();
            let reference = need.iter().position(|&k| k == before).expect("reference is needed");
            for d in det.detect_from_maps(&mut g, vars, reference, image)? {
                out.push(DetectionRecord { video_id: v.video_id.clone(), frame: t, class_id: d.class_id, score: d.score, bbox: d.bbox });
            }
        }
    }
    Ok(out)
}

pub fn score(dets: &[DetectionRecord], videos: &[PreparedVideo], cfg: &PipelineConfig) -> EvalReport {
    let (gts, all) = ground_truth(videos, &cfg.model);
    evaluate(dets, &gts, &all, cfg.model.num_classes, &cfg.eval)
}

/// The evaluation report written next to a detection dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variant: Variant,
    pub seq_nms_applied: bool,
    pub num_videos: usize,
    #[serde(flatten)]
    pub metrics: EvalReport,
}

impl Report {
    pub fn to_text(&self) -> String {
        let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "variant ({}){}\nvideos: {}\nmAP: {:.4}\n",
            self.variant,
            if self.seq_nms_applied { " + seq-nms" } else { "" },
            self.num_videos,
            self.metrics.map
        );
        for (c, ap) in self.metrics.per_class.iter().enumerate() {
            s += &format!("  class {c}: {}\n", f(*ap));
        }
        for (b, n) in MotionBucket::ALL.iter().zip(self.metrics.bucket_counts) {
            s += &format!("mAP {:?}: {} ({n} gts)\n", b, f(self.metrics.bucket(*b)));
        }
        s
    }
}

/// Detections and report for `params` on `videos`; `seq_nms` rescoring is
/// applied when requested or when the configured variant is (f).
pub fn evaluate_params(
    cfg: &PipelineConfig,
    params: &ParamStore,
    videos: &[PreparedVideo],
    seq_nms: bool,
) -> Result<(Vec<DetectionRecord>, Report)> {
    let det = Detector::new(cfg.model.clone())?;
    let raw = detect_videos(&det, params, videos)?;
    let apply = seq_nms || cfg.model.variant.seq_nms();
    let dets = if apply { seq_nms_all(&raw, &cfg.seq_nms) } else { raw };
    let metrics = score(&dets, videos, cfg);
    Ok((dets, Report { variant: cfg.model.variant, seq_nms_applied: apply, num_videos: videos.len(), metrics }))
}

/// Evaluate a checkpoint and write `detections.jsonl`, `report.json` and
/// `report.txt` into `out_dir`.
pub fn evaluate_checkpoint(ck: &Checkpoint, videos: &[PreparedVideo], seq_nms: bool, out_dir: &Path) -> Result<Report> {
    let det = Detector::new(ck.config.model.clone())?;
    ck.check_compatible(&det.init_params(0))?;
    let (dets, report) = evaluate_params(&ck.config, &ck.params, videos, seq_nms)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_detections(&out_dir.join("detections.jsonl"), &dets)?;
    write_json(&out_dir.join("report.json"), &report)?;
    let txt = out_dir.join("report.txt");
    std::fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v)?;
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub map: Option<f64>,
    pub map_slow: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_fast: Option<f64>,
    pub train_seconds: f64,
    /// Set when training or evaluation of this variant failed.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Markdown table with overall and motion-split columns.
    pub fn to_markdown(&self) -> String {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = String::from("| Method | mAP (%) | Slow | Medium | Fast |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            match &r.error {
                Some(e) => s += &format!("| ({}) | failed: {} | - | - | - |\n", r.variant, e.replace('|', "/")),
                None => {
                    s += &format!("| ({}) | {} | {} | {} | {} |\n", r.variant, f(r.map), f(r.map_slow), f(r.map_medium), f(r.map_fast))
                }
            }
        }
        s
    }
}

/// Train and evaluate each variant under one seed. Variant (f) reuses the
/// parameters trained for (e). A failing variant yields an error row and the
/// remaining variants still run.
pub fn ablate(
    base: &PipelineConfig,
    variants: &[Variant],
    train_set: &[PreparedVideo],
    val_set: &[PreparedVideo],
    out_dir: Option<&Path>,
    verbose: bool,
) -> AblationTable {
    let mut trained: Vec<(Variant, ParamStore, f64)> = Vec::new();
    let mut rows = Vec::new();
    for &v in variants {
        let train_as = if v == Variant::F { Variant::E } else { v };
        let mut cfg = base.clone();
        cfg.model.variant = train_as;
        let run = || -> Result<(ParamStore, f64)> {
            if let Some((_, p, s)) = trained.iter().find(|(tv, _, _)| *tv == train_as) {
                return Ok((p.clone(), *s));
            }
            let start = std::time::Instant::now();
            let opts = TrainOptions {
                out_dir: out_dir.map(|d| d.join(format!("variant_{}", train_as.letter()))),
                verbose,
                ..Default::default()
            };
            let out = train(&cfg, train_set, val_set, opts)?;
            Ok((out.checkpoint.params, start.elapsed().as_secs_f64()))
        };
        let result = run().and_then(|(params, secs)| {
            if !trained.iter().any(|(tv, _, _)| *tv == train_as) {
                trained.push((train_as, params.clone(), secs));
            }
            let mut eval_cfg = cfg.clone();
            eval_cfg.model.variant = v;
            let (dets, report) = evaluate_params(&eval_cfg, &params, val_set, false)?;
            if let Some(d) = out_dir {
                let vd = d.join(format!("variant_{}", v.letter()));
                std::fs::create_dir_all(&vd).map_err(|e| Error::io(&vd, e))?;
                write_detections(&vd.join("detections.jsonl"), &dets)?;
                write_json(&vd.join("report.json"), &report)?;
            }
            Ok((report, secs))
        });
        rows.push(match result {
            Ok((r, secs)) => AblationRow {
                variant: v,
                map: Some(r.metrics.map),
                map_slow: r.metrics.map_slow,
                map_medium: r.metrics.map_medium,
                map_fast: r.metrics.map_fast,
                train_seconds: secs,
                error: None,
            },
            Err(e) => AblationRow {
                variant: v,
                map: None,
                map_slow: None,
                map_medium: None,
                map_fast: None,
                train_seconds: 0.0,
                error: Some(e.to_string()),
            },
        });
    }
    AblationTable { seed: base.train.seed, rows }
}

const PALETTE: [[u8; 3]; 4] = [[40, 70, 150], [90, 170, 90], [230, 160, 40], [200, 60, 60]];

/// Grouped bar chart: one group per row, bars for overall, slow, medium and
/// fast mAP (in that order and colour). Heights are on a fixed 0..1 scale
/// with grid lines every 0.1; missing values are drawn as a thin grey stub.
pub fn plot_bars(groups: &[[Option<f64>; 4]], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (left, right, top, bottom) = (20u32, 10u32, 10u32, 20u32);
    let plot_h = height.saturating_sub(top + bottom).max(1);
    let plot_w = width.saturating_sub(left + right).max(1);
    let fill = |img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: [u8; 3]| {
        for y in y0.min(height)..y1.min(height) {
            for x in x0.min(width)..x1.min(width) {
                img.put_pixel(x, y, Rgb(c));
            }
        }
    };
    for k in 0..=10 {
        let y = top + plot_h - plot_h * k / 10;
        fill(&mut img, left, y, left + plot_w, y + 1, [225, 225, 225]);
    }
    let n = groups.len().max(1) as u32;
    let group_w = plot_w / n;
    let bar_w = (group_w / 5).max(1);
    for (gi, vals) in groups.iter().enumerate() {
        let gx = left + gi as u32 * group_w + bar_w / 2;
        for (bi, v) in vals.iter().enumerate() {
            let x0 = gx + bi as u32 * bar_w;
            match v {
                Some(v) => {
                    let h = (v.clamp(0.0, 1.0) * plot_h as f64).round() as u32;
                    fill(&mut img, x0, top + plot_h - h, x0 + bar_w.saturating_sub(1).max(1), top + plot_h, PALETTE[bi]);
                }
                None => fill(&mut img, x0, top + plot_h - 2, x0 + bar_w.saturating_sub(1).max(1), top + plot_h, [160, 160, 160]),
            }
        }
    }
    fill(&mut img, left, top + plot_h, left + plot_w, top + plot_h + 1, [0, 0, 0]);
    fill(&mut img, left - 1, top, left, top + plot_h + 1, [0, 0, 0]);
    img
}

/// Plot either an evaluation report or an ablation table, whichever `path` holds.
pub fn plot_file(path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let groups: Vec<[Option<f64>; 4]> = if let Ok(t) = serde_json::from_str::<AblationTable>(&text) {
        t.rows.iter().map(|r| [r.map, r.map_slow, r.map_medium, r.map_fast]).collect()
    } else {
        let r: Report = serde_json::from_str(&text)?;
        vec![[Some(r.metrics.map), r.metrics.map_slow, r.metrics.map_medium, r.metrics.map_fast]]
    };
    let img = plot_bars(&groups, 120 + 100 * groups.len() as u32, 240);
    img.save(out).map_err(|e| Error::Image { path: out.to_path_buf(), source: e })
}
