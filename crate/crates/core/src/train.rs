//! Joint training of all detector stages with momentum SGD.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{frame_to_tensor, hflip_tensor};
use crate::checkpoint::Checkpoint;
use crate::config::{PipelineConfig, TrainConfig};
use crate::datagen::{window_at, GroundTruthObject, VideoSample};
use crate::error::{Error, Result};
use crate::model::{Detector, WindowInput};
use crate::params::ParamStore;
use crate::pipeline;
use crate::tensor::Tensor;

/// A video with frames already converted to normalised tensors.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub video_id: String,
    pub frames: Vec<Tensor>,
    pub annotations: Vec<Vec<GroundTruthObject>>,
}

impl PreparedVideo {
    pub fn new(v: &VideoSample) -> Self {
        Self {
            video_id: v.video_id.clone(),
            frames: v.frames.iter().map(frame_to_tensor).collect(),
            annotations: v.annotations.clone(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn width(&self) -> f64 {
        self.frames[0].dim(2) as f64
    }
}

pub fn prepare_all(videos: &[VideoSample]) -> Vec<PreparedVideo> {
    videos.iter().map(PreparedVideo::new).collect()
}

/// Which window to draw, and how.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub video: usize,
    pub t: usize,
    pub flip: bool,
    /// Every window slot holds the reference frame.
    pub still: bool,
}

pub fn build_window(v: &PreparedVideo, spec: WindowSpec, before: usize, after: usize) -> Result<WindowInput> {
    let w = window_at(v.num_frames(), spec.t, before, after)?;
    let idx: Vec<usize> = if spec.still { vec![w.t; w.len()] } else { w.frames.clone() };
    let width = v.width();
    let frames = idx
        .iter()
        .map(|&i| if spec.flip { hflip_tensor(&v.frames[i]) } else { v.frames[i].clone() })
        .collect();
    let gts = idx
        .iter()
        .map(|&i| {
            v.annotations[i]
                .iter()
                .map(|o| if spec.flip { GroundTruthObject { bbox: o.bbox.hflip(width), ..o.clone() } } else { o.clone() })
                .collect()
        })
        .collect();
    Ok(WindowInput { frames, gts, reference: w.reference })
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Shuffled training windows for one epoch. Depends only on the seed and
/// the epoch index, so a resumed run draws the same windows.
pub fn epoch_plan(videos: &[PreparedVideo], cfg: &PipelineConfig, epoch: usize) -> Vec<WindowSpec> {
    let t = &cfg.train;
    let (before, after) = (cfg.model.before, cfg.model.after);
    let mut rng = epoch_rng(t.seed, 100 + epoch as u64);
    let still = epoch < t.static_pretrain_epochs;
    let mut specs = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        let n = v.num_frames();
        if n < before + after + 1 {
            continue;
        }
        for _ in 0..t.windows_per_video {
            let t = rng.gen_range(before..n - after);
            let flip = cfg.train.hflip && rng.gen_bool(0.5);
            specs.push(WindowSpec { video: vi, t, flip, still });
        }
    }
    specs.shuffle(&mut rng);
    specs
}

/// SGD with classical momentum and L2 weight decay:
/// `v = mu v + (g + wd p)`, `p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: ParamStore,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: ParamStore::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if self.velocity.get(name).is_none() {
                self.velocity.insert(name.to_string(), Tensor::zeros(p.shape()));
            }
            let v = self.velocity.get_mut(name).unwrap();
            for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Scale all gradients so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.scale_in_place(s);
        }
    }
    norm
}

/// One line of the per-step metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iter: usize,
    #[serde(rename = "L_rpn")]
    pub l_rpn: f64,
    #[serde(rename = "L_ref")]
    pub l_ref: f64,
    #[serde(rename = "L_det")]
    pub l_det: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_l_total: f64,
    pub val_map: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where metrics, summaries and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs even if the schedule is longer.
    pub stop_after_epochs: Option<usize>,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
    pub epochs: Vec<EpochSummary>,
}

struct Logs {
    metrics: Option<BufWriter<File>>,
    epochs: Option<BufWriter<File>>,
}

impl Logs {
    fn open(dir: Option<&Path>, append: bool) -> Result<Self> {
        let Some(dir) = dir else { return Ok(Self { metrics: None, epochs: None }) };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self { metrics: Some(open("metrics.jsonl")?), epochs: Some(open("epochs.jsonl")?) })
    }

    fn line<T: Serialize>(w: &mut Option<BufWriter<File>>, v: &T) -> Result<()> {
        if let Some(w) = w {
            serde_json::to_writer(&mut *w, v)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    }
}

fn divergence(dir: Option<&Path>, iteration: usize, component: &str, last: Option<&StepMetrics>) -> Error {
    if let Some(dir) = dir {
        let report = serde_json::json!({ "diverged_at": iteration, "component": component, "last_finite": last });
        let _ = std::fs::write(dir.join("divergence.json"), report.to_string());
    }
    Error::Diverged { iteration, component: component.to_string() }
}

/// Train `cfg.model` on `train`, validating on a prefix of `val` after each
/// epoch. Deterministic given the seed; resuming from a checkpoint written at
/// an epoch boundary continues exactly as an uninterrupted run would.
pub fn train(cfg: &PipelineConfig, train: &[PreparedVideo], val: &[PreparedVideo], opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let det = Detector::new(cfg.model.clone())?;
    let tc: &TrainConfig = &cfg.train;
    let dir = opts.out_dir.as_deref();
    let mut params = det.init_params(tc.seed);
    let mut sgd = Sgd::new(tc.momentum, tc.weight_decay);
    let (mut epoch, mut iteration) = (0, 0);
    if let Some(ck) = &opts.resume {
        ck.check_compatible(&params)?;
        params = ck.params.clone();
        sgd.velocity = ck.velocity.clone();
        epoch = ck.epoch;
        iteration = ck.iteration;
    }
    let mut logs = Logs::open(dir, opts.resume.is_some())?;
    let last_epoch = opts.stop_after_epochs.map_or(tc.epochs, |s| s.min(tc.epochs));
    let mut metrics = Vec::new();
    let mut epochs = Vec::new();
    let val_subset = if tc.val_videos_per_epoch == 0 { val } else { &val[..val.len().min(tc.val_videos_per_epoch)] };

    'outer: while epoch < last_epoch {
        let start = Instant::now();
        let plan = epoch_plan(train, cfg, epoch);
        let mut loss_rng = epoch_rng(tc.seed, 200 + epoch as u64);
        let (mut sum_total, mut steps) = (0.0, 0);
        for batch in plan.chunks(tc.batch_size) {
            if opts.max_steps.is_some_and(|m| iteration >= m) {
                break 'outer;
            }
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut mean = StepMetrics { iter: iteration + 1, l_rpn: 0.0, l_ref: 0.0, l_det: 0.0, l_total: 0.0 };
            for spec in batch {
                let input = build_window(&train[spec.video], *spec, cfg.model.before, cfg.model.after)?;
                let mut g = Graph::with_params(&params);
                let (total, report, _) = match det.loss(&mut g, &input, None, &mut loss_rng) {
                    Ok(r) => r,
                    Err(Error::NonFinite(c)) => return Err(divergence(dir, iteration + 1, c, metrics.last())),
                    Err(e) => return Err(e),
                };
                for (name, t) in g.backward(total).params(&g) {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&t),
                        None => {
                            grads.insert(name, t);
                        }
                    }
                }
                mean.l_rpn += report.l_rpn;
                mean.l_ref += report.l_ref;
                mean.l_det += report.l_det;
                mean.l_total += report.l_total;
            }
            let b = batch.len() as f64;
            for t in grads.values_mut() {
                t.scale_in_place(1.0 / b);
            }
            mean.l_rpn /= b;
            mean.l_ref /= b;
            mean.l_det /= b;
            mean.l_total /= b;
            if !grads.values().all(|t| t.all_finite()) {
                return Err(divergence(dir, iteration + 1, "gradient", metrics.last()));
            }
            clip_grad_norm(&mut grads, tc.clip_norm);
            sgd.step(&mut params, &grads, tc.lr_at(epoch, iteration));
            iteration += 1;
            sum_total += mean.l_total;
            steps += 1;
            Logs::line(&mut logs.metrics, &mean)?;
            metrics.push(mean);
        }
        epoch += 1;

        let val_map = if tc.val_every > 0 && epoch % tc.val_every == 0 && !val_subset.is_empty() {
            let dets = pipeline::detect_videos(&det, &params, val_subset)?;
            Some(pipeline::score(&dets, val_subset, cfg).map)
        } else {
            None
        };
        let summary = EpochSummary {
            epoch,
            lr: tc.lr_at(epoch - 1, iteration.saturating_sub(1)),
            steps,
            mean_l_total: if steps > 0 { sum_total / steps as f64 } else { 0.0 },
            val_map,
            seconds: start.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "[{}] epoch {epoch}/{}: {} steps, mean L_total {:.4}, val mAP {}, {:.1}s",
                det.variant(),
                tc.epochs,
                steps,
                summary.mean_l_total,
                val_map.map_or("-".to_string(), |m| format!("{m:.4}")),
                summary.seconds
            );
        }
        Logs::line(&mut logs.epochs, &summary)?;
        epochs.push(summary);
        if let Some(dir) = dir {
            let ck = Checkpoint { config: cfg.clone(), epoch, iteration, params: params.clone(), velocity: sgd.velocity.clone() };
            ck.save(&dir.join(format!("checkpoint_epoch{epoch}.bin")))?;
            ck.save(&dir.join("checkpoint.bin"))?;
        }
    }

    let checkpoint = Checkpoint { config: cfg.clone(), epoch, iteration, params, velocity: sgd.velocity };
    Ok(TrainOutcome { checkpoint, metrics, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, SceneConfig};

    #[test]
    fn sgd_matches_hand_computation() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, -2.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[2], vec![0.5, 0.25]));
        let mut sgd = Sgd::new(0.9, 0.1);
        sgd.step(&mut p, &g, 0.1);
        // v = g + 0.1 p = [0.6, 0.05]; p = [0.94, -2.005]
        assert!((p.get("w").unwrap().data()[0] - 0.94).abs() < 1e-15);
        assert!((p.get("w").unwrap().data()[1] + 2.005).abs() < 1e-15);
        sgd.step(&mut p, &g, 0.1);
        // v = 0.9 [0.6, 0.05] + [0.5 + 0.094, 0.25 - 0.2005]
        let v = sgd.velocity.get("w").unwrap().data().to_vec();
        assert!((v[0] - (0.54 + 0.594)).abs() < 1e-12);
        assert!((v[1] - (0.045 + 0.0495)).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::new(&[2], vec![3.0, 0.0]));
        g.insert("b".to_string(), Tensor::new(&[1], vec![4.0]));
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g["a"].data(), &[3.0, 0.0]);
        clip_grad_norm(&mut g, 1.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
        assert!((g["b"].data()[0] - 0.8).abs() < 1e-15);
    }

    fn tiny() -> (PipelineConfig, Vec<PreparedVideo>) {
        let mut cfg = PipelineConfig::default();
        cfg.data = SceneConfig { width: 32, height: 32, size_range: (8.0, 12.0), frames_per_video: 6, ..SceneConfig::default() };
        cfg.model.backbone.channels = [4, 4, 8, 8];
        cfg.model.anchors.scales = vec![8.0, 12.0];
        cfg.model.anchors.ratios = vec![1.0];
        cfg.model.tboc.pooled = 2;
        cfg.model.tboc.hidden = 8;
        cfg.model.jtmg.visual_dim = 8;
        cfg.model.jtmg.diff_dim = 4;
        cfg.model.jtmg.gru_hidden = 4;
        cfg.model.jtmg.head_dim = 8;
        cfg.model.gate_hidden = 4;
        cfg.model.sampling.roi_batch = 16;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 2;
        cfg.train.windows_per_video = 1;
        cfg.train.val_every = 0;
        let videos = prepare_all(&generate_dataset(&cfg.data, 3).unwrap());
        (cfg, videos)
    }

    #[test]
    fn flipped_window_mirrors_frames_and_boxes() {
        let (cfg, videos) = tiny();
        let spec = WindowSpec { video: 0, t: 3, flip: false, still: false };
        let a = build_window(&videos[0], spec, 2, 2).unwrap();
        let b = build_window(&videos[0], WindowSpec { flip: true, ..spec }, 2, 2).unwrap();
        assert_eq!(a.frames.len(), 5);
        for k in 0..5 {
            assert_eq!(hflip_tensor(&a.frames[k]), b.frames[k]);
            for (x, y) in a.gts[k].iter().zip(&b.gts[k]) {
                assert_eq!(x.bbox.hflip(cfg.data.width as f64), y.bbox);
            }
        }
        let s = build_window(&videos[0], WindowSpec { still: true, ..spec }, 2, 2).unwrap();
        assert!(s.frames.iter().all(|f| *f == a.frames[2]));
    }

    #[test]
    fn epoch_plan_is_seeded_and_interior() {
        let (cfg, videos) = tiny();
        let p0 = epoch_plan(&videos, &cfg, 0);
        assert_eq!(p0, epoch_plan(&videos, &cfg, 0));
        assert_ne!(p0, epoch_plan(&videos, &cfg, 1));
        assert_eq!(p0.len(), 3);
        assert!(p0.iter().all(|s| (2..4).contains(&s.t)));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, videos) = tiny();
        let full = train(&cfg, &videos, &[], TrainOptions::default()).unwrap();
        let half = train(&cfg, &videos, &[], TrainOptions { stop_after_epochs: Some(1), ..Default::default() }).unwrap();
        assert_eq!(half.checkpoint.epoch, 1);
        let bytes = half.checkpoint.to_bytes();
        let resumed = Checkpoint::from_bytes(&bytes).unwrap();
        let rest = train(&cfg, &videos, &[], TrainOptions { resume: Some(resumed), ..Default::default() }).unwrap();
        assert_eq!(rest.checkpoint.params, full.checkpoint.params);
        assert_eq!(rest.checkpoint.iteration, full.checkpoint.iteration);
        let tail: Vec<_> = full.metrics[half.metrics.len()..].to_vec();
        assert_eq!(rest.metrics, tail);
    }
}
