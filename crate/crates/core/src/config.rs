//! Run configuration, read from a TOML key-value file.
//!
//! Every key is optional; missing keys take the desk-scale defaults.
//!
//! ```toml
//! num_videos = 200
//! data_dir = "data"
//! out_dir = "runs/e"
//!
//! [model]
//! variant = "e"
//! before = 2
//! after = 2
//! aggregate = "sum"
//!
//! [train]
//! epochs = 8
//! batch_size = 4
//! base_lr = 0.005
//!
//! [data]
//! frames_per_video = 10
//! blur_prob = 0.3
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::SceneConfig;
use crate::error::{Error, Result};
use crate::evalkit::{EvalConfig, SeqNmsConfig};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (1-based) after which the step size drops by `lr_decay`;
    /// empty means half and three quarters of `epochs`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Linear warm-up length in optimizer steps.
    pub warmup_iters: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    /// Training windows drawn per video and epoch.
    pub windows_per_video: usize,
    pub hflip: bool,
    /// Leading epochs trained on windows that repeat the reference frame.
    pub static_pretrain_epochs: usize,
    pub seed: u64,
    /// Fraction of the dataset (taken from the end of the manifest) held out for validation.
    pub val_fraction: f64,
    /// Validate every this many epochs; 0 disables per-epoch validation.
    pub val_every: usize,
    /// Cap on validation videos used per epoch; 0 uses all.
    pub val_videos_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 4,
            base_lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: Vec::new(),
            lr_decay: 0.1,
            warmup_iters: 50,
            clip_norm: 10.0,
            windows_per_video: 2,
            hflip: true,
            static_pretrain_epochs: 0,
            seed: 7,
            val_fraction: 0.2,
            val_every: 1,
            val_videos_per_epoch: 10,
        }
    }
}

impl TrainConfig {
    pub fn milestones(&self) -> Vec<usize> {
        if self.lr_milestones.is_empty() {
            vec![self.epochs / 2, self.epochs * 3 / 4]
        } else {
            self.lr_milestones.clone()
        }
    }

    /// Step size for a 0-based `epoch` and global optimizer step `iter`.
    pub fn lr_at(&self, epoch: usize, iter: usize) -> f64 {
        let drops = self.milestones().iter().filter(|&&m| m > 0 && epoch >= m).count();
        let warm = if self.warmup_iters > 0 { ((iter + 1) as f64 / self.warmup_iters as f64).min(1.0) } else { 1.0 };
        self.base_lr * self.lr_decay.powi(drops as i32) * warm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub num_videos: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SceneConfig,
    pub eval: EvalConfig,
    pub seq_nms: SeqNmsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            num_videos: 200,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SceneConfig::default(),
            eval: EvalConfig::default(),
            seq_nms: SeqNmsConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// A few-second setup: 32×32 frames, a narrow model and two short epochs.
    /// Meant for smoke runs and examples, not for accuracy.
    pub fn tiny() -> Self {
        let mut cfg = PipelineConfig { num_videos: 12, ..Default::default() };
        cfg.data = SceneConfig { width: 32, height: 32, size_range: (8.0, 14.0), frames_per_video: 7, ..SceneConfig::default() };
        let m = &mut cfg.model;
        m.backbone.channels = [4, 4, 8, 8];
        m.anchors.scales = vec![8.0, 14.0];
        m.anchors.ratios = vec![1.0];
        m.tboc.pooled = 2;
        m.tboc.hidden = 8;
        m.jtmg.visual_dim = 8;
        m.jtmg.diff_dim = 4;
        m.jtmg.gru_hidden = 4;
        m.jtmg.head_dim = 8;
        m.gate_hidden = 4;
        m.sampling.roi_batch = 16;
        m.rpn.top_k_eval = 20;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 2;
        cfg.train.windows_per_video = 1;
        cfg.train.warmup_iters = 4;
        cfg.train.val_fraction = 0.25;
        cfg.train.val_videos_per_epoch = 2;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.windows_per_video == 0 {
            return Err(Error::Config("batch_size and windows_per_video must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if self.model.num_classes < self.data.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes but the data generator uses {}",
                self.model.num_classes, self.data.num_classes
            )));
        }
        if self.data.frames_per_video < self.model.window_len() {
            return Err(Error::VideoTooShort { frames: self.data.frames_per_video, window: self.model.window_len() });
        }
        Ok(())
    }
}
