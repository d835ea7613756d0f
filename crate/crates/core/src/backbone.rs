//! Small shared-weight convolutional feature extractor.
//!
//! Four 3x3 stages (strides 2, 2, 2, 1), each conv -> ReLU -> group norm.
//! Every frame of a window goes through the same parameters.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub channels: [usize; 4],
    pub strides: [usize; 4],
    pub groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64, 64], strides: [2, 2, 2, 1], groups: 4 }
    }
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        self.channels[3]
    }

    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }
}

/// Per-frame feature maps `[C, H', W']` for a window.
#[derive(Clone, Debug)]
pub struct FeatureMapSet {
    pub maps: Vec<Var>,
    pub stride: usize,
    pub reference: usize,
}

impl FeatureMapSet {
    pub fn reference_map(&self) -> Var {
        self.maps[self.reference]
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<(Conv2d, GroupNorm)>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Self {
        let mut in_ch = 3;
        let stages = (0..4)
            .map(|i| {
                let out = config.channels[i];
                let conv = Conv2d::new(format!("backbone.conv{}", i + 1), in_ch, out, 3, config.strides[i]);
                let norm = GroupNorm::new(format!("backbone.norm{}", i + 1), out, config.groups);
                in_ch = out;
                (conv, norm)
            })
            .collect();
        Self { config, stages }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for (conv, norm) in &self.stages {
            conv.init(store, rng);
            norm.init(store);
        }
    }

    /// One `[3, H, W]` frame to a `[C, H/8, W/8]` map.
    pub fn forward_frame(&self, g: &mut Graph<'_>, frame: Var) -> Var {
        let mut x = frame;
        for (conv, norm) in &self.stages {
            x = conv.forward(g, x);
            x = g.relu(x);
            x = norm.forward(g, x);
        }
        x
    }

    /// Shared-weight forward over every frame of a window.
    pub fn forward(&self, g: &mut Graph<'_>, frames: &[Var], reference: usize) -> Result<FeatureMapSet> {
        let Some(&first) = frames.first() else {
            return Err(Error::Shape("empty frame window".into()));
        };
        let shape = g.shape(first).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("frames must be [3,H,W], got {shape:?}")));
        }
        let stride = self.config.stride();
        if !shape[1].is_multiple_of(stride) || !shape[2].is_multiple_of(stride) {
            return Err(Error::Shape(format!("frame size {}x{} not divisible by stride {stride}", shape[2], shape[1])));
        }
        for &f in frames {
            if g.shape(f) != shape.as_slice() {
                return Err(Error::Shape(format!("non-uniform frame sizes {:?} vs {shape:?}", g.shape(f))));
            }
        }
        let maps = frames.iter().map(|&f| self.forward_frame(g, f)).collect();
        Ok(FeatureMapSet { maps, stride, reference })
    }
}

/// RGB frame to a `[3, H, W]` tensor with zero-mean, unit-variance channels.
pub fn frame_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64;
        }
    }
    for chunk in data.chunks_mut(plane) {
        let mean = chunk.iter().sum::<f64>() / plane as f64;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
        let inv = 1.0 / (var.sqrt() + 1e-6);
        for v in chunk.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Mirror a `[C, H, W]` tensor left-right.
pub fn hflip_tensor(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        t.data()[i - x + (w - 1 - x)]
    })
}
