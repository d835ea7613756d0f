//! Synthetic moving-shapes videos with persistent track identities.
//!
//! Each video is a static textured background with a few coloured shapes
//! (disc, square, triangle) moving at piecewise-constant velocity, bouncing
//! off the image border. Objects can be motion-blurred along their velocity
//! or hidden for a contiguous run of frames; hidden objects keep their box
//! and track id with `occluded = true`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const INCOMPLETE_MARKER: &str = ".incomplete";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn from_class(class_id: usize) -> ShapeKind {
        match class_id {
            0 => ShapeKind::Disc,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        }
    }

    /// Whether the offset `(dx, dy)` from the centre lies inside a shape of side `size`.
    fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        let r = 0.5 * size;
        match self {
            ShapeKind::Disc => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                // apex at the top centre, base along the bottom edge
                if dy.abs() > r {
                    return false;
                }
                let t = (dy + r) / size;
                dx.abs() <= r * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub track_id: u32,
    pub class_id: usize,
    pub bbox: BBox,
    pub occluded: bool,
    pub blur_level: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    pub frames: Vec<RgbImage>,
    /// One list per frame.
    pub annotations: Vec<Vec<GroundTruthObject>>,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn size(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.width() as usize, f.height() as usize))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Object side length range in pixels.
    pub size_range: (f64, f64),
    /// Signed per-axis velocity ranges in pixels/frame.
    pub velocity_x: (f64, f64),
    pub velocity_y: (f64, f64),
    /// Per-frame probability of drawing a new velocity.
    pub velocity_change_prob: f64,
    pub blur_prob: f64,
    /// Blur kernel length as a multiple of the per-frame displacement.
    pub blur_strength: f64,
    pub occlusion_prob: f64,
    pub occlusion_duration: usize,
    pub objects_per_video: (usize, usize),
    pub frames_per_video: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            num_classes: 2,
            size_range: (16.0, 36.0),
            velocity_x: (-5.0, 5.0),
            velocity_y: (-5.0, 5.0),
            velocity_change_prob: 0.1,
            blur_prob: 0.3,
            blur_strength: 1.5,
            occlusion_prob: 0.25,
            occlusion_duration: 2,
            objects_per_video: (1, 3),
            frames_per_video: 10,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(2..=3).contains(&self.num_classes) {
            return bad("num_classes must be 2 or 3");
        }
        let ranges = [self.size_range, self.velocity_x, self.velocity_y];
        if ranges.iter().any(|r| !(r.0 <= r.1) || !r.0.is_finite() || !r.1.is_finite()) {
            return bad("empty or non-finite range");
        }
        if self.objects_per_video.0 > self.objects_per_video.1 {
            return bad("empty objects_per_video range");
        }
        for p in [self.velocity_change_prob, self.blur_prob, self.occlusion_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.blur_strength < 0.0 {
            return bad("blur_strength must be non-negative");
        }
        if self.size_range.0 < 2.0 {
            return bad("objects must be at least 2 pixels wide");
        }
        if self.size_range.1 >= self.width.min(self.height) as f64 {
            return bad("objects cannot fit inside the image");
        }
        if self.frames_per_video == 0 {
            return bad("frames_per_video must be positive");
        }
        Ok(())
    }
}

struct Mover {
    shape: ShapeKind,
    class_id: usize,
    size: f64,
    color: [f64; 3],
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    occluded: Option<(usize, usize)>,
}

impl Mover {
    fn bbox(&self) -> BBox {
        let r = 0.5 * self.size;
        BBox::new(self.cx - r, self.cy - r, self.cx + r, self.cy + r)
    }

    /// Advance one frame, reflecting off the borders.
    fn step(&mut self, width: f64, height: f64) {
        let r = 0.5 * self.size;
        (self.cx, self.vx) = reflect(self.cx + self.vx, self.vx, r, width - r);
        (self.cy, self.vy) = reflect(self.cy + self.vy, self.vy, r, height - r);
    }
}

fn reflect(mut p: f64, mut v: f64, lo: f64, hi: f64) -> (f64, f64) {
    if p < lo {
        p = 2.0 * lo - p;
        v = -v;
    } else if p > hi {
        p = 2.0 * hi - p;
        v = -v;
    }
    (p.clamp(lo, hi), v)
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    // saturated colour: one dominant channel, one weak
    let hue = rng.gen_range(0.0..6.0f64);
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let v = rng.gen_range(200.0..255.0);
    [r * v, g * v, b * v]
}

fn background(width: usize, height: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let grid = 5;
    let base = rng.gen_range(60.0..130.0);
    let coarse: Vec<[f64; 3]> = (0..(grid + 1) * (grid + 1))
        .map(|_| {
            let d = rng.gen_range(-35.0..35.0);
            [base + d + rng.gen_range(-12.0..12.0), base + d + rng.gen_range(-12.0..12.0), base + d + rng.gen_range(-12.0..12.0)]
        })
        .collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let gy = y as f64 / height as f64 * grid as f64;
        let (y0, ty) = (gy.floor() as usize, gy.fract());
        for x in 0..width {
            let gx = x as f64 / width as f64 * grid as f64;
            let (x0, tx) = (gx.floor() as usize, gx.fract());
            let at = |yy: usize, xx: usize| coarse[yy * (grid + 1) + xx];
            let mut px = [0.0; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let top = at(y0, x0)[c] * (1.0 - tx) + at(y0, x0 + 1)[c] * tx;
                let bot = at(y0 + 1, x0)[c] * (1.0 - tx) + at(y0 + 1, x0 + 1)[c] * tx;
                *v = top * (1.0 - ty) + bot * ty + rng.gen_range(-10.0..10.0);
            }
            out.push(px);
        }
    }
    out
}

/// Composite a shape onto `canvas`, smeared along `(vx, vy)` over `blur` pixels.
fn render(canvas: &mut [[f64; 3]], width: usize, height: usize, m: &Mover, blur: f64) {
    let speed = (m.vx * m.vx + m.vy * m.vy).sqrt();
    let (ux, uy) = if speed > 0.0 { (m.vx / speed, m.vy / speed) } else { (0.0, 0.0) };
    let taps = if blur > 0.0 { (blur.ceil() as usize).max(2) * 2 } else { 1 };
    let offsets: Vec<(f64, f64)> = (0..taps)
        .map(|k| {
            let s = if taps == 1 { 0.0 } else { (k as f64 / (taps - 1) as f64 - 0.5) * blur };
            (s * ux, s * uy)
        })
        .collect();
    let reach = 0.5 * m.size + 0.5 * blur + 1.0;
    let x_lo = (m.cx - reach).floor().max(0.0) as usize;
    let x_hi = ((m.cx + reach).ceil() as usize).min(width);
    let y_lo = (m.cy - reach).floor().max(0.0) as usize;
    let y_hi = ((m.cy + reach).ceil() as usize).min(height);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let mut cover = 0.0;
            for &(ox, oy) in &offsets {
                // 2x2 supersampling per tap
                for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    let dx = x as f64 + sx - m.cx - ox;
                    let dy = y as f64 + sy - m.cy - oy;
                    if m.shape.contains(dx, dy, m.size) {
                        cover += 1.0;
                    }
                }
            }
            let a = cover / (4 * taps) as f64;
            if a > 0.0 {
                let px = &mut canvas[y * width + x];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + m.color[c] * a;
                }
            }
        }
    }
}

/// Generate one video; a pure function of `(config, seed)`.
pub fn generate_video(config: &SceneConfig, seed: u64) -> Result<VideoSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.width, config.height);
    let (wf, hf) = (w as f64, h as f64);
    let frames_n = config.frames_per_video;

    let bg = background(w, h, &mut rng);
    let n_obj = rng.gen_range(config.objects_per_video.0..=config.objects_per_video.1);
    let mut movers: Vec<Mover> = (0..n_obj)
        .map(|_| {
            let class_id = rng.gen_range(0..config.num_classes);
            let size = uniform(&mut rng, config.size_range);
            let r = 0.5 * size;
            let cx = uniform(&mut rng, (r, wf - r));
            let cy = uniform(&mut rng, (r, hf - r));
            let vx = uniform(&mut rng, config.velocity_x);
            let vy = uniform(&mut rng, config.velocity_y);
            let occluded = if config.occlusion_duration > 0
                && config.occlusion_duration <= frames_n
                && rng.gen_bool(config.occlusion_prob)
            {
                let start = rng.gen_range(0..=frames_n - config.occlusion_duration);
                Some((start, start + config.occlusion_duration))
            } else {
                None
            };
            Mover { shape: ShapeKind::from_class(class_id), class_id, size, color: random_color(&mut rng), cx, cy, vx, vy, occluded }
        })
        .collect();

    let noise = Normal::new(0.0, 5.0).expect("valid sigma");
    let mut frames = Vec::with_capacity(frames_n);
    let mut annotations = Vec::with_capacity(frames_n);
    for f in 0..frames_n {
        if f > 0 {
            for m in movers.iter_mut() {
                if rng.gen_bool(config.velocity_change_prob) {
                    m.vx = uniform(&mut rng, config.velocity_x);
                    m.vy = uniform(&mut rng, config.velocity_y);
                }
                m.step(wf, hf);
            }
        }
        let mut canvas = bg.clone();
        let mut objs = Vec::with_capacity(movers.len());
        for (track, m) in movers.iter().enumerate() {
            let speed = (m.vx * m.vx + m.vy * m.vy).sqrt();
            let blur = if rng.gen_bool(config.blur_prob) { config.blur_strength * speed } else { 0.0 };
            let occluded = m.occluded.is_some_and(|(a, b)| (a..b).contains(&f));
            if !occluded {
                render(&mut canvas, w, h, m, blur);
            }
            objs.push(GroundTruthObject {
                track_id: track as u32,
                class_id: m.class_id,
                bbox: m.bbox().clip(wf, hf),
                occluded,
                blur_level: blur,
            });
        }
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = canvas[y as usize * w + x as usize];
            Rgb([0, 1, 2].map(|c| (px[c] + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8))
        });
        frames.push(img);
        annotations.push(objs);
    }
    Ok(VideoSample { video_id: format!("video_{seed:06}"), frames, annotations })
}

/// Generate `count` videos with seeds `config.seed + i`.
pub fn generate_dataset(config: &SceneConfig, count: usize) -> Result<Vec<VideoSample>> {
    (0..count)
        .map(|i| {
            let mut v = generate_video(config, config.seed.wrapping_add(i as u64))?;
            v.video_id = format!("video_{i:04}");
            Ok(v)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub videos: Vec<String>,
    pub frame_files: usize,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    frame: usize,
    track_id: u32,
    class_id: usize,
    bbox: [f64; 4],
    occluded: bool,
    blur: f64,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn frame_path(root: &Path, video_id: &str, frame: usize) -> PathBuf {
    root.join(video_id).join(format!("frame_{frame:04}.png"))
}

/// Write videos under `root`. A marker file exists for the duration of the
/// write, so an interrupted write is detected by [`read_dataset`].
pub fn write_dataset(samples: &[VideoSample], root: &Path) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let marker = root.join(INCOMPLETE_MARKER);
    fs::write(&marker, b"").map_err(|e| Error::io(&marker, e))?;
    let mut frame_files = 0;
    for s in samples {
        if !valid_id(&s.video_id) {
            return Err(Error::Config(format!("invalid video id {:?}", s.video_id)));
        }
        let dir = root.join(&s.video_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, f) in s.frames.iter().enumerate() {
            let p = frame_path(root, &s.video_id, i);
            f.save(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
            frame_files += 1;
        }
        let ann_path = dir.join(ANNOTATION_FILE);
        let mut out = String::new();
        for (frame, objs) in s.annotations.iter().enumerate() {
            for o in objs {
                let rec = AnnotationRecord {
                    frame,
                    track_id: o.track_id,
                    class_id: o.class_id,
                    bbox: o.bbox.to_array(),
                    occluded: o.occluded,
                    blur: o.blur_level,
                };
                out.push_str(&serde_json::to_string(&rec)?);
                out.push('\n');
            }
        }
        fs::write(&ann_path, out).map_err(|e| Error::io(&ann_path, e))?;
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for s in samples {
        writeln!(f, "{}", s.video_id).map_err(|e| Error::io(&manifest_path, e))?;
    }
    f.sync_all().map_err(|e| Error::io(&manifest_path, e))?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(Manifest { videos: samples.iter().map(|s| s.video_id.clone()).collect(), frame_files })
}

/// Parse `manifest.txt`, checking every listed video directory exists.
pub fn read_manifest(root: &Path) -> Result<Vec<String>> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |reason: &str| Error::ManifestParse { line: line_no, content: line.to_string(), reason: reason.to_string() };
        if !valid_id(line) {
            return Err(err("invalid video id"));
        }
        if !root.join(line).is_dir() {
            return Err(err("no such video directory"));
        }
        ids.push(line.to_string());
    }
    if !text.is_empty() && !text.ends_with('\n') {
        let last = text.lines().last().unwrap_or_default();
        return Err(Error::ManifestParse { line: ids.len(), content: last.to_string(), reason: "truncated (no trailing newline)".into() });
    }
    Ok(ids)
}

pub fn read_video(root: &Path, video_id: &str) -> Result<VideoSample> {
    let dir = root.join(video_id);
    let mut indices = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".png")) {
            if let Ok(i) = num.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    let count = indices.last().map_or(0, |&m| m + 1);
    if let Some(missing) = (0..count).find(|i| indices.binary_search(i).is_err()) {
        return Err(Error::MissingFrame { video: video_id.to_string(), frame: missing });
    }
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let p = frame_path(root, video_id, i);
        let img = image::open(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?.to_rgb8();
        if let Some(first) = frames.first() {
            let first: &RgbImage = first;
            if first.dimensions() != img.dimensions() {
                return Err(Error::Shape(format!("{}: frame {i} size differs from frame 0", video_id)));
            }
        }
        frames.push(img);
    }

    let ann_path = dir.join(ANNOTATION_FILE);
    let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut annotations = vec![Vec::new(); count];
    let mut seen: HashSet<(usize, u32)> = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::AnnotationParse {
            path: ann_path.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        let invalid = |m: String| Error::Validation { path: ann_path.clone(), line: line_no, message: m };
        let [x1, y1, x2, y2] = rec.bbox;
        if !(x1 < x2 && y1 < y2) || !rec.bbox.iter().all(|v| v.is_finite()) {
            return Err(invalid(format!("box {:?} violates x1 < x2, y1 < y2", rec.bbox)));
        }
        if !(rec.blur >= 0.0) {
            return Err(invalid(format!("negative blur {}", rec.blur)));
        }
        if rec.frame >= count {
            return Err(Error::FrameCountMismatch { video: video_id.to_string(), frame: rec.frame, frames: count });
        }
        if !seen.insert((rec.frame, rec.track_id)) {
            return Err(invalid(format!("duplicate track {} in frame {}", rec.track_id, rec.frame)));
        }
        annotations[rec.frame].push(GroundTruthObject {
            track_id: rec.track_id,
            class_id: rec.class_id,
            bbox: BBox::from(rec.bbox),
            occluded: rec.occluded,
            blur_level: rec.blur,
        });
    }
    Ok(VideoSample { video_id: video_id.to_string(), frames, annotations })
}

pub fn read_dataset(root: &Path) -> Result<Vec<VideoSample>> {
    if root.join(INCOMPLETE_MARKER).exists() {
        return Err(Error::Incomplete(root.to_path_buf()));
    }
    read_manifest(root)?.iter().map(|id| read_video(root, id)).collect()
}

/// The `(M+N+1)`-frame slice around a reference frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameWindow {
    /// Reference frame index within the video (after clamping).
    pub t: usize,
    /// Video frame indices, in temporal order.
    pub frames: Vec<usize>,
    /// Position of `t` within `frames` (always `M`).
    pub reference: usize,
}

impl FrameWindow {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Window `t-M ..= t+N`, with `t` clamped into the video's valid interior.
pub fn window_at(num_frames: usize, t: usize, before: usize, after: usize) -> Result<FrameWindow> {
    let len = before + after + 1;
    if num_frames < len {
        return Err(Error::VideoTooShort { frames: num_frames, window: len });
    }
    let t = t.clamp(before, num_frames - 1 - after);
    Ok(FrameWindow { t, frames: (t - before..=t + after).collect(), reference: before })
}
