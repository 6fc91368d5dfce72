//! Procedural scenes of overlapping textured shapes.
//!
//! Class 0 is the background. Every other class owns one colour from
//! [`PALETTE`] and one texture pattern, and appears as a single shape that
//! later shapes may partly cover. `noise` adds per-pixel Gaussian noise with
//! that standard deviation and jitters each instance colour by up to half of
//! it, so `noise = 0` gives scenes separable by colour alone.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SegmentationSample, VideoClip};
use crate::error::{Error, Result};
use crate::train::derive_seed;

pub const PALETTE: [[f32; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.30, 0.85],
    [0.85, 0.80, 0.20],
    [0.75, 0.25, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
];

const VAL_STREAM_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    /// Relative amplitude of the class textures.
    pub texture: f64,
    /// Probability that a foreground class is drawn in an image.
    pub presence: f64,
    pub train_images: usize,
    pub val_images: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            height: 64,
            width: 64,
            noise: 0.3,
            texture: 0.25,
            presence: 0.9,
            train_images: 64,
            val_images: 32,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least two classes".into()));
        }
        if self.num_classes > PALETTE.len() {
            return Err(Error::PaletteExhausted { requested: self.num_classes, available: PALETTE.len() });
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("synthetic images must be at least 8×8".into()));
        }
        if !(0.0..=1.0).contains(&self.presence) || self.noise < 0.0 || self.texture < 0.0 {
            return Err(Error::Config("presence must lie in [0, 1]; noise and texture must be non-negative".into()));
        }
        Ok(())
    }

    fn stream(&self, split: Split, index: usize) -> u64 {
        match split {
            Split::Train => index as u64,
            Split::Val => VAL_STREAM_OFFSET + index as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoConfig {
    /// Frames per clip.
    pub frames: usize,
    /// Upper bound of each shape's speed in pixels per frame.
    pub max_speed: f64,
    pub train_clips: usize,
    pub val_clips: usize,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self { frames: 3, max_speed: 1.5, train_clips: 64, val_clips: 32 }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { ry: f64, rx: f64 },
    Rect { hy: f64, hx: f64 },
    Triangle { r: f64, up: bool },
}

impl Shape {
    /// Membership in shape-relative coordinates.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Ellipse { ry, rx } => (u / ry).powi(2) + (v / rx).powi(2) <= 1.0,
            Shape::Rect { hy, hx } => u.abs() <= hy && v.abs() <= hx,
            Shape::Triangle { r, up } => {
                let u = if up { u } else { -u };
                u <= r * 0.5 && u >= -r && v.abs() <= (u + r) * 0.6
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    class: u8,
    shape: Shape,
    center: (f64, f64),
    velocity: (f64, f64),
    color: [f32; 3],
}

#[derive(Debug, Clone)]
struct Scene {
    background: [f32; 3],
    layers: Vec<Layer>,
}

/// Texture of `class` in `{-1, +1}` at shape-relative position `(u, v)`.
fn pattern(class: u8, u: f64, v: f64) -> f64 {
    let sq = |x: f64, period: f64| if x.rem_euclid(period) < period / 2.0 { 1.0 } else { -1.0 };
    match class {
        0 => sq(u, 6.0),
        1 => sq(v, 5.0),
        2 => sq(u, 4.0) * sq(v, 4.0),
        3 => sq(u + v, 7.0),
        4 => {
            if u.rem_euclid(5.0) < 2.0 && v.rem_euclid(5.0) < 2.0 {
                1.0
            } else {
                -1.0
            }
        }
        5 => sq(u - v, 6.0),
        6 => sq((u * u + v * v).sqrt(), 6.0),
        _ => sq(u, 3.0) * sq(v, 9.0),
    }
}

fn jitter_color<R: Rng>(base: [f32; 3], amount: f64, rng: &mut R) -> [f32; 3] {
    if amount <= 0.0 {
        return base;
    }
    base.map(|c| (c as f64 + rng.random_range(-amount..=amount)).clamp(0.0, 1.0) as f32)
}

fn sample_scene<R: Rng>(cfg: &SyntheticConfig, max_speed: f64, rng: &mut R) -> Scene {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let side = h.min(w);
    let mut classes: Vec<u8> = (1..cfg.num_classes as u8).filter(|_| rng.random_bool(cfg.presence)).collect();
    classes.shuffle(rng);
    let layers = classes
        .into_iter()
        .map(|class| {
            let a = rng.random_range(0.12..0.24) * side;
            let b = rng.random_range(0.12..0.24) * side;
            let shape = match rng.random_range(0..3) {
                0 => Shape::Ellipse { ry: a, rx: b },
                1 => Shape::Rect { hy: a * 0.85, hx: b * 0.85 },
                _ => Shape::Triangle { r: a.max(b) * 1.2, up: rng.random_bool(0.5) },
            };
            let center = (rng.random_range(0.15..0.85) * h, rng.random_range(0.15..0.85) * w);
            let velocity = if max_speed > 0.0 {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let speed = rng.random_range(0.3..=1.0) * max_speed;
                (speed * angle.sin(), speed * angle.cos())
            } else {
                (0.0, 0.0)
            };
            let color = jitter_color(PALETTE[class as usize], cfg.noise * 0.5, rng);
            Layer { class, shape, center, velocity, color }
        })
        .collect();
    Scene { background: jitter_color(PALETTE[0], cfg.noise * 0.5, rng), layers }
}

fn label_map(scene: &Scene, h: usize, w: usize, t: f64) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        scene
            .layers
            .iter()
            .rev()
            .find(|l| l.shape.contains(py - l.center.0 - l.velocity.0 * t, px - l.center.1 - l.velocity.1 * t))
            .map_or(0, |l| l.class)
    })
}

/// Moves fully covered layers to the top so every drawn class is visible.
fn ensure_visible(scene: &mut Scene, h: usize, w: usize) {
    for _ in 0..scene.layers.len() {
        let labels = label_map(scene, h, w, 0.0);
        let mut seen = [false; 256];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        match scene.layers.iter().position(|l| !seen[l.class as usize]) {
            Some(i) => {
                let layer = scene.layers.remove(i);
                scene.layers.push(layer);
            }
            None => break,
        }
    }
}

fn render<R: Rng>(scene: &Scene, cfg: &SyntheticConfig, t: f64, rng: &mut R) -> (Array3<f32>, Array2<u8>) {
    let (h, w) = (cfg.height, cfg.width);
    let labels = label_map(scene, h, w, t);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite std");
    let mut image = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]];
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let (color, u, v) = match scene.layers.iter().find(|layer| layer.class == l && l != 0) {
                Some(layer) => (
                    layer.color,
                    py - layer.center.0 - layer.velocity.0 * t,
                    px - layer.center.1 - layer.velocity.1 * t,
                ),
                None => (scene.background, py, px),
            };
            let shade = 1.0 + cfg.texture * pattern(l, u, v);
            for c in 0..3 {
                let mut value = color[c] as f64 * shade;
                if cfg.noise > 0.0 {
                    value += noise.sample(rng);
                }
                image[[c, y, x]] = value.clamp(0.0, 1.0) as f32;
            }
        }
    }
    (image, labels)
}

/// Deterministic image set for `split`. Train and validation images come
/// from disjoint seed streams.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig, split: Split) -> Result<Vec<SegmentationSample>> {
    cfg.validate()?;
    let count = match split {
        Split::Train => cfg.train_images,
        Split::Val => cfg.val_images,
    };
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, cfg.stream(split, i)));
            let mut scene = sample_scene(cfg, 0.0, &mut rng);
            ensure_visible(&mut scene, cfg.height, cfg.width);
            let (image, labels) = render(&scene, cfg, 0.0, &mut rng);
            let prefix = match split {
                Split::Train => "train",
                Split::Val => "val",
            };
            SegmentationSample { id: format!("{prefix}_{i:05}"), image, labels }
        })
        .collect())
}

/// Deterministic clips of shapes moving at constant velocity. Each frame
/// gets fresh noise; labels are those of the last frame.
pub fn generate_synthetic_video(cfg: &SyntheticConfig, video: &VideoConfig, split: Split) -> Result<Vec<VideoClip>> {
    cfg.validate()?;
    if video.frames == 0 {
        return Err(Error::Config("clips need at least one frame".into()));
    }
    let count = match split {
        Split::Train => video.train_clips,
        Split::Val => video.val_clips,
    };
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0x76_6964_656f, cfg.stream(split, i)));
            let mut scene = sample_scene(cfg, video.max_speed, &mut rng);
            let last = (video.frames - 1) as f64;
            // Visibility is enforced on the labelled frame.
            for layer in &mut scene.layers {
                layer.center.0 += layer.velocity.0 * last;
                layer.center.1 += layer.velocity.1 * last;
            }
            ensure_visible(&mut scene, cfg.height, cfg.width);
            let mut frames = Vec::with_capacity(video.frames);
            let mut labels = None;
            for f in 0..video.frames {
                let (img, lab) = render(&scene, cfg, f as f64 - last, &mut rng);
                frames.push(img);
                labels = Some(lab);
            }
            let prefix = match split {
                Split::Train => "train",
                Split::Val => "val",
            };
            VideoClip { id: format!("{prefix}_clip_{i:05}"), frames, labels: labels.expect("one frame") }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig { height: 32, width: 32, train_images: 40, val_images: 8, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_dataset(&small(), Split::Train).unwrap();
        let b = generate_synthetic_dataset(&small(), Split::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_are_disjoint() {
        let cfg = small();
        let train = generate_synthetic_dataset(&cfg, Split::Train).unwrap();
        let val = generate_synthetic_dataset(&cfg, Split::Val).unwrap();
        assert!(val.iter().all(|v| train.iter().all(|t| t.image != v.image)));
    }

    #[test]
    fn palette_bound_is_enforced() {
        let cfg = SyntheticConfig { num_classes: 9, ..small() };
        assert!(matches!(
            generate_synthetic_dataset(&cfg, Split::Train),
            Err(Error::PaletteExhausted { requested: 9, available: 8 })
        ));
    }

    #[test]
    fn every_class_is_frequent() {
        let cfg = SyntheticConfig { train_images: 60, ..small() };
        let data = generate_synthetic_dataset(&cfg, Split::Train).unwrap();
        for c in 0..cfg.num_classes as u8 {
            let n = data.iter().filter(|s| s.labels.iter().any(|&l| l == c)).count();
            assert!(n as f64 >= 0.8 * data.len() as f64, "class {c} in {n}/{}", data.len());
        }
    }

    #[test]
    fn images_stay_in_unit_range() {
        for s in generate_synthetic_dataset(&small(), Split::Val).unwrap() {
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.labels.iter().all(|&l| (l as usize) < 6));
        }
    }

    #[test]
    fn video_labels_follow_the_motion() {
        let cfg = small();
        let video = VideoConfig { frames: 4, max_speed: 2.0, train_clips: 3, val_clips: 0 };
        let clips = generate_synthetic_video(&cfg, &video, Split::Train).unwrap();
        assert_eq!(clips.len(), 3);
        for clip in &clips {
            assert_eq!(clip.frames.len(), 4);
            assert_ne!(clip.frames[0], clip.frames[3]);
        }
        assert_eq!(clips, generate_synthetic_video(&cfg, &video, Split::Train).unwrap());
    }
}
