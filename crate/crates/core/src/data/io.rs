//! PNG datasets with JSON manifests.
//!
//! ```text
//! root/
//!   manifest.json          {"num_classes", "ignore_index", "samples": [{"id", "image", "label"}]}
//!   images/<id>.png        RGB8
//!   labels/<id>.png        L8, one class id per pixel
//! ```
//!
//! Clip manifests list the frame paths oldest first and one label path for
//! the last frame. Paths are relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{SegmentationSample, VideoClip};
use crate::error::{Error, Result};
use crate::memory_bank::validate_labels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub ignore_index: u8,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub id: String,
    pub frames: Vec<PathBuf>,
    pub label: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub num_classes: usize,
    pub ignore_index: u8,
    pub clips: Vec<ClipEntry>,
}

fn to_rgb(image: &Array3<f32>) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn from_rgb(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

fn to_gray(labels: &Array2<u8>) -> GrayImage {
    let (h, w) = labels.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([labels[[y as usize, x as usize]]]))
}

fn from_gray(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0])
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::file(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::file(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    Ok(from_rgb(&image::open(path)?.to_rgb8()))
}

fn load_labels(path: &Path, num_classes: usize, ignore_index: u8) -> Result<Array2<u8>> {
    let labels = from_gray(&image::open(path)?.to_luma8());
    validate_labels(&labels.clone().insert_axis(ndarray::Axis(0)), num_classes, ignore_index)?;
    Ok(labels)
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Writes `samples` under `root` and returns the manifest path.
pub fn save_dataset(root: &Path, samples: &[SegmentationSample], num_classes: usize, ignore_index: u8) -> Result<PathBuf> {
    create_dir(&root.join("images"))?;
    create_dir(&root.join("labels"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = PathBuf::from("images").join(format!("{}.png", s.id));
        let label = PathBuf::from("labels").join(format!("{}.png", s.id));
        to_rgb(&s.image).save(root.join(&image))?;
        to_gray(&s.labels).save(root.join(&label))?;
        entries.push(SampleEntry { id: s.id.clone(), image, label });
    }
    let path = root.join("manifest.json");
    write_json(&path, &DatasetManifest { num_classes, ignore_index, samples: entries })?;
    Ok(path)
}

pub fn load_dataset(manifest: &Path) -> Result<(DatasetManifest, Vec<SegmentationSample>)> {
    let m: DatasetManifest = read_json(manifest)?;
    let base = base_dir(manifest);
    let samples = m
        .samples
        .iter()
        .map(|e| {
            let image = load_rgb(&base.join(&e.image))?;
            let labels = load_labels(&base.join(&e.label), m.num_classes, m.ignore_index)?;
            if image.dim().1 != labels.dim().0 || image.dim().2 != labels.dim().1 {
                return Err(Error::Shape(format!("{}: image and label sizes differ", e.id)));
            }
            Ok(SegmentationSample { id: e.id.clone(), image, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m, samples))
}

pub fn save_clips(root: &Path, clips: &[VideoClip], num_classes: usize, ignore_index: u8) -> Result<PathBuf> {
    create_dir(&root.join("frames"))?;
    create_dir(&root.join("labels"))?;
    let mut entries = Vec::with_capacity(clips.len());
    for clip in clips {
        let mut frames = Vec::with_capacity(clip.frames.len());
        for (i, f) in clip.frames.iter().enumerate() {
            let path = PathBuf::from("frames").join(format!("{}_{i:03}.png", clip.id));
            to_rgb(f).save(root.join(&path))?;
            frames.push(path);
        }
        let label = PathBuf::from("labels").join(format!("{}.png", clip.id));
        to_gray(&clip.labels).save(root.join(&label))?;
        entries.push(ClipEntry { id: clip.id.clone(), frames, label });
    }
    let path = root.join("clips.json");
    write_json(&path, &ClipManifest { num_classes, ignore_index, clips: entries })?;
    Ok(path)
}

pub fn load_clips(manifest: &Path) -> Result<(ClipManifest, Vec<VideoClip>)> {
    let m: ClipManifest = read_json(manifest)?;
    let base = base_dir(manifest);
    let clips = m
        .clips
        .iter()
        .map(|e| {
            if e.frames.is_empty() {
                return Err(Error::Config(format!("clip {} has no frames", e.id)));
            }
            let frames = e.frames.iter().map(|f| load_rgb(&base.join(f))).collect::<Result<Vec<_>>>()?;
            let labels = load_labels(&base.join(&e.label), m.num_classes, m.ignore_index)?;
            Ok(VideoClip { id: e.id.clone(), frames, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m, clips))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, generate_synthetic_video, Split, SyntheticConfig, VideoConfig};

    fn quantized(image: &Array3<f32>) -> Array3<f32> {
        image.mapv(|v| (v * 255.0).round() / 255.0)
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { height: 16, width: 24, train_images: 3, ..Default::default() };
        let samples = generate_synthetic_dataset(&cfg, Split::Train).unwrap();
        let manifest = save_dataset(dir.path(), &samples, 6, 255).unwrap();
        let (m, loaded) = load_dataset(&manifest).unwrap();
        assert_eq!(m.num_classes, 6);
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(quantized(&a.image), b.image);
        }
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let sample = SegmentationSample {
            id: "bad".into(),
            image: Array3::zeros((3, 4, 4)),
            labels: Array2::from_elem((4, 4), 7u8),
        };
        let manifest = save_dataset(dir.path(), &[sample], 3, 255).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::InvalidLabel { label: 7, .. })));
    }

    #[test]
    fn clip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { height: 16, width: 16, ..Default::default() };
        let video = VideoConfig { frames: 3, train_clips: 2, ..Default::default() };
        let clips = generate_synthetic_video(&cfg, &video, Split::Train).unwrap();
        let manifest = save_clips(dir.path(), &clips, 6, 255).unwrap();
        let (_, loaded) = load_clips(&manifest).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[1].frames.len(), 3);
        assert_eq!(loaded[1].labels, clips[1].labels);
    }

    #[test]
    fn missing_manifest_names_the_path() {
        let err = load_dataset(Path::new("/nonexistent/manifest.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/manifest.json"));
    }
}
