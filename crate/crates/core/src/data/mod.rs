//! Samples, clips, batching, synthetic generators and on-disk datasets.

mod io;
mod synthetic;

pub use io::{load_clips, load_dataset, save_clips, save_dataset, ClipManifest, DatasetManifest};
pub use synthetic::{
    generate_synthetic_dataset, generate_synthetic_video, Split, SyntheticConfig, VideoConfig, PALETTE,
};

use ndarray::{s, Array2, Array3, Array4};

use crate::error::{Error, Result};
use crate::train::Batch;

/// An RGB image in `[0, 1]` (`[3, H, W]`) with its label map (`[H, W]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Array3<f32>,
    pub labels: Array2<u8>,
}

impl SegmentationSample {
    pub fn size(&self) -> (usize, usize) {
        self.labels.dim()
    }
}

/// Frames ordered oldest to newest; `labels` belong to the newest frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub frames: Vec<Array3<f32>>,
    pub labels: Array2<u8>,
}

/// Frames for a model with `history` historical frames: current frame
/// first, then the historical ones nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryFrames {
    pub frames: Vec<Array3<f32>>,
    /// The clip was shorter than `history + 1` and its earliest frame was
    /// repeated.
    pub padded: bool,
}

impl VideoClip {
    pub fn current(&self) -> &Array3<f32> {
        self.frames.last().expect("clip has frames")
    }

    pub fn with_history(&self, history: usize) -> HistoryFrames {
        let n = self.frames.len();
        let frames = (0..=history)
            .map(|i| self.frames[n.saturating_sub(1 + i)].clone())
            .collect();
        HistoryFrames { frames, padded: n < history + 1 }
    }

    /// The newest frame as a still sample.
    pub fn as_sample(&self) -> SegmentationSample {
        SegmentationSample { id: self.id.clone(), image: self.current().clone(), labels: self.labels.clone() }
    }
}

fn stack_images(images: &[&Array3<f32>]) -> Result<Array4<f32>> {
    let dim = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?.dim();
    if images.iter().any(|i| i.dim() != dim) {
        return Err(Error::Shape("batch images differ in size".into()));
    }
    let mut out = Array4::zeros((images.len(), dim.0, dim.1, dim.2));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(img);
    }
    Ok(out)
}

fn stack_labels(labels: &[&Array2<u8>]) -> Result<Array3<u8>> {
    let dim = labels.first().ok_or_else(|| Error::Shape("empty batch".into()))?.dim();
    if labels.iter().any(|l| l.dim() != dim) {
        return Err(Error::Shape("batch label maps differ in size".into()));
    }
    let mut out = Array3::zeros((labels.len(), dim.0, dim.1));
    for (i, l) in labels.iter().enumerate() {
        out.slice_mut(s![i, .., ..]).assign(l);
    }
    Ok(out)
}

pub fn batch_from_samples(samples: &[&SegmentationSample]) -> Result<Batch<f32>> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<_> = samples.iter().map(|s| &s.labels).collect();
    Ok(Batch { frames: vec![stack_images(&images)?], labels: stack_labels(&labels)? })
}

/// Batch of clips for a model with `history` historical frames. Returns
/// the batch and whether any clip had to be padded.
pub fn batch_from_clips(clips: &[&VideoClip], history: usize) -> Result<(Batch<f32>, bool)> {
    let per_clip: Vec<_> = clips.iter().map(|c| c.with_history(history)).collect();
    let padded = per_clip.iter().any(|h| h.padded);
    let frames = (0..=history)
        .map(|i| stack_images(&per_clip.iter().map(|h| &h.frames[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<_> = clips.iter().map(|c| &c.labels).collect();
    Ok((Batch { frames, labels: stack_labels(&labels)? }, padded))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize) -> VideoClip {
        VideoClip {
            id: "c".into(),
            frames: (0..n).map(|i| Array3::from_elem((3, 8, 8), i as f32)).collect(),
            labels: Array2::zeros((8, 8)),
        }
    }

    #[test]
    fn history_is_nearest_first() {
        let h = clip(4).with_history(2);
        assert!(!h.padded);
        let firsts: Vec<f32> = h.frames.iter().map(|f| f[[0, 0, 0]]).collect();
        assert_eq!(firsts, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn short_clips_repeat_the_earliest_frame() {
        let h = clip(2).with_history(3);
        assert!(h.padded);
        let firsts: Vec<f32> = h.frames.iter().map(|f| f[[0, 0, 0]]).collect();
        assert_eq!(firsts, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn clip_batches_stack_per_offset() {
        let (a, b) = (clip(3), clip(3));
        let (batch, padded) = batch_from_clips(&[&a, &b], 2).unwrap();
        assert!(!padded);
        assert_eq!(batch.frames.len(), 3);
        assert_eq!(batch.frames[1].dim(), (2, 3, 8, 8));
        assert_eq!(batch.frames[1][[1, 0, 0, 0]], 1.0);
        assert_eq!(batch.labels.dim(), (2, 8, 8));
    }
}
