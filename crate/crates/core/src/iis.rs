//! Coarse-to-fine iterative inference.
//!
//! Stage 1 is a plain forward pass. Every later stage averages the previous
//! stage's stride-8 class probabilities with the predicted aggregation
//! weights and re-runs aggregation, recalibration, fusion and the head. All
//! stages share one draw of the category representations.

use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::backbone::OUTPUT_STRIDE;
use crate::error::{Error, Result};
use crate::memory_bank::{MemoryBank, Sampling};
use crate::segmentor::{upsample_logits, Segmentor};
use crate::tensor::{downsample_labels_nearest, one_hot_or_uniform, softmax_channels, Real};

pub const DEFAULT_STAGES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IisConfig {
    pub stages: usize,
}

impl Default for IisConfig {
    fn default() -> Self {
        Self { stages: DEFAULT_STAGES }
    }
}

impl IisConfig {
    pub fn new(stages: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::Config("iterative inference needs at least one stage".into()));
        }
        Ok(Self { stages })
    }
}

/// `(prev + base) / 2`, element-wise.
pub fn refine_weights<T: Real>(prev: &Array4<T>, base: &Array4<T>) -> Array4<T> {
    assert_eq!(prev.dim(), base.dim(), "refine_weights operands differ in shape");
    let half = T::of(0.5);
    (prev + base) * half
}

#[derive(Debug, Clone)]
pub struct StageOutput<T> {
    pub stage: usize,
    /// Full-resolution class probabilities.
    pub probs: Array4<T>,
    /// Aggregation weights this stage consumed.
    pub weights: Option<Array4<T>>,
    /// Wall time from the start of the run to the end of this stage.
    pub elapsed: Duration,
    /// The category representations this stage read.
    pub reps: Option<Arc<Array2<T>>>,
}

#[derive(Debug, Clone)]
pub struct IisOutput<T> {
    pub stages: Vec<StageOutput<T>>,
}

impl<T> IisOutput<T> {
    pub fn last(&self) -> &StageOutput<T> {
        self.stages.last().expect("at least one stage")
    }
}

/// Runs `config.stages` stages on `frames` (current frame first) with
/// explicit category representations.
pub fn run_iis_with_reps<T: Real>(
    model: &Segmentor<T>,
    frames: &[Array4<T>],
    reps: Option<Arc<Array2<T>>>,
    config: IisConfig,
) -> Result<IisOutput<T>> {
    IisConfig::new(config.stages)?;
    let start = Instant::now();
    let (enc, _) = model.encode(frames, reps.as_deref())?;
    let (h, w) = enc.input_size;
    let mut stages = Vec::with_capacity(config.stages);
    let mut weights = enc.weights.clone();
    for stage in 1..=config.stages {
        let (logits, _) = model.decode(&enc, weights.as_ref(), reps.as_deref());
        stages.push(StageOutput {
            stage,
            probs: softmax_channels(&upsample_logits(&logits, h, w)),
            weights: weights.clone(),
            elapsed: start.elapsed(),
            reps: reps.clone(),
        });
        if let Some(base) = &enc.weights {
            weights = Some(refine_weights(&softmax_channels(&logits), base));
        }
    }
    Ok(IisOutput { stages })
}

/// Draws the representations once from `bank` and runs all stages.
pub fn run_iis<T: Real>(
    model: &Segmentor<T>,
    frames: &[Array4<T>],
    bank: &MemoryBank,
    sampling: Sampling,
    seed: u64,
    config: IisConfig,
) -> Result<IisOutput<T>> {
    model.check_bank(bank)?;
    let reps = model
        .has_dataset_context()
        .then(|| Arc::new(bank.representations(sampling, seed).as_real::<T>()));
    run_iis_with_reps(model, frames, reps, config)
}

/// Aggregation weights taken from the ground truth: the label map sampled at
/// stride 8 by nearest neighbour, one-hot, with ignored pixels uniform.
pub fn gt_weights<T: Real>(labels: &Array3<u8>, num_classes: usize, ignore_index: u8) -> Array4<T> {
    let (_, h, w) = labels.dim();
    let (sh, sw) = (h.div_ceil(OUTPUT_STRIDE), w.div_ceil(OUTPUT_STRIDE));
    let small = downsample_labels_nearest(labels, sh, sw);
    one_hot_or_uniform(&small, num_classes, ignore_index)
}

/// Full-resolution probabilities obtained by aggregating with
/// ground-truth weights instead of predicted ones. Evaluation-only.
pub fn gt_weight_oracle<T: Real>(
    model: &Segmentor<T>,
    frames: &[Array4<T>],
    labels: &Array3<u8>,
    reps: &Array2<T>,
    ignore_index: u8,
) -> Result<Array4<T>> {
    if !model.has_dataset_context() {
        return Err(Error::Config("ground-truth weights need the dataset-level context path".into()));
    }
    let (enc, _) = model.encode(frames, Some(reps))?;
    let weights = gt_weights::<T>(labels, model.num_classes(), ignore_index);
    let expected = enc.weights.as_ref().expect("weights").dim();
    if weights.dim() != expected {
        return Err(Error::Shape(format!("labels give weights {:?}, model expects {expected:?}", weights.dim())));
    }
    let (logits, _) = model.decode(&enc, Some(&weights), Some(reps));
    let (h, w) = enc.input_size;
    Ok(softmax_channels(&upsample_logits(&logits, h, w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::context::WithinImageContext;
    use crate::fusion::FusionKind;
    use crate::segmentor::{ModelConfig, TemporalVariant};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Segmentor<f64> {
        let config = ModelConfig {
            num_classes: 3,
            backbone: BackboneConfig { widths: [4, 8], depth: 1, feature_dim: 8 },
            within_image: WithinImageContext::PyramidPooling,
            dataset_context: true,
            fusion: FusionKind::Concatenation,
            history: 0,
            temporal: TemporalVariant::DatasetContext,
        };
        Segmentor::new(config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn bank() -> MemoryBank {
        MemoryBank::from_parts(vec![[0.1, 0.2], [0.5, 0.1], [-0.2, 0.3]], vec![true; 3], 8, 0.1, 1e-4).unwrap()
    }

    fn image() -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Array4::from_shape_fn((1, 3, 24, 24), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn refine_is_idempotent_and_symmetric() {
        let w = softmax_channels(&Array4::from_shape_fn((1, 3, 2, 2), |(_, c, y, x)| (c * y + x) as f64));
        assert_eq!(refine_weights(&w, &w), w);
        let a = one_hot_or_uniform::<f64>(&Array3::zeros((1, 1, 1)), 2, 255);
        let b = one_hot_or_uniform::<f64>(&Array3::ones((1, 1, 1)), 2, 255);
        let r = refine_weights(&a, &b);
        assert_eq!(r.iter().copied().collect::<Vec<_>>(), vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn refine_stays_on_the_simplex(a in proptest::collection::vec(-5.0f64..5.0, 12), b in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let pa = softmax_channels(&Array4::from_shape_vec((1, 3, 2, 2), a).unwrap());
            let pb = softmax_channels(&Array4::from_shape_vec((1, 3, 2, 2), b).unwrap());
            let r = refine_weights(&pa, &pb);
            for y in 0..2 {
                for x in 0..2 {
                    let s: f64 = (0..3).map(|c| r[[0, c, y, x]]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_stages_is_a_config_error() {
        let m = model();
        let err = run_iis(&m, &[image()], &bank(), Sampling::Random, 0, IisConfig { stages: 0 });
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn one_stage_equals_plain_forward() {
        let m = model();
        let out = run_iis(&m, &[image()], &bank(), Sampling::Random, 7, IisConfig { stages: 1 }).unwrap();
        let plain = m.forward(&image(), &bank(), 7).unwrap();
        assert_eq!(out.last().probs, plain.probs);
    }

    #[test]
    fn stages_share_one_representation_draw() {
        let m = model();
        let out = run_iis(&m, &[image()], &bank(), Sampling::Random, 7, IisConfig { stages: 3 }).unwrap();
        let first = out.stages[0].reps.as_ref().unwrap();
        assert!(out.stages.iter().all(|s| Arc::ptr_eq(s.reps.as_ref().unwrap(), first)));
        assert!(out.stages.windows(2).all(|p| p[0].elapsed < p[1].elapsed));
    }

    #[test]
    fn iis_is_deterministic() {
        let m = model();
        let a = run_iis(&m, &[image()], &bank(), Sampling::Random, 3, IisConfig { stages: 2 }).unwrap();
        let b = run_iis(&m, &[image()], &bank(), Sampling::Random, 3, IisConfig { stages: 2 }).unwrap();
        assert_eq!(a.last().probs, b.last().probs);
    }

    #[test]
    fn gt_weights_select_and_fall_back_to_uniform() {
        let labels = Array3::from_elem((1, 16, 16), 2u8);
        let w = gt_weights::<f64>(&labels, 3, 255);
        assert_eq!(w.dim(), (1, 3, 2, 2));
        assert!(w.index_axis(ndarray::Axis(1), 2).iter().all(|&v| v == 1.0));
        let ignored = Array3::from_elem((1, 16, 16), 255u8);
        assert!(gt_weights::<f64>(&ignored, 4, 255).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_class_gt_aggregates_that_row() {
        let reps = bank().sample_representations(5).as_real::<f64>();
        let labels = Array3::from_elem((1, 24, 24), 1u8);
        let w = gt_weights::<f64>(&labels, 3, 255);
        let coarse = crate::dca::aggregate_coarse(&w, &reps);
        for y in 0..3 {
            for x in 0..3 {
                for z in 0..8 {
                    assert_eq!(coarse[[0, z, y, x]], reps[[1, z]]);
                }
            }
        }
        let probs = gt_weight_oracle(&model(), &[image()], &labels, &reps, 255).unwrap();
        assert_eq!(probs.dim(), (1, 3, 24, 24));
    }
}
