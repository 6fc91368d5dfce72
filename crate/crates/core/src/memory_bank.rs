//! Per-class distribution memory.
//!
//! The bank keeps one `(mean, std)` pair per class, describing the channel
//! distribution of that class's average pixel representation. It is updated by
//! an exponential moving average after each optimizer step and is never
//! touched by gradients. Dataset-level category representations are drawn
//! from it by sampling every channel from the stored Gaussian.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Array4};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::backbone::OUTPUT_STRIDE;
use crate::segmentor::upsample_logits;
use crate::tensor::Real;

pub const DEFAULT_EPSILON_STD: f64 = 1e-4;
pub const DEFAULT_IGNORE_INDEX: u8 = 255;

/// Mean and standard deviation stored for an absent, never-seen class.
pub const UNINITIALIZED_STATS: [f64; 2] = [0.0, 1.0];

/// How category representations are produced from the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Gaussian draws with an explicit seed.
    #[default]
    Random,
    /// Class means, no randomness.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    /// Row `c` is `[mean, std]` of class `c`.
    stats: Vec<[f64; 2]>,
    momentum: f64,
    feature_dim: usize,
    initialized: Vec<bool>,
    epsilon_std: f64,
}

/// Distribution summary of every class present in one batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassStats {
    pub per_class: BTreeMap<usize, [f64; 2]>,
}

impl ClassStats {
    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.keys().copied()
    }

    pub fn get(&self, class: usize) -> Option<[f64; 2]> {
        self.per_class.get(&class).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }
}

/// A `K × Z` matrix of category representations, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLevelReps {
    pub data: Array2<f64>,
    /// Seed the rows were drawn with; `None` for the deterministic mean rows.
    pub seed: Option<u64>,
}

impl DatasetLevelReps {
    pub fn num_classes(&self) -> usize {
        self.data.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_real<T: Real>(&self) -> Array2<T> {
        self.data.mapv(T::of)
    }
}

impl MemoryBank {
    /// A bank with every class at the uninitialized default.
    pub fn new(num_classes: usize, feature_dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
        }
        if num_classes == 0 || feature_dim == 0 {
            return Err(Error::Config("memory bank needs K ≥ 1 and Z ≥ 1".into()));
        }
        Ok(Self {
            stats: vec![UNINITIALIZED_STATS; num_classes],
            momentum,
            feature_dim,
            initialized: vec![false; num_classes],
            epsilon_std: DEFAULT_EPSILON_STD,
        })
    }

    pub fn with_epsilon_std(mut self, epsilon_std: f64) -> Self {
        self.epsilon_std = epsilon_std;
        self
    }

    /// Builds a bank from explicit rows. Used when restoring checkpoints.
    pub fn from_parts(
        stats: Vec<[f64; 2]>,
        initialized: Vec<bool>,
        feature_dim: usize,
        momentum: f64,
        epsilon_std: f64,
    ) -> Result<Self> {
        if stats.len() != initialized.len() {
            return Err(Error::Shape(format!(
                "{} stat rows but {} mask entries",
                stats.len(),
                initialized.len()
            )));
        }
        if stats.iter().any(|r| !r[0].is_finite() || !r[1].is_finite() || r[1] < 0.0) {
            return Err(Error::Config("bank rows must be finite with std ≥ 0".into()));
        }
        let mut bank = Self::new(stats.len(), feature_dim, momentum)?;
        bank.stats = stats;
        bank.initialized = initialized;
        bank.epsilon_std = epsilon_std;
        Ok(bank)
    }

    /// Initializes every class present in `labels` from one randomly chosen
    /// pixel representation of that class. Absent classes keep the
    /// `(0, 1)` default with their mask bit cleared.
    pub fn init_from_sample<T: Real>(
        features: &Array4<T>,
        labels: &Array3<u8>,
        num_classes: usize,
        momentum: f64,
        ignore_index: u8,
        seed: u64,
    ) -> Result<Self> {
        let mut bank = Self::new(num_classes, features.dim().1, momentum)?;
        bank.init_missing_from_sample(features, labels, ignore_index, seed)?;
        Ok(bank)
    }

    /// Same as [`MemoryBank::init_from_sample`] but only touches classes that
    /// are still uninitialized; repeated calls over a dataset act as a
    /// pre-scan.
    pub fn init_missing_from_sample<T: Real>(
        &mut self,
        features: &Array4<T>,
        labels: &Array3<u8>,
        ignore_index: u8,
        seed: u64,
    ) -> Result<()> {
        let k = self.num_classes();
        validate_labels(labels, k, ignore_index)?;
        let full = upsample_to_labels(features, labels)?;
        let mut positions: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); k];
        for ((b, y, x), &l) in labels.indexed_iter() {
            if l != ignore_index {
                positions[l as usize].push((b, y, x));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (class, pixels) in positions.iter().enumerate() {
            let Some(&(b, y, x)) = pixels.choose(&mut rng) else {
                continue;
            };
            if self.initialized[class] {
                continue;
            }
            let vector: Vec<f64> = full.slice(s![b, .., y, x]).iter().map(|v| v.as_f64()).collect();
            self.stats[class] = channel_mean_std(&vector);
            self.initialized[class] = true;
        }
        Ok(())
    }

    /// Moving-average update with the batch statistics.
    ///
    /// Present classes become `(1 − m)·old + m·batch`; a class seen for the
    /// first time is replaced by its batch statistics. Absent classes are
    /// left untouched.
    pub fn ema_update(&mut self, batch: &ClassStats) {
        let m = self.momentum;
        for (&class, new) in &batch.per_class {
            assert!(class < self.num_classes(), "class {class} outside the bank");
            if self.initialized[class] {
                let old = self.stats[class];
                self.stats[class] = [(1.0 - m) * old[0] + m * new[0], (1.0 - m) * old[1] + m * new[1]];
            } else {
                self.stats[class] = *new;
                self.initialized[class] = true;
            }
        }
    }

    /// Draws one representation per class, each channel i.i.d. from
    /// `Normal(mean, max(std, epsilon_std))`.
    pub fn sample_representations(&self, seed: u64) -> DatasetLevelReps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = self.feature_dim;
        let mut data = Array2::zeros((self.num_classes(), z));
        for (c, row) in self.stats.iter().enumerate() {
            let std = row[1].max(self.epsilon_std);
            for j in 0..z {
                let eps: f64 = StandardNormal.sample(&mut rng);
                data[[c, j]] = row[0] + std * eps;
            }
        }
        DatasetLevelReps { data, seed: Some(seed) }
    }

    /// Deterministic alternative to sampling: row `c` is the class mean
    /// repeated over all channels.
    pub fn mean_representations(&self) -> DatasetLevelReps {
        let data = Array2::from_shape_fn((self.num_classes(), self.feature_dim), |(c, _)| {
            self.stats[c][0]
        });
        DatasetLevelReps { data, seed: None }
    }

    pub fn representations(&self, sampling: Sampling, seed: u64) -> DatasetLevelReps {
        match sampling {
            Sampling::Random => self.sample_representations(seed),
            Sampling::Mean => self.mean_representations(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.stats.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn epsilon_std(&self) -> f64 {
        self.epsilon_std
    }

    pub fn rows(&self) -> &[[f64; 2]] {
        &self.stats
    }

    pub fn initialized_mask(&self) -> &[bool] {
        &self.initialized
    }

    /// The `K × 2` stats table.
    pub fn stats(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.num_classes(), 2), |(c, j)| self.stats[c][j])
    }

    /// Plain-text table, one class per line.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "# K={} Z={} momentum={} epsilon_std={}\nclass\tmean\tstd\tinitialized\n",
            self.num_classes(),
            self.feature_dim,
            self.momentum,
            self.epsilon_std
        );
        for (c, row) in self.stats.iter().enumerate() {
            out.push_str(&format!("{c}\t{:e}\t{:e}\t{}\n", row[0], row[1], self.initialized[c]));
        }
        out
    }
}

/// Mean and population standard deviation over the entries of one vector.
pub fn channel_mean_std(v: &[f64]) -> [f64; 2] {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    [mean, var.sqrt()]
}

pub(crate) fn validate_labels(labels: &Array3<u8>, num_classes: usize, ignore_index: u8) -> Result<()> {
    if let Some(&label) = labels
        .iter()
        .find(|&&l| l != ignore_index && l as usize >= num_classes)
    {
        return Err(Error::InvalidLabel { label, num_classes });
    }
    Ok(())
}

/// Bilinearly upsamples stride-8 features by 8 and crops to the label
/// resolution. Features already at the label resolution pass through.
fn upsample_to_labels<T: Real>(features: &Array4<T>, labels: &Array3<u8>) -> Result<Array4<T>> {
    let (fb, _, h, w) = features.dim();
    let (lb, lh, lw) = labels.dim();
    if fb != lb {
        return Err(Error::Shape(format!("{fb} feature maps but {lb} label maps")));
    }
    if (h, w) == (lh, lw) {
        return Ok(features.clone());
    }
    if (h, w) != (lh.div_ceil(OUTPUT_STRIDE), lw.div_ceil(OUTPUT_STRIDE)) {
        return Err(Error::Shape(format!(
            "features {h}x{w} cannot be aligned with labels {lh}x{lw}"
        )));
    }
    Ok(upsample_logits(features, lh, lw))
}

/// Per-class average pixel representation and pixel count.
pub fn class_mean_vectors<T: Real>(
    features: &Array4<T>,
    labels: &Array3<u8>,
    num_classes: usize,
    ignore_index: u8,
) -> Result<BTreeMap<usize, (Vec<f64>, usize)>> {
    validate_labels(labels, num_classes, ignore_index)?;
    let full = upsample_to_labels(features, labels)?;
    let (b, z, h, w) = full.dim();
    let mut counts = vec![0usize; num_classes];
    for &l in labels.iter() {
        if l != ignore_index {
            counts[l as usize] += 1;
        }
    }
    let mut sums = vec![vec![0.0f64; z]; num_classes];
    for bi in 0..b {
        for zi in 0..z {
            let plane = full.slice(s![bi, zi, .., ..]);
            let lab = labels.slice(s![bi, .., ..]);
            for y in 0..h {
                for x in 0..w {
                    let l = lab[[y, x]];
                    if l != ignore_index {
                        sums[l as usize][zi] += plane[[y, x]].as_f64();
                    }
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    for (c, (sum, &n)) in sums.into_iter().zip(&counts).enumerate() {
        if n > 0 {
            let mean: Vec<f64> = sum.into_iter().map(|s| s / n as f64).collect();
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    iteration: 0,
                    detail: format!("class {c} representation is not finite"),
                });
            }
            out.insert(c, (mean, n));
        }
    }
    Ok(out)
}

/// Ground-truth masked distribution statistics of a batch.
///
/// Features are upsampled to the label resolution, pixels are grouped by
/// label (ignored pixels dropped), each group is averaged into one
/// `Z`-vector, and that vector is summarized by its channel mean and
/// population standard deviation.
pub fn compute_class_stats<T: Real>(
    features: &Array4<T>,
    labels: &Array3<u8>,
    num_classes: usize,
    ignore_index: u8,
) -> Result<ClassStats> {
    let means = class_mean_vectors(features, labels, num_classes, ignore_index)?;
    Ok(ClassStats {
        per_class: means
            .into_iter()
            .map(|(c, (v, _))| (c, channel_mean_std(&v)))
            .collect(),
    })
}

/// Baseline memory that stores one full representation per class instead of
/// distribution parameters. Only used for ablation comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMemory {
    reps: Array2<f64>,
    momentum: f64,
    initialized: Vec<bool>,
}

impl RepresentationMemory {
    pub fn new(num_classes: usize, feature_dim: usize, momentum: f64) -> Self {
        Self {
            reps: Array2::zeros((num_classes, feature_dim)),
            momentum,
            initialized: vec![false; num_classes],
        }
    }

    pub fn update<T: Real>(
        &mut self,
        features: &Array4<T>,
        labels: &Array3<u8>,
        ignore_index: u8,
    ) -> Result<()> {
        let k = self.reps.nrows();
        let m = self.momentum;
        for (c, (mean, _)) in class_mean_vectors(features, labels, k, ignore_index)? {
            let mut row = self.reps.row_mut(c);
            for (dst, v) in row.iter_mut().zip(mean) {
                *dst = if self.initialized[c] { (1.0 - m) * *dst + m * v } else { v };
            }
            self.initialized[c] = true;
        }
        Ok(())
    }

    pub fn representations(&self) -> DatasetLevelReps {
        DatasetLevelReps { data: self.reps.clone(), seed: None }
    }
}
