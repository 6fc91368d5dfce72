//! Experiment configuration in TOML.
//!
//! Every section rejects unknown keys. Missing keys take the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::context::WithinImageContext;
use crate::data::{SyntheticConfig, VideoConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::iis::DEFAULT_STAGES;
use crate::memory_bank::{Sampling, DEFAULT_EPSILON_STD, DEFAULT_IGNORE_INDEX};
use crate::optim::OptimizerConfig;
use crate::segmentor::{ModelConfig, TemporalVariant, DEFAULT_ALPHA};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_HISTORY: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub widths: [usize; 2],
    pub depth: usize,
    pub within_image: WithinImageContext,
    pub dataset_context: bool,
    pub fusion: FusionKind,
    /// Zero-initialize the context output projection so the dataset-level
    /// branch starts silent.
    pub zero_init_context: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            num_classes: 6,
            feature_dim: 64,
            widths: [16, 32],
            depth: 1,
            within_image: WithinImageContext::Identity,
            dataset_context: true,
            fusion: FusionKind::Concatenation,
            zero_init_context: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryInit {
    /// Rows start at `(0, 1)` and are replaced on their first observation.
    Lazy,
    /// One pass over the training set before the first step, one random
    /// pixel per class.
    Prescan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    pub momentum: f64,
    pub epsilon_std: f64,
    pub init: MemoryInit,
    /// Moving-average updates during training. Off keeps the initial bank.
    pub update: bool,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self { momentum: DEFAULT_MOMENTUM, epsilon_std: DEFAULT_EPSILON_STD, init: MemoryInit::Lazy, update: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha: f64,
    pub ignore_index: u8,
    /// Checkpoint period in iterations; 0 saves only the final state.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            seed: 0,
            alpha: DEFAULT_ALPHA,
            ignore_index: DEFAULT_IGNORE_INDEX,
            checkpoint_every: 500,
            log_every: 50,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub iis_stages: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self { iis_stages: DEFAULT_STAGES, sampling: Sampling::Random, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub texture: f64,
    pub presence: f64,
    pub train_images: usize,
    pub val_images: usize,
    pub seed: u64,
    /// Manifest paths, used when `source = "manifest"`. For video runs they
    /// point at clip manifests.
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            source: DataSource::Synthetic,
            height: s.height,
            width: s.width,
            noise: s.noise,
            texture: s.texture,
            presence: s.presence,
            train_images: s.train_images,
            val_images: s.val_images,
            seed: s.seed,
            train_manifest: None,
            val_manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoSection {
    pub enabled: bool,
    pub history: usize,
    pub temporal: TemporalVariant,
    pub frames: usize,
    pub max_speed: f64,
    pub train_clips: usize,
    pub val_clips: usize,
}

impl Default for VideoSection {
    fn default() -> Self {
        let v = VideoConfig::default();
        Self {
            enabled: false,
            history: DEFAULT_HISTORY,
            temporal: TemporalVariant::DatasetContext,
            frames: v.frames,
            max_speed: v.max_speed,
            train_clips: v.train_clips,
            val_clips: v.val_clips,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub memory: MemorySection,
    pub training: TrainingSection,
    pub inference: InferenceSection,
    pub data: DataSection,
    pub video: VideoSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = &self.memory;
        if !(0.0..=1.0).contains(&m.momentum) {
            return bad(format!("memory.momentum must lie in [0, 1], got {}", m.momentum));
        }
        if !(m.epsilon_std > 0.0 && m.epsilon_std.is_finite()) {
            return bad(format!("memory.epsilon_std must be positive, got {}", m.epsilon_std));
        }
        let t = &self.training;
        if t.iterations == 0 || t.batch_size == 0 {
            return bad("training.iterations and training.batch_size must be positive".into());
        }
        if !(t.alpha >= 0.0 && t.alpha.is_finite()) {
            return bad(format!("training.alpha must be non-negative, got {}", t.alpha));
        }
        if !(t.optimizer.lr > 0.0 && t.optimizer.lr.is_finite()) {
            return bad(format!("training.optimizer.lr must be positive, got {}", t.optimizer.lr));
        }
        if (t.ignore_index as usize) < self.model.num_classes {
            return bad(format!("ignore index {} collides with a class id", t.ignore_index));
        }
        if self.inference.iis_stages == 0 {
            return bad("inference.iis_stages must be at least 1".into());
        }
        if self.video.enabled && self.video.frames == 0 {
            return bad("video.frames must be at least 1".into());
        }
        if self.data.source == DataSource::Manifest && self.data.train_manifest.is_none() {
            return bad("data.source = \"manifest\" needs data.train_manifest".into());
        }
        self.model_config().validate()?;
        if self.data.source == DataSource::Synthetic {
            self.synthetic().validate()?;
        }
        Ok(())
    }

    pub fn history(&self) -> usize {
        if self.video.enabled {
            self.video.history
        } else {
            0
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_classes: m.num_classes,
            backbone: BackboneConfig { widths: m.widths, depth: m.depth, feature_dim: m.feature_dim },
            within_image: m.within_image,
            dataset_context: m.dataset_context,
            fusion: m.fusion,
            history: self.history(),
            temporal: self.video.temporal,
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let d = &self.data;
        SyntheticConfig {
            num_classes: self.model.num_classes,
            height: d.height,
            width: d.width,
            noise: d.noise,
            texture: d.texture,
            presence: d.presence,
            train_images: d.train_images,
            val_images: d.val_images,
            seed: d.seed,
        }
    }

    pub fn video_config(&self) -> VideoConfig {
        let v = &self.video;
        VideoConfig { frames: v.frames, max_speed: v.max_speed, train_clips: v.train_clips, val_clips: v.val_clips }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Sets one value by dotted key, e.g. `memory.momentum`. The key must
    /// already exist; the value is parsed as a TOML literal, with bare words
    /// taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::UnknownGridKey(key.to_string()))?;
        }
        *slot = parse_literal(value);
        let updated: ExperimentConfig = root.try_into()?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Like [`ExperimentConfig::set`] but also accepts keys of optional
    /// fields that are currently unset.
    pub fn set_optional(&mut self, key: &str, value: &str) -> Result<()> {
        match self.set(key, value) {
            Err(Error::UnknownGridKey(_)) if OPTIONAL_KEYS.contains(&key) => {
                let mut root = toml::Value::try_from(&*self)?;
                let (section, field) = key.split_once('.').expect("optional keys are dotted");
                root.as_table_mut()
                    .and_then(|t| t.get_mut(section))
                    .and_then(|s| s.as_table_mut())
                    .expect("section exists")
                    .insert(field.to_string(), parse_literal(value));
                let updated: ExperimentConfig = root.try_into()?;
                updated.validate()?;
                *self = updated;
                Ok(())
            }
            other => other,
        }
    }
}

const OPTIONAL_KEYS: [&str; 2] = ["data.train_manifest", "data.val_manifest"];

fn parse_literal(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn defaults_carry_the_reference_hyperparameters() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.memory.momentum, 0.1);
        assert_eq!(cfg.training.alpha, 0.4);
        assert_eq!(cfg.model.fusion, FusionKind::Concatenation);
        assert_eq!(cfg.inference.iis_stages, 2);
        assert_eq!(cfg.video.history, 2);
        assert_eq!((cfg.data.height, cfg.data.width, cfg.model.num_classes, cfg.model.feature_dim), (64, 64, 6, 64));
        assert_eq!(cfg.training.iterations, 2000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[memory]\nmomentun = 0.2\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[extra]\n").is_err());
    }

    #[test]
    fn momentum_outside_unit_interval_is_invalid() {
        let err = ExperimentConfig::from_toml_str("[memory]\nmomentum = 1.5\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn dotted_set_updates_and_validates() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("memory.momentum", "0.5").unwrap();
        cfg.set("model.fusion", "weighted_add").unwrap();
        cfg.set("training.optimizer.lr", "0.01").unwrap();
        assert_eq!(cfg.memory.momentum, 0.5);
        assert_eq!(cfg.model.fusion, FusionKind::WeightedAdd);
        assert_eq!(cfg.training.optimizer.lr, 0.01);
        assert!(matches!(cfg.set("memory.nope", "1"), Err(Error::UnknownGridKey(_))));
        assert!(cfg.set("memory.momentum", "-0.1").is_err());
        assert_eq!(cfg.memory.momentum, 0.5);
        cfg.set_optional("data.val_manifest", "\"/tmp/m.json\"").unwrap();
        assert_eq!(cfg.data.val_manifest, Some(PathBuf::from("/tmp/m.json")));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.training.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
