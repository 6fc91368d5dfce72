//! Versioned binary checkpoints.
//!
//! Layout: the magic `MCIBICKP`, a little-endian `u32` version, a `u64`
//! header length, the JSON header, then raw little-endian payload in header
//! order: every parameter (`f32`), the bank stats (`f64`, mean then std per
//! class), and the optimizer moment buffers (`f32`).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::nn::Parameterized;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::segmentor::Segmentor;
use crate::train::{TrainOptions, Trainer};

const MAGIC: &[u8; 8] = b"MCIBICKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankHeader {
    num_classes: usize,
    feature_dim: usize,
    momentum: f64,
    epsilon_std: f64,
    initialized: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: OptimizerConfig,
    total_iterations: u64,
    steps: u64,
    first: Vec<usize>,
    second: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    config_hash: String,
    iteration: u64,
    options: TrainOptions,
    params: Vec<ParamEntry>,
    bank: BankHeader,
    optimizer: OptimizerHeader,
}

/// A training state restored from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub trainer: Trainer<f32>,
}

pub fn encode(trainer: &Trainer<f32>, config: &ExperimentConfig) -> Result<Vec<u8>> {
    let params = trainer.model.params();
    let (first, second) = trainer.optimizer.state();
    let bank = &trainer.bank;
    let header = Header {
        config: config.clone(),
        config_hash: config.hash(),
        iteration: trainer.iteration,
        options: trainer.options,
        params: params
            .iter()
            .map(|(name, p)| ParamEntry { name: name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
        bank: BankHeader {
            num_classes: bank.num_classes(),
            feature_dim: bank.feature_dim(),
            momentum: bank.momentum(),
            epsilon_std: bank.epsilon_std(),
            initialized: bank.initialized_mask().to_vec(),
        },
        optimizer: OptimizerHeader {
            config: trainer.optimizer.config().clone(),
            total_iterations: trainer.optimizer.total_iterations(),
            steps: trainer.optimizer.steps(),
            first: first.iter().map(Vec::len).collect(),
            second: second.iter().map(Vec::len).collect(),
        },
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in &params {
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for row in bank.rows() {
        out.extend_from_slice(&row[0].to_le_bytes());
        out.extend_from_slice(&row[1].to_le_bytes());
    }
    for buf in first.iter().chain(second) {
        for v in buf {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated payload".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    header.config.validate()?;

    let mut model = Segmentor::<f32>::new(header.config.model_config(), &mut ChaCha8Rng::seed_from_u64(0))?;
    {
        let mut slots = model.params_mut();
        if slots.len() != header.params.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} parameters, file has {}",
                slots.len(),
                header.params.len()
            )));
        }
        for ((name, slot), entry) in slots.iter_mut().zip(&header.params) {
            if *name != entry.name || slot.value.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter {} does not match {name}", entry.name)));
            }
            let values = r.f32s(slot.len())?;
            slot.value.as_slice_mut().expect("contiguous").copy_from_slice(&values);
        }
    }

    let b = &header.bank;
    let mut stats = Vec::with_capacity(b.num_classes);
    for _ in 0..b.num_classes {
        stats.push([r.f64()?, r.f64()?]);
    }
    let bank = MemoryBank::from_parts(stats, b.initialized.clone(), b.feature_dim, b.momentum, b.epsilon_std)?;

    let o = &header.optimizer;
    let first = o.first.iter().map(|&n| r.f32s(n)).collect::<Result<Vec<_>>>()?;
    let second = o.second.iter().map(|&n| r.f32s(n)).collect::<Result<Vec<_>>>()?;
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.bytes.len())));
    }
    let optimizer = Optimizer::restore(o.config.clone(), o.total_iterations, o.steps, first, second)?;

    let mut trainer = Trainer::new(model, bank, optimizer, header.options)?;
    trainer.iteration = header.iteration;
    Ok(Checkpoint { config: header.config, config_hash: header.config_hash, trainer })
}

pub fn save(path: &Path, trainer: &Trainer<f32>, config: &ExperimentConfig) -> Result<()> {
    let bytes = encode(trainer, config)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::file(&tmp, e))?;
    f.sync_all().map_err(|e| Error::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint to continue training under `config`. A config whose
/// hash differs from the stored one is refused unless `force` is set.
pub fn load_for_resume(path: &Path, config: &ExperimentConfig, force: bool) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    let expected = config.hash();
    if ckpt.config_hash != expected && !force {
        return Err(Error::ConfigHashMismatch { expected, found: ckpt.config_hash });
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::experiment::{load_split, train};

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.height = 16;
        cfg.data.width = 16;
        cfg.data.train_images = 4;
        cfg.data.val_images = 2;
        cfg.model.feature_dim = 8;
        cfg.model.widths = [4, 8];
        cfg.training.batch_size = 2;
        cfg.training.iterations = 3;
        cfg.training.log_every = 0;
        cfg
    }

    #[test]
    fn encode_decode_encode_is_byte_identical() {
        let cfg = tiny_config();
        let data = load_split(&cfg, Split::Train).unwrap();
        let trained = train(&cfg, &data, None, None).unwrap().trainer;
        let bytes = encode(&trained, &cfg).unwrap();
        let restored = decode(&bytes).unwrap();
        assert_eq!(restored.trainer.iteration, 3);
        assert_eq!(restored.config, cfg);
        assert_eq!(encode(&restored.trainer, &restored.config).unwrap(), bytes);
    }

    #[test]
    fn resume_refuses_a_different_config_unless_forced() {
        let cfg = tiny_config();
        let data = load_split(&cfg, Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &train(&cfg, &data, None, None).unwrap().trainer, &cfg).unwrap();
        let mut other = cfg.clone();
        other.memory.momentum = 0.5;
        assert!(matches!(load_for_resume(&path, &other, false), Err(Error::ConfigHashMismatch { .. })));
        assert!(load_for_resume(&path, &other, true).is_ok());
        assert!(load_for_resume(&path, &cfg, false).is_ok());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(matches!(decode(b"nope"), Err(Error::Checkpoint(_))));
        let cfg = tiny_config();
        let t = crate::experiment::build_trainer(&cfg).unwrap();
        let mut bytes = encode(&t, &cfg).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
    }
}
