//! Training loop step and seed streams.

use ndarray::{Array3, Array4};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory_bank::{compute_class_stats, MemoryBank};
use crate::nn::Parameterized;
use crate::optim::Optimizer;
use crate::segmentor::{joint_loss, LossReport, Segmentor};
use crate::tensor::Real;

/// Independent 64-bit seed for `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

/// One training batch. `frames[0]` is the current frame; further entries are
/// historical frames, nearest first. Labels belong to the current frame.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub frames: Vec<Array4<T>>,
    pub labels: Array3<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub alpha: f64,
    pub ignore_index: u8,
    /// Moving-average bank updates after each step; off freezes the bank.
    pub update_memory: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub loss: LossReport,
    pub lr: f64,
    /// Seed used to sample the category representations of this step.
    pub sample_seed: u64,
    pub bank_mean: f64,
    pub bank_std: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Segmentor<T>,
    pub bank: MemoryBank,
    pub optimizer: Optimizer<T>,
    pub iteration: u64,
    pub options: TrainOptions,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Segmentor<T>, bank: MemoryBank, optimizer: Optimizer<T>, options: TrainOptions) -> Result<Self> {
        model.check_bank(&bank)?;
        Ok(Self { model, bank, optimizer, iteration: 0, options })
    }

    pub fn sample_seed(&self, iteration: u64) -> u64 {
        derive_seed(self.options.seed, iteration)
    }

    /// forward → loss → backward → optimizer step → bank update.
    ///
    /// A non-finite loss or gradient aborts the step with the parameters,
    /// the bank and the iteration counter untouched.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<StepReport> {
        let it = self.iteration;
        let sample_seed = self.sample_seed(it);
        let reps = self
            .model
            .has_dataset_context()
            .then(|| self.bank.sample_representations(sample_seed).as_real::<T>());

        self.model.zero_grad();
        let (enc, enc_cache) = self.model.encode(&batch.frames, reps.as_ref())?;
        let (logits, dec_cache) = self.model.decode(&enc, None, reps.as_ref());
        let (loss, grads) = joint_loss(
            &logits,
            enc.weights.as_ref(),
            &batch.labels,
            self.options.alpha,
            self.options.ignore_index,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite { iteration: it, detail: format!("loss {loss:?}") });
        }
        self.model.backward(&enc_cache, &dec_cache, &grads.dlogits, grads.dweights.as_ref());
        if let Some((name, _)) = self
            .model
            .params()
            .into_iter()
            .find(|(_, p)| p.grad.iter().any(|g| !g.is_finite()))
        {
            self.model.zero_grad();
            return Err(Error::NonFinite { iteration: it, detail: format!("gradient of {name}") });
        }
        self.optimizer.step(self.model.params_mut(), it);

        if self.options.update_memory && self.model.has_dataset_context() {
            let stats = compute_class_stats(
                &enc.features,
                &batch.labels,
                self.model.num_classes(),
                self.options.ignore_index,
            )?;
            self.bank.ema_update(&stats);
        }
        self.iteration += 1;
        let (bank_mean, bank_std) = bank_summary(&self.bank);
        Ok(StepReport { iteration: it, loss, lr: self.optimizer.lr_at(it), sample_seed, bank_mean, bank_std })
    }

    /// Fills uninitialized bank rows from one random pixel per class.
    pub fn prescan<'a, I>(&mut self, batches: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a Batch<T>>,
    {
        for (i, batch) in batches.into_iter().enumerate() {
            let features = self.model.features(&batch.frames[0]);
            let seed = derive_seed(self.options.seed ^ 0x5eed_5ca7, i as u64);
            self.bank.init_missing_from_sample(&features, &batch.labels, self.options.ignore_index, seed)?;
        }
        Ok(())
    }
}

/// Average mean and average std over the initialized rows.
pub fn bank_summary(bank: &MemoryBank) -> (f64, f64) {
    let rows: Vec<_> = bank
        .rows()
        .iter()
        .zip(bank.initialized_mask())
        .filter(|(_, &init)| init)
        .map(|(r, _)| *r)
        .collect();
    if rows.is_empty() {
        return (0.0, 0.0);
    }
    let n = rows.len() as f64;
    (rows.iter().map(|r| r[0]).sum::<f64>() / n, rows.iter().map(|r| r[1]).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::context::WithinImageContext;
    use crate::fusion::FusionKind;
    use crate::optim::OptimizerConfig;
    use crate::segmentor::{ModelConfig, TemporalVariant};

    fn trainer(update_memory: bool) -> Trainer<f32> {
        let config = ModelConfig {
            num_classes: 3,
            backbone: BackboneConfig { widths: [4, 8], depth: 1, feature_dim: 8 },
            within_image: WithinImageContext::Identity,
            dataset_context: true,
            fusion: FusionKind::Concatenation,
            history: 0,
            temporal: TemporalVariant::DatasetContext,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Segmentor::new(config, &mut rng).unwrap();
        let bank = MemoryBank::new(3, 8, 0.1).unwrap();
        let opt = Optimizer::new(OptimizerConfig::default(), 10);
        let options = TrainOptions { alpha: 0.4, ignore_index: 255, update_memory, seed: 9 };
        Trainer::new(model, bank, opt, options).unwrap()
    }

    fn batch() -> Batch<f32> {
        let image = Array4::from_shape_fn((2, 3, 16, 16), |(b, c, y, x)| ((b + c * 3 + y * x) % 7) as f32 / 7.0);
        let labels = Array3::from_shape_fn((2, 16, 16), |(_, y, x)| ((x / 6 + y / 8) % 3) as u8);
        Batch { frames: vec![image], labels }
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(1, 5), derive_seed(1, 5));
    }

    #[test]
    fn identical_steps_give_identical_reports() {
        let (mut a, mut b) = (trainer(true), trainer(true));
        let batch = batch();
        for _ in 0..2 {
            assert_eq!(a.train_step(&batch).unwrap(), b.train_step(&batch).unwrap());
        }
    }

    #[test]
    fn bank_is_untouched_when_updates_are_off() {
        let mut t = trainer(false);
        let before = t.bank.clone();
        t.train_step(&batch()).unwrap();
        assert_eq!(t.bank, before);
    }

    #[test]
    fn non_finite_input_aborts_without_touching_state() {
        let mut t = trainer(true);
        let mut bad = batch();
        bad.frames[0][[0, 0, 0, 0]] = f32::NAN;
        let (bank, model) = (t.bank.clone(), t.model.clone());
        assert!(matches!(t.train_step(&bad), Err(Error::NonFinite { .. })));
        assert_eq!(t.bank, bank);
        assert_eq!(t.iteration, 0);
        assert_eq!(t.model.params().len(), model.params().len());
        for ((_, p), (_, q)) in t.model.params().into_iter().zip(model.params()) {
            assert_eq!(p.value, q.value);
        }
    }
}
