//! The memory bank changes only through its moving-average update.

use mcibi::config::ExperimentConfig;
use mcibi::data::{batch_from_clips, Split};
use mcibi::experiment::{build_trainer, load_split, prescan_bank};
use mcibi::memory_bank::compute_class_stats;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.height = 32;
    cfg.data.width = 32;
    cfg.data.train_images = 8;
    cfg.model.feature_dim = 16;
    cfg.model.widths = [4, 8];
    cfg.training.batch_size = 4;
    cfg
}

#[test]
fn frozen_bank_is_bit_identical_after_steps() {
    let mut cfg = small();
    cfg.memory.update = false;
    let data = load_split(&cfg, Split::Train).unwrap();
    let mut t = build_trainer(&cfg).unwrap();
    prescan_bank(&mut t, &cfg, &data).unwrap();
    let before = t.bank.clone();
    let params_before: Vec<f32> = t.model_params_flat();
    for i in 0..5 {
        let refs: Vec<_> = data.iter().skip(i % 2 * 4).take(4).collect();
        let (batch, _) = batch_from_clips(&refs, 0).unwrap();
        t.train_step(&batch).unwrap();
    }
    assert_ne!(t.model_params_flat(), params_before, "the optimizer did not move any parameter");
    for (a, b) in t.bank.rows().iter().zip(before.rows()) {
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }
    assert_eq!(t.bank, before);
}

#[test]
fn updated_bank_equals_explicit_moving_average() {
    let cfg = small();
    let data = load_split(&cfg, Split::Train).unwrap();
    let mut t = build_trainer(&cfg).unwrap();
    prescan_bank(&mut t, &cfg, &data).unwrap();
    for i in 0..4 {
        let refs: Vec<_> = data.iter().skip(i % 2 * 4).take(4).collect();
        let (batch, _) = batch_from_clips(&refs, 0).unwrap();
        // The update uses the features of the forward pass, i.e. the
        // parameters before this step.
        let features = t.model.features(&batch.frames[0]);
        let stats = compute_class_stats(&features, &batch.labels, cfg.model.num_classes, cfg.training.ignore_index).unwrap();
        let mut expected = t.bank.clone();
        expected.ema_update(&stats);
        t.train_step(&batch).unwrap();
        for (a, b) in t.bank.rows().iter().zip(expected.rows()) {
            assert_eq!(a[0].to_bits(), b[0].to_bits());
            assert_eq!(a[1].to_bits(), b[1].to_bits());
        }
    }
}

trait Flat {
    fn model_params_flat(&self) -> Vec<f32>;
}

impl Flat for mcibi::train::Trainer<f32> {
    fn model_params_flat(&self) -> Vec<f32> {
        use mcibi::nn::Parameterized;
        self.model.params().iter().flat_map(|(_, p)| p.value.iter().copied().collect::<Vec<_>>()).collect()
    }
}
