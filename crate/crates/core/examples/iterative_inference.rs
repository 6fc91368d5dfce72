//! Coarse-to-fine inference: one shared encoding, several aggregation
//! stages, with the cumulative time of each stage.

use std::sync::Arc;

use mcibi::config::ExperimentConfig;
use mcibi::data::{batch_from_samples, generate_synthetic_dataset, Split};
use mcibi::experiment::{build_trainer, load_split, prescan_bank};
use mcibi::iis::{run_iis_with_reps, IisConfig};
use mcibi::memory_bank::Sampling;

fn main() -> mcibi::Result<()> {
    let mut cfg = ExperimentConfig::default();
    // Keep the randomly initialized context projection so the stages differ
    // even without training.
    cfg.model.zero_init_context = false;
    let mut trainer = build_trainer(&cfg)?;
    let train_data = load_split(&cfg, Split::Train)?;
    prescan_bank(&mut trainer, &cfg, &train_data)?;
    let samples = generate_synthetic_dataset(&cfg.synthetic(), Split::Val)?;
    let batch = batch_from_samples(&[&samples[0]])?;
    let reps = Arc::new(trainer.bank.representations(Sampling::Random, 5).as_real::<f32>());

    let out = run_iis_with_reps(&trainer.model, &batch.frames, Some(reps), IisConfig::new(4)?)?;
    let mut prev = None;
    for stage in &out.stages {
        let change = prev.map_or(0.0, |p: &ndarray::Array4<f32>| (&stage.probs - p).mapv(f32::abs).mean().unwrap());
        println!(
            "stage {}: {:>8.2} ms cumulative, mean |Δprob| vs previous {:.5}",
            stage.stage,
            stage.elapsed.as_secs_f64() * 1e3,
            change
        );
        prev = Some(&stage.probs);
    }
    Ok(())
}
