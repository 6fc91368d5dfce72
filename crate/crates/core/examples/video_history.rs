//! Video variant: each prediction also sees `h` earlier frames. Clips
//! shorter than the history are padded with their earliest frame.

use mcibi::config::ExperimentConfig;
use mcibi::data::{batch_from_clips, Split};
use mcibi::experiment::{build_trainer, load_split};
use mcibi::memory_bank::Sampling;
use mcibi::segmentor::TemporalVariant;

fn main() -> mcibi::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.video.enabled = true;
    cfg.video.history = 2;
    cfg.data.train_images = 4;
    cfg.video.train_clips = 4;
    for temporal in [TemporalVariant::DatasetContext, TemporalVariant::RawFeatures] {
        cfg.video.temporal = temporal;
        let trainer = build_trainer(&cfg)?;
        let clips = load_split(&cfg, Split::Train)?;
        let refs: Vec<_> = clips.iter().take(2).collect();
        let (batch, padded) = batch_from_clips(&refs, cfg.history())?;
        let out = trainer.model.forward(&batch.frames[0].clone(), &trainer.bank, 0);
        println!(
            "{temporal:?}: {} frames per sample, padded {padded}, fusion width {}, single-frame forward {}",
            batch.frames.len(),
            trainer.model.fusion_width(),
            if out.is_err() { "rejected" } else { "accepted" }
        );
        let reps = trainer.bank.representations(Sampling::Mean, 0).as_real::<f32>();
        let (enc, _) = trainer.model.encode(&batch.frames, Some(&reps))?;
        println!("  historical entries carried: {}", enc.history.len());
    }
    Ok(())
}
