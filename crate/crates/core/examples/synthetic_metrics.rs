//! Generates a synthetic split, writes it to disk in the manifest layout,
//! reads it back, and scores a trivial predictor with the confusion matrix.

use mcibi::data::{generate_synthetic_dataset, load_dataset, save_dataset, Split, SyntheticConfig};
use mcibi::metrics::ConfusionMatrix;
use ndarray::Axis;

fn main() -> mcibi::Result<()> {
    let cfg = SyntheticConfig { train_images: 8, ..Default::default() };
    let samples = generate_synthetic_dataset(&cfg, Split::Train)?;
    let dir = std::env::temp_dir().join("mcibi_synthetic_example");
    let manifest_path = save_dataset(&dir, &samples, cfg.num_classes, 255)?;
    let (manifest, loaded) = load_dataset(&manifest_path)?;
    println!("wrote and reloaded {} samples (K={}) under {}", loaded.len(), manifest.num_classes, dir.display());

    // Predict class 0 everywhere: background-only accuracy.
    let mut cm = ConfusionMatrix::new(cfg.num_classes, 255);
    for s in &loaded {
        let labels = s.labels.clone().insert_axis(Axis(0));
        cm.add(&labels.mapv(|_| 0u8), &labels)?;
    }
    print!("{}", cm.report()?.to_table());
    Ok(())
}
