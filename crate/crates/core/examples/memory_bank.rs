//! Builds a distribution memory from synthetic features, updates it with a
//! moving average, and draws class representations from it.

use mcibi::memory_bank::{compute_class_stats, MemoryBank, Sampling};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mcibi::Result<()> {
    let (k, z) = (4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Stride-8 features for two 32x32 images, with class-dependent offsets.
    let labels = Array3::from_shape_fn((2, 32, 32), |(_, y, x)| ((y / 16) * 2 + x / 16) as u8);
    let features = Array4::from_shape_fn((2, z, 4, 4), |(_, c, y, x)| {
        let class = (y / 2) * 2 + x / 2;
        class as f32 + 0.1 * c as f32 + rng.random::<f32>() * 0.05
    });

    let mut bank = MemoryBank::init_from_sample(&features, &labels, k, 0.1, 255, 0)?;
    println!("after initialization:\n{}", bank.to_table());

    let batch = compute_class_stats(&features, &labels, k, 255)?;
    for _ in 0..20 {
        bank.ema_update(&batch);
    }
    println!("after 20 updates:\n{}", bank.to_table());

    let drawn = bank.representations(Sampling::Random, 42);
    let mean = bank.representations(Sampling::Mean, 0);
    for c in 0..k {
        println!(
            "class {c}: sampled row {:?}  mean row[0] {:.3}",
            drawn.data.row(c).iter().take(4).map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            mean.data[[c, 0]]
        );
    }
    Ok(())
}
