//! Runs the dataset-level context head on its own: predict per-pixel class
//! weights, aggregate the class representations, then recalibrate.

use mcibi::dca::{aggregate_coarse, DcaHead};
use mcibi::memory_bank::MemoryBank;
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> mcibi::Result<()> {
    let (k, z, h, w) = (5, 16, 6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let head = DcaHead::<f64>::new(z, k, &mut rng);
    let features = Array4::from_shape_fn((1, z, h, w), |_| StandardNormal.sample(&mut rng));

    let bank = MemoryBank::from_parts((0..k).map(|c| [c as f64, 0.5]).collect(), vec![true; k], z, 0.1, 1e-4)?;
    let reps = bank.sample_representations(11).as_real::<f64>();

    let (weights, _) = head.predict_weights(&features);
    let coarse = aggregate_coarse(&weights, &reps);
    let (context, _) = head.recalibrate(&features, &coarse);

    let sums: Vec<f64> = (0..h * w).map(|i| weights.slice(ndarray::s![0, .., i / w, i % w]).sum()).collect();
    println!("weights {:?}, per-pixel sums in [{:.6}, {:.6}]", weights.dim(), sums.iter().cloned().fold(f64::MAX, f64::min), sums.iter().cloned().fold(f64::MIN, f64::max));
    println!("coarse context {:?}, mean {:.4}", coarse.dim(), coarse.mean().unwrap());
    println!("recalibrated context {:?}, mean {:.4}", context.dim(), context.mean().unwrap());
    Ok(())
}
