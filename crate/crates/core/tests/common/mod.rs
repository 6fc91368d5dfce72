//! Helpers shared by the integration tests.

use mcibi::backbone::BackboneConfig;
use mcibi::context::WithinImageContext;
use mcibi::fusion::FusionKind;
use mcibi::memory_bank::MemoryBank;
use mcibi::nn::Parameterized;
use mcibi::segmentor::{joint_loss, ModelConfig, Segmentor, TemporalVariant};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-7;
const STEP: f64 = 1e-6;

pub fn micro(within: WithinImageContext, fusion: FusionKind, history: usize, temporal: TemporalVariant) -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        backbone: BackboneConfig { widths: [2, 4], depth: 1, feature_dim: 8 },
        within_image: within,
        dataset_context: true,
        fusion,
        history,
        temporal,
    }
}

#[derive(Debug, Default)]
pub struct GradSummary {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_at: String,
    pub failures: Vec<String>,
}

fn loss(model: &Segmentor<f64>, frames: &[Array4<f64>], reps: &Array2<f64>, labels: &Array3<u8>) -> f64 {
    let (enc, _) = model.encode(frames, Some(reps)).unwrap();
    let (logits, _) = model.decode(&enc, None, Some(reps));
    joint_loss(&logits, enc.weights.as_ref(), labels, 0.4, 255).unwrap().0.total
}

fn set(model: &mut Segmentor<f64>, pi: usize, i: usize, v: f64) {
    model.params_mut()[pi].1.value.as_slice_mut().unwrap()[i] = v;
}

/// Compares analytic and central-difference gradients of the joint loss for
/// three entries of every parameter tensor.
pub fn grad_check(config: ModelConfig, seed: u64, size: usize) -> GradSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Segmentor::<f64>::new(config.clone(), &mut rng).unwrap();
    // Zero biases put ReLU inputs exactly on the kink wherever a patch of
    // the previous activation is all zero; central differences are
    // meaningless there.
    for (name, p) in model.params_mut() {
        if name.ends_with("bias") {
            p.value.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
    }
    let frames: Vec<Array4<f64>> = (0..=config.history)
        .map(|_| Array4::from_shape_fn((1, 3, size, size), |_| rng.random_range(0.0..1.0)))
        .collect();
    let labels = Array3::from_shape_fn((1, size, size), |(_, y, x)| {
        if (y + x) % 11 == 0 { 255 } else { ((y / 3 + x / 5) % 3) as u8 }
    });
    let bank = MemoryBank::from_parts(vec![[0.3, 0.4], [-0.2, 0.7], [0.5, 0.2]], vec![true; 3], 8, 0.1, 1e-4).unwrap();
    let reps = bank.sample_representations(seed).as_real::<f64>();

    model.zero_grad();
    let (enc, enc_cache) = model.encode(&frames, Some(&reps)).unwrap();
    let (logits, dec_cache) = model.decode(&enc, None, Some(&reps));
    let (_, grads) = joint_loss(&logits, enc.weights.as_ref(), &labels, 0.4, 255).unwrap();
    model.backward(&enc_cache, &dec_cache, &grads.dlogits, grads.dweights.as_ref());
    let analytic: Vec<(String, Vec<f64>)> =
        model.params().into_iter().map(|(n, p)| (n, p.grad.iter().copied().collect())).collect();
    assert!(analytic.iter().any(|(n, _)| n.starts_with("dca.")), "context head parameters missing");

    let mut summary = GradSummary::default();
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.len();
        let picks: Vec<usize> = if n <= 3 { (0..n).collect() } else { (0..3).map(|_| rng.random_range(0..n)).collect() };
        for i in picks {
            let orig = model.params()[pi].1.value.as_slice().unwrap()[i];
            set(&mut model, pi, i, orig + STEP);
            let up = loss(&model, &frames, &reps, &labels);
            set(&mut model, pi, i, orig - STEP);
            let down = loss(&model, &frames, &reps, &labels);
            set(&mut model, pi, i, orig);
            let fd = (up - down) / (2.0 * STEP);
            let a = grad[i];
            let err = (a - fd).abs();
            let scale = a.abs().max(fd.abs());
            if err > GRAD_REL_TOL * scale + ABS_FLOOR {
                summary.failures.push(format!("{name}[{i}]: analytic {a:e}, finite difference {fd:e}"));
            }
            if scale > 1e-6 && err / scale > summary.worst_rel {
                summary.worst_rel = err / scale;
                summary.worst_at = format!("{name}[{i}]");
            }
            summary.checked += 1;
        }
    }
    summary
}

pub fn all_micro_variants() -> Vec<(&'static str, ModelConfig, usize)> {
    use FusionKind::*;
    use TemporalVariant::*;
    use WithinImageContext::*;
    vec![
        ("concatenation", micro(Identity, Concatenation, 0, DatasetContext), 16),
        ("pyramid pooling + weighted add", micro(PyramidPooling, WeightedAdd, 0, DatasetContext), 16),
        ("pyramid pooling + add", micro(PyramidPooling, Add, 0, DatasetContext), 16),
        ("8x8 input", micro(Identity, Concatenation, 0, DatasetContext), 8),
        ("video, past contexts", micro(Identity, Concatenation, 2, DatasetContext), 16),
        ("video, past features", micro(Identity, Concatenation, 2, RawFeatures), 16),
    ]
}
