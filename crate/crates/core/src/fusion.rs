//! Fusion of the pixel features with the context maps.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::nn::{relu, relu_backward, Conv2d, ConvCache, Param, Parameterized};
use crate::tensor::{concat_channels, softmax_channels, softmax_channels_backward, split_channels, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Add,
    WeightedAdd,
    Concatenation,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Add => "add",
            FusionKind::WeightedAdd => "weighted_add",
            FusionKind::Concatenation => "concatenation",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "add" => Ok(FusionKind::Add),
            "weighted_add" => Ok(FusionKind::WeightedAdd),
            "concatenation" | "concat" => Ok(FusionKind::Concatenation),
            other => Err(Error::Config(format!("unknown fusion `{other}`"))),
        }
    }
}

/// Fuses `inputs` maps of `Z` channels each into one `Z`-channel map.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion<T> {
    kind: FusionKind,
    inputs: usize,
    feature_dim: usize,
    /// `inputs·Z → Z` bottleneck for concatenation, `inputs·Z → inputs`
    /// gate for the weighted sum.
    proj: Option<Conv2d<T>>,
}

#[derive(Debug, Clone)]
pub enum FusionCache<T> {
    Add,
    Weighted { inputs: Vec<Array4<T>>, gate: ConvCache<T>, weights: Array4<T> },
    Concat { proj: ConvCache<T>, out: Array4<T> },
}

impl<T: Real> Fusion<T> {
    pub fn new<R: Rng>(kind: FusionKind, inputs: usize, feature_dim: usize, rng: &mut R) -> Self {
        assert!(inputs >= 2, "fusion needs at least two inputs");
        let proj = match kind {
            FusionKind::Add => None,
            FusionKind::WeightedAdd => Some(Conv2d::pointwise(inputs * feature_dim, inputs, rng)),
            FusionKind::Concatenation => Some(Conv2d::pointwise(inputs * feature_dim, feature_dim, rng)),
        };
        Self { kind, inputs, feature_dim, proj }
    }

    pub fn kind(&self) -> FusionKind {
        self.kind
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs
    }

    /// Channel width entering the learnable projection (0 for `add`).
    pub fn input_width(&self) -> usize {
        self.proj.as_ref().map_or(0, |p| p.in_channels())
    }

    pub fn forward(&self, parts: &[&Array4<T>]) -> (Array4<T>, FusionCache<T>) {
        assert_eq!(parts.len(), self.inputs, "fusion input count");
        match self.kind {
            FusionKind::Add => {
                let mut out = parts[0].clone();
                for p in &parts[1..] {
                    out += *p;
                }
                (out, FusionCache::Add)
            }
            FusionKind::WeightedAdd => {
                let gate = self.proj.as_ref().expect("gate");
                let (logits, gc) = gate.forward(&concat_channels(parts));
                let weights = softmax_channels(&logits);
                let mut out = Array4::zeros(parts[0].raw_dim());
                for (i, p) in parts.iter().enumerate() {
                    let wi = weights.slice(s![.., i..i + 1, .., ..]);
                    out += &(*p * &wi);
                }
                let inputs = parts.iter().map(|p| (*p).clone()).collect();
                (out, FusionCache::Weighted { inputs, gate: gc, weights })
            }
            FusionKind::Concatenation => {
                let proj = self.proj.as_ref().expect("projection");
                let (pre, pc) = proj.forward(&concat_channels(parts));
                let out = relu(&pre);
                (out.clone(), FusionCache::Concat { proj: pc, out })
            }
        }
    }

    /// Gradients for each input, in input order.
    pub fn backward(&mut self, cache: &FusionCache<T>, dout: &Array4<T>) -> Vec<Array4<T>> {
        let widths = vec![self.feature_dim; self.inputs];
        match cache {
            FusionCache::Add => vec![dout.clone(); self.inputs],
            FusionCache::Weighted { inputs, gate, weights } => {
                let mut dweights = Array4::zeros(weights.raw_dim());
                let mut grads = Vec::with_capacity(self.inputs);
                for (i, x) in inputs.iter().enumerate() {
                    let wi = weights.slice(s![.., i..i + 1, .., ..]);
                    grads.push(dout * &wi);
                    let dw = (dout * x).sum_axis(Axis(1));
                    dweights.slice_mut(s![.., i, .., ..]).assign(&dw);
                }
                let dlogits = softmax_channels_backward(weights, &dweights);
                let proj = self.proj.as_mut().expect("gate");
                let dcat = proj.backward(gate, &dlogits, true).expect("input grad");
                for (g, extra) in grads.iter_mut().zip(split_channels(&dcat, &widths)) {
                    *g += &extra;
                }
                grads
            }
            FusionCache::Concat { proj: pc, out } => {
                let dpre = relu_backward(out, dout);
                let proj = self.proj.as_mut().expect("projection");
                let dcat = proj.backward(pc, &dpre, true).expect("input grad");
                split_channels(&dcat, &widths)
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Fusion<U> {
        Fusion {
            kind: self.kind,
            inputs: self.inputs,
            feature_dim: self.feature_dim,
            proj: self.proj.as_ref().map(Conv2d::cast),
        }
    }
}

impl<T: Real> Parameterized<T> for Fusion<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        self.proj.as_ref().map(|p| p.params()).unwrap_or_default()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.proj.as_mut().map(|p| p.params_mut()).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Array4<f64>> {
        (0..n)
            .map(|_| Array4::from_shape_fn((2, 4, 3, 3), |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn every_strategy_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs = inputs(&mut rng, 3);
        let refs: Vec<_> = xs.iter().collect();
        for kind in [FusionKind::Add, FusionKind::WeightedAdd, FusionKind::Concatenation] {
            let f = Fusion::<f64>::new(kind, 3, 4, &mut rng);
            assert_eq!(f.forward(&refs).0.dim(), (2, 4, 3, 3));
        }
    }

    #[test]
    fn concatenation_width_counts_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(Fusion::<f32>::new(FusionKind::Concatenation, 2, 8, &mut rng).input_width(), 16);
        assert_eq!(Fusion::<f32>::new(FusionKind::Concatenation, 3, 8, &mut rng).input_width(), 24);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [FusionKind::Add, FusionKind::WeightedAdd, FusionKind::Concatenation] {
            let mut f = Fusion::<f64>::new(kind, 2, 4, &mut rng);
            let xs = inputs(&mut rng, 2);
            let refs: Vec<_> = xs.iter().collect();
            let (y, cache) = f.forward(&refs);
            let dy = Array4::from_shape_fn(y.raw_dim(), |_| rng.random_range(-1.0..1.0));
            let grads = f.backward(&cache, &dy);
            let h = 1e-6;
            for (i, idx) in [(0usize, [0usize, 1, 2, 0]), (1, [1, 3, 0, 2])] {
                let mut plus = xs.clone();
                plus[i][idx] += h;
                let mut minus = xs.clone();
                minus[i][idx] -= h;
                let l = |v: &Vec<Array4<f64>>| {
                    let r: Vec<_> = v.iter().collect();
                    (&f.forward(&r).0 * &dy).sum()
                };
                let fd = (l(&plus) - l(&minus)) / (2.0 * h);
                assert!((fd - grads[i][idx]).abs() < 1e-6, "{kind}: {fd} vs {}", grads[i][idx]);
            }
        }
    }
}
