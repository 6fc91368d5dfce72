//! Dataset-level context aggregation head.
//!
//! Three steps turn backbone features into dataset-level context:
//!
//! 1. a two-layer per-pixel classifier predicts class probabilities `W`;
//! 2. the sampled category representations are mixed per pixel with those
//!    probabilities (`coarse = Wᵀ · C_dl`);
//! 3. a single-head dot-product attention between the pixel features
//!    (queries) and the coarse context (keys and values) recalibrates the
//!    coarse context.
//!
//! The category representations are an input, not a parameter: nothing is
//! back-propagated into them.

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;

use crate::nn::{prefixed, prefixed_mut, relu, relu_backward, Conv2d, ConvCache, Param, Parameterized};
use crate::tensor::{softmax_channels, softmax_channels_backward, softmax_rows, softmax_rows_backward, Real};

/// `Z × h × w` backbone pixel representations (batched).
pub type FeatureMap<T> = Array4<T>;
/// `K × h × w` per-pixel class distributions (batched).
pub type ClassProbMap<T> = Array4<T>;
/// `Z × h × w` per-pixel context (batched).
pub type ContextMap<T> = Array4<T>;

#[derive(Debug, Clone, PartialEq)]
pub struct DcaHead<T> {
    pub classifier_hidden: Conv2d<T>,
    pub classifier_out: Conv2d<T>,
    pub query: Conv2d<T>,
    pub key: Conv2d<T>,
    pub value: Conv2d<T>,
    pub output: Conv2d<T>,
    feature_dim: usize,
    num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct WeightsCache<T> {
    hidden: ConvCache<T>,
    hidden_out: Array4<T>,
    out: ConvCache<T>,
    probs: Array4<T>,
}

#[derive(Debug, Clone)]
pub struct RecalibrateCache<T> {
    query: ConvCache<T>,
    key: ConvCache<T>,
    value: ConvCache<T>,
    output: ConvCache<T>,
    q: Array4<T>,
    k: Array4<T>,
    v: Array4<T>,
    attention: Vec<Array2<T>>,
}

/// Width of the query/key projections.
pub fn attention_dim(feature_dim: usize) -> usize {
    (feature_dim / 2).max(1)
}

impl<T: Real> DcaHead<T> {
    pub fn new<R: Rng>(feature_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let d = attention_dim(feature_dim);
        Self {
            classifier_hidden: Conv2d::pointwise(feature_dim, feature_dim, rng),
            classifier_out: Conv2d::pointwise(feature_dim, num_classes, rng),
            query: Conv2d::pointwise(feature_dim, d, rng),
            key: Conv2d::pointwise(feature_dim, d, rng),
            value: Conv2d::pointwise(feature_dim, feature_dim, rng),
            output: Conv2d::pointwise(feature_dim, feature_dim, rng),
            feature_dim,
            num_classes,
        }
    }

    /// Zeroes the output projection so the context starts at zero while
    /// its weights still receive gradients.
    pub fn silence_output(&mut self) {
        self.output.weight.value.fill(T::zero());
        self.output.bias.value.fill(T::zero());
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-pixel class probabilities predicted from the features.
    pub fn predict_weights(&self, features: &FeatureMap<T>) -> (ClassProbMap<T>, WeightsCache<T>) {
        let (pre, hidden) = self.classifier_hidden.forward(features);
        let hidden_out = relu(&pre);
        let (logits, out) = self.classifier_out.forward(&hidden_out);
        let probs = softmax_channels(&logits);
        (probs.clone(), WeightsCache { hidden, hidden_out, out, probs })
    }

    /// Gradient w.r.t. the features given the gradient w.r.t. the
    /// probabilities.
    pub fn predict_weights_backward(&mut self, cache: &WeightsCache<T>, dprobs: &ClassProbMap<T>) -> FeatureMap<T> {
        let dlogits = softmax_channels_backward(&cache.probs, dprobs);
        let dhidden = self.classifier_out.backward(&cache.out, &dlogits, true).expect("input grad");
        let dpre = relu_backward(&cache.hidden_out, &dhidden);
        self.classifier_hidden.backward(&cache.hidden, &dpre, true).expect("input grad")
    }

    /// Position-confidence recalibration of the coarse context.
    pub fn recalibrate(&self, features: &FeatureMap<T>, coarse: &ContextMap<T>) -> (ContextMap<T>, RecalibrateCache<T>) {
        let (b, z, h, w) = features.dim();
        assert_eq!(coarse.dim(), (b, z, h, w), "coarse context must match the features");
        let n = h * w;
        let d = attention_dim(z);
        let scale = T::one() / T::of(d as f64).sqrt();
        let (q, query) = self.query.forward(features);
        let (k, key) = self.key.forward(coarse);
        let (v, value) = self.value.forward(coarse);
        let mut mixed = Array4::zeros((b, z, h, w));
        let mut attention = Vec::with_capacity(b);
        for bi in 0..b {
            let qb = flat(&q, bi, d, n);
            let kb = flat(&k, bi, d, n);
            let vb = flat(&v, bi, z, n);
            let p = softmax_rows(&(qb.t().dot(&kb) * scale));
            let ab = vb.dot(&p.t());
            mixed
                .slice_mut(s![bi, .., .., ..])
                .assign(&ab.into_shape_with_order((z, h, w)).expect("shape"));
            attention.push(p);
        }
        let (out, output) = self.output.forward(&mixed);
        (out, RecalibrateCache { query, key, value, output, q, k, v, attention })
    }

    /// Returns `(d features, d coarse)`.
    pub fn recalibrate_backward(
        &mut self,
        cache: &RecalibrateCache<T>,
        dout: &ContextMap<T>,
    ) -> (FeatureMap<T>, ContextMap<T>) {
        let (b, z, h, w) = dout.dim();
        let n = h * w;
        let d = attention_dim(z);
        let scale = T::one() / T::of(d as f64).sqrt();
        let dmixed = self.output.backward(&cache.output, dout, true).expect("input grad");
        let mut dq = Array4::zeros((b, d, h, w));
        let mut dk = Array4::zeros((b, d, h, w));
        let mut dv = Array4::zeros((b, z, h, w));
        for bi in 0..b {
            let p = &cache.attention[bi];
            let da = flat(&dmixed, bi, z, n);
            let vb = flat(&cache.v, bi, z, n);
            let qb = flat(&cache.q, bi, d, n);
            let kb = flat(&cache.k, bi, d, n);
            let dvb = da.dot(p);
            let dp = da.t().dot(&vb);
            let ds = softmax_rows_backward(p, &dp) * scale;
            let dqb = kb.dot(&ds.t());
            let dkb = qb.dot(&ds);
            dq.slice_mut(s![bi, .., .., ..]).assign(&dqb.into_shape_with_order((d, h, w)).expect("shape"));
            dk.slice_mut(s![bi, .., .., ..]).assign(&dkb.into_shape_with_order((d, h, w)).expect("shape"));
            dv.slice_mut(s![bi, .., .., ..]).assign(&dvb.into_shape_with_order((z, h, w)).expect("shape"));
        }
        let dfeatures = self.query.backward(&cache.query, &dq, true).expect("input grad");
        let mut dcoarse = self.key.backward(&cache.key, &dk, true).expect("input grad");
        dcoarse += &self.value.backward(&cache.value, &dv, true).expect("input grad");
        (dfeatures, dcoarse)
    }

    pub fn cast<U: Real>(&self) -> DcaHead<U> {
        DcaHead {
            classifier_hidden: self.classifier_hidden.cast(),
            classifier_out: self.classifier_out.cast(),
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            output: self.output.cast(),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
        }
    }
}

fn flat<T: Real>(x: &Array4<T>, bi: usize, c: usize, n: usize) -> Array2<T> {
    x.slice(s![bi, .., .., ..])
        .to_owned()
        .into_shape_with_order((c, n))
        .expect("contiguous sample")
}

/// Per-pixel mixture of category representations: `out[:, p] = Σ_c W[c, p] · reps[c]`.
pub fn aggregate_coarse<T: Real>(weights: &ClassProbMap<T>, reps: &Array2<T>) -> ContextMap<T> {
    let (b, k, h, w) = weights.dim();
    assert_eq!(reps.nrows(), k, "one representation row per class");
    let z = reps.ncols();
    let reps_t = reps.t();
    let mut out = Array4::zeros((b, z, h, w));
    for bi in 0..b {
        let wb = flat(weights, bi, k, h * w);
        let cb = reps_t.dot(&wb);
        out.slice_mut(s![bi, .., .., ..])
            .assign(&cb.into_shape_with_order((z, h, w)).expect("shape"));
    }
    out
}

/// Gradient of [`aggregate_coarse`] w.r.t. the weights; the representations
/// are constants.
pub fn aggregate_coarse_backward<T: Real>(dcoarse: &ContextMap<T>, reps: &Array2<T>) -> ClassProbMap<T> {
    let (b, z, h, w) = dcoarse.dim();
    let k = reps.nrows();
    let mut dw = Array4::zeros((b, k, h, w));
    for bi in 0..b {
        let dcb = flat(dcoarse, bi, z, h * w);
        let dwb = reps.dot(&dcb);
        dw.slice_mut(s![bi, .., .., ..])
            .assign(&dwb.into_shape_with_order((k, h, w)).expect("shape"));
    }
    dw
}

/// Sum over the channel axis; handy for simplex checks.
pub fn channel_sums<T: Real>(x: &Array4<T>) -> ndarray::Array3<T> {
    x.sum_axis(Axis(1))
}

impl<T: Real> Parameterized<T> for DcaHead<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        out.extend(prefixed("classifier_hidden", self.classifier_hidden.params()));
        out.extend(prefixed("classifier_out", self.classifier_out.params()));
        out.extend(prefixed("query", self.query.params()));
        out.extend(prefixed("key", self.key.params()));
        out.extend(prefixed("value", self.value.params()));
        out.extend(prefixed("output", self.output.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        out.extend(prefixed_mut("classifier_hidden", self.classifier_hidden.params_mut()));
        out.extend(prefixed_mut("classifier_out", self.classifier_out.params_mut()));
        out.extend(prefixed_mut("query", self.query.params_mut()));
        out.extend(prefixed_mut("key", self.key.params_mut()));
        out.extend(prefixed_mut("value", self.value.params_mut()));
        out.extend(prefixed_mut("output", self.output.params_mut()));
        out
    }
}
