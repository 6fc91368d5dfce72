//! The composed segmentation model and its joint objective.
//!
//! Data flow for one frame:
//!
//! ```text
//! image ─ backbone ─ R ─┬──────────────────────────────┐
//!                       ├─ within-image context ─ C_wi ─┤
//!                       ├─ classifier ─ W ─┐            │
//!                       │   C_dl ─ mix ────┴─ coarse    │
//!                       └─ attention(R, coarse) ─ C_bi ─┴─ fusion ─ head ─ logits
//! ```
//!
//! Historical frames (video) reuse the backbone, the classifier, and the
//! attention, and contribute extra fusion inputs. The category
//! representations `C_dl` arrive from outside and are treated as constants.

use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneConfig, OUTPUT_STRIDE};
use crate::context::WithinImageContext;
use crate::dca::{aggregate_coarse, aggregate_coarse_backward, DcaHead, RecalibrateCache, WeightsCache};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionCache, FusionKind};
use crate::memory_bank::{validate_labels, MemoryBank};
use crate::nn::{prefixed, prefixed_mut, relu, relu_backward, Conv2d, ConvCache, Param, Parameterized};
use crate::tensor::{
    apply_separable, apply_separable_backward, bilinear_matrix, reflect_pad_to_multiple, softmax_channels,
    Real,
};

pub const DEFAULT_ALPHA: f64 = 0.4;

/// What the historical frames contribute to the fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalVariant {
    /// Dataset-level context of each historical frame.
    DatasetContext,
    /// Raw backbone features of each historical frame.
    RawFeatures,
}

impl std::fmt::Display for TemporalVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TemporalVariant::DatasetContext => "C_bi^{N-i}",
            TemporalVariant::RawFeatures => "R_{N-i}",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub within_image: WithinImageContext,
    /// Enables the dataset-level context path. Off gives the plain FCN-style
    /// baseline.
    pub dataset_context: bool,
    pub fusion: FusionKind,
    /// Number of historical frames.
    pub history: usize,
    pub temporal: TemporalVariant,
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim
    }

    /// Number of maps entering the fusion.
    pub fn fusion_inputs(&self) -> usize {
        1 + usize::from(!self.within_image.is_identity())
            + usize::from(self.dataset_context)
            + if self.dataset_context { self.history } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.history > 0 && !self.dataset_context {
            return Err(Error::Config("historical frames require the dataset-level context path".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentor<T> {
    config: ModelConfig,
    backbone: Backbone<T>,
    dca: Option<DcaHead<T>>,
    fusion: Option<Fusion<T>>,
    head_hidden: Conv2d<T>,
    head_out: Conv2d<T>,
}

/// Everything computed before the aggregation weights are consumed.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    /// Unpadded input size.
    pub input_size: (usize, usize),
    pub features: Array4<T>,
    pub within_context: Option<Array4<T>>,
    /// Predicted aggregation weights of the current frame.
    pub weights: Option<Array4<T>>,
    /// One context map per historical frame, nearest frame first.
    pub history: Vec<Array4<T>>,
}

#[derive(Debug, Clone)]
struct FrameCache<T> {
    backbone: BackboneCache<T>,
    weights: Option<WeightsCache<T>>,
    recal: Option<RecalibrateCache<T>>,
}

#[derive(Debug, Clone)]
pub struct EncodeCache<T> {
    frames: Vec<FrameCache<T>>,
    reps: Option<Array2<T>>,
}

#[derive(Debug, Clone)]
pub struct DecodeCache<T> {
    recal: Option<RecalibrateCache<T>>,
    fusion: Option<FusionCache<T>>,
    hidden: ConvCache<T>,
    hidden_out: Array4<T>,
    out: ConvCache<T>,
}

/// Output of a plain forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Full-resolution class probabilities `O`.
    pub probs: Array4<T>,
    /// Stride-8 logits before upsampling.
    pub logits: Array4<T>,
    /// Stride-8 aggregation weights `W` (absent for the baseline).
    pub weights: Option<Array4<T>>,
    /// Stride-8 features `R`.
    pub features: Array4<T>,
    /// Fusion input channel count, for bookkeeping.
    pub fusion_width: usize,
}

impl<T: Real> Segmentor<T> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let z = config.feature_dim();
        let k = config.num_classes;
        let backbone = Backbone::new(&config.backbone, rng);
        let dca = config.dataset_context.then(|| DcaHead::new(z, k, rng));
        let inputs = config.fusion_inputs();
        let fusion = (inputs > 1).then(|| Fusion::new(config.fusion, inputs, z, rng));
        if let Some(f) = &fusion {
            if config.fusion == FusionKind::Concatenation && f.input_width() != inputs * z {
                return Err(Error::Shape(format!(
                    "concatenation expects {} channels, projection takes {}",
                    inputs * z,
                    f.input_width()
                )));
            }
        }
        Ok(Self {
            head_hidden: Conv2d::new(z, z, 3, 1, 1, rng),
            head_out: Conv2d::pointwise(z, k, rng),
            config,
            backbone,
            dca,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn history(&self) -> usize {
        self.config.history
    }

    pub fn has_dataset_context(&self) -> bool {
        self.dca.is_some()
    }

    pub fn dca(&self) -> Option<&DcaHead<T>> {
        self.dca.as_ref()
    }

    pub fn dca_mut(&mut self) -> Option<&mut DcaHead<T>> {
        self.dca.as_mut()
    }

    pub fn fusion_width(&self) -> usize {
        self.fusion.as_ref().map_or(0, |f| f.input_width())
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    /// Features only, for memory initialization and diagnostics.
    pub fn features(&self, images: &Array4<T>) -> Array4<T> {
        self.backbone.forward(&reflect_pad_to_multiple(images, OUTPUT_STRIDE)).0
    }

    fn check_frames(&self, frames: &[Array4<T>], reps: Option<&Array2<T>>) -> Result<()> {
        if frames.len() != 1 + self.config.history {
            return Err(Error::Shape(format!(
                "model expects {} frames, got {}",
                1 + self.config.history,
                frames.len()
            )));
        }
        let dim = frames[0].dim();
        if dim.1 != 3 {
            return Err(Error::Shape(format!("expected RGB input, got {} channels", dim.1)));
        }
        if frames.iter().any(|f| f.dim() != dim) {
            return Err(Error::Shape("frames differ in size".into()));
        }
        if self.dca.is_some() {
            let reps = reps.ok_or_else(|| Error::Config("dataset-level context needs representations".into()))?;
            if reps.dim() != (self.num_classes(), self.feature_dim()) {
                return Err(Error::Shape(format!(
                    "representations are {:?}, model expects {:?}",
                    reps.dim(),
                    (self.num_classes(), self.feature_dim())
                )));
            }
        }
        Ok(())
    }

    /// Backbone, within-image context, aggregation weights, and the
    /// historical contexts. `frames[0]` is the current frame, followed by
    /// the historical frames from nearest to farthest.
    pub fn encode(&self, frames: &[Array4<T>], reps: Option<&Array2<T>>) -> Result<(Encoded<T>, EncodeCache<T>)> {
        self.check_frames(frames, reps)?;
        let (_, _, h, w) = frames[0].dim();
        let mut caches = Vec::with_capacity(frames.len());
        let mut history = Vec::with_capacity(frames.len() - 1);
        let mut current = None;
        for (i, frame) in frames.iter().enumerate() {
            let (features, backbone) = self.backbone.forward(&reflect_pad_to_multiple(frame, OUTPUT_STRIDE));
            let mut fc = FrameCache { backbone, weights: None, recal: None };
            let mut weights = None;
            if let Some(dca) = &self.dca {
                let (wts, wc) = dca.predict_weights(&features);
                fc.weights = Some(wc);
                weights = Some(wts);
            }
            if i == 0 {
                current = Some((features, weights));
            } else {
                match self.config.temporal {
                    TemporalVariant::RawFeatures => history.push(features),
                    TemporalVariant::DatasetContext => {
                        let dca = self.dca.as_ref().expect("history requires the context head");
                        let reps = reps.expect("checked");
                        let coarse = aggregate_coarse(weights.as_ref().expect("weights"), reps);
                        let (ctx, rc) = dca.recalibrate(&features, &coarse);
                        fc.recal = Some(rc);
                        history.push(ctx);
                    }
                }
            }
            caches.push(fc);
        }
        let (features, weights) = current.expect("at least one frame");
        let within_context = (!self.config.within_image.is_identity())
            .then(|| self.config.within_image.forward(&features));
        Ok((
            Encoded { input_size: (h, w), features, within_context, weights, history },
            EncodeCache { frames: caches, reps: reps.cloned() },
        ))
    }

    /// Aggregation with the given weights, fusion, and classification head.
    /// Returns stride-8 logits.
    pub fn decode(
        &self,
        enc: &Encoded<T>,
        weights: Option<&Array4<T>>,
        reps: Option<&Array2<T>>,
    ) -> (Array4<T>, DecodeCache<T>) {
        let mut parts: Vec<&Array4<T>> = vec![&enc.features];
        if let Some(c) = &enc.within_context {
            parts.push(c);
        }
        let mut recal = None;
        let context;
        if let Some(dca) = &self.dca {
            let weights = weights.or(enc.weights.as_ref()).expect("aggregation weights");
            let coarse = aggregate_coarse(weights, reps.expect("representations"));
            let (ctx, rc) = dca.recalibrate(&enc.features, &coarse);
            context = ctx;
            recal = Some(rc);
            parts.push(&context);
        }
        parts.extend(enc.history.iter());
        let (fused, fusion_cache) = match &self.fusion {
            Some(f) => {
                let (y, c) = f.forward(&parts);
                (y, Some(c))
            }
            None => (enc.features.clone(), None),
        };
        let (pre, hidden) = self.head_hidden.forward(&fused);
        let hidden_out = relu(&pre);
        let (logits, out) = self.head_out.forward(&hidden_out);
        (logits, DecodeCache { recal, fusion: fusion_cache, hidden, hidden_out, out })
    }

    /// Full forward pass on a batch of frames with the given representations.
    pub fn forward_with_reps(&self, frames: &[Array4<T>], reps: Option<&Array2<T>>) -> Result<ForwardOutput<T>> {
        let (enc, _) = self.encode(frames, reps)?;
        let (logits, _) = self.decode(&enc, None, reps);
        let (h, w) = enc.input_size;
        Ok(ForwardOutput {
            probs: softmax_channels(&upsample_logits(&logits, h, w)),
            logits,
            weights: enc.weights,
            features: enc.features,
            fusion_width: self.fusion_width(),
        })
    }

    /// Forward pass drawing the category representations from `bank` with
    /// `seed`.
    pub fn forward(&self, images: &Array4<T>, bank: &MemoryBank, seed: u64) -> Result<ForwardOutput<T>> {
        self.check_bank(bank)?;
        let reps = bank.sample_representations(seed).as_real::<T>();
        self.forward_with_reps(std::slice::from_ref(images), self.dca.as_ref().map(|_| &reps))
    }

    pub fn check_bank(&self, bank: &MemoryBank) -> Result<()> {
        if bank.num_classes() != self.num_classes() || bank.feature_dim() != self.feature_dim() {
            return Err(Error::Config(format!(
                "bank is {}x{} but the model has K={} Z={}",
                bank.num_classes(),
                bank.feature_dim(),
                self.num_classes(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    /// Back-propagates from the stride-8 logits and, optionally, from the
    /// aggregation weights of the current frame. Parameter gradients are
    /// accumulated.
    pub fn backward(
        &mut self,
        enc_cache: &EncodeCache<T>,
        dec_cache: &DecodeCache<T>,
        dlogits: &Array4<T>,
        dweights: Option<&Array4<T>>,
    ) {
        let dhidden = self.head_out.backward(&dec_cache.out, dlogits, true).expect("input grad");
        let dpre = relu_backward(&dec_cache.hidden_out, &dhidden);
        let dfused = self.head_hidden.backward(&dec_cache.hidden, &dpre, true).expect("input grad");

        let mut grads = match (&mut self.fusion, &dec_cache.fusion) {
            (Some(f), Some(c)) => f.backward(c, &dfused),
            _ => vec![dfused],
        }
        .into_iter();
        let mut dfeatures = grads.next().expect("feature grad");
        if !self.config.within_image.is_identity() {
            let dctx = grads.next().expect("context grad");
            dfeatures += &self.config.within_image.backward(&dctx);
        }
        let reps = enc_cache.reps.as_ref();
        if let Some(dca) = self.dca.as_mut() {
            let dcontext = grads.next().expect("dataset context grad");
            let (dr, dcoarse) = dca.recalibrate_backward(dec_cache.recal.as_ref().expect("recal cache"), &dcontext);
            dfeatures += &dr;
            let mut dw = aggregate_coarse_backward(&dcoarse, reps.expect("reps"));
            if let Some(extra) = dweights {
                dw += extra;
            }
            let wc = enc_cache.frames[0].weights.as_ref().expect("weights cache");
            dfeatures += &dca.predict_weights_backward(wc, &dw);
        }
        self.backbone.backward(&enc_cache.frames[0].backbone, &dfeatures);

        for (fc, dhist) in enc_cache.frames[1..].iter().zip(grads) {
            let dfeat = match self.config.temporal {
                TemporalVariant::RawFeatures => dhist,
                TemporalVariant::DatasetContext => {
                    let dca = self.dca.as_mut().expect("context head");
                    let (mut dr, dcoarse) = dca.recalibrate_backward(fc.recal.as_ref().expect("recal"), &dhist);
                    let dw = aggregate_coarse_backward(&dcoarse, reps.expect("reps"));
                    dr += &dca.predict_weights_backward(fc.weights.as_ref().expect("weights"), &dw);
                    dr
                }
            };
            self.backbone.backward(&fc.backbone, &dfeat);
        }
    }

    /// Copy of the model in another float width.
    pub fn cast<U: Real>(&self) -> Segmentor<U> {
        Segmentor {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            dca: self.dca.as_ref().map(DcaHead::cast),
            fusion: self.fusion.as_ref().map(Fusion::cast),
            head_hidden: self.head_hidden.cast(),
            head_out: self.head_out.cast(),
        }
    }
}

impl<T: Real> Parameterized<T> for Segmentor<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out: Vec<_> = prefixed("backbone", self.backbone.params()).collect();
        if let Some(d) = &self.dca {
            out.extend(prefixed("dca", d.params()));
        }
        if let Some(f) = &self.fusion {
            out.extend(prefixed("fusion", f.params()));
        }
        out.extend(prefixed("head.hidden", self.head_hidden.params()));
        out.extend(prefixed("head.out", self.head_out.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out: Vec<_> = prefixed_mut("backbone", self.backbone.params_mut()).collect();
        if let Some(d) = &mut self.dca {
            out.extend(prefixed_mut("dca", d.params_mut()));
        }
        if let Some(f) = &mut self.fusion {
            out.extend(prefixed_mut("fusion", f.params_mut()));
        }
        out.extend(prefixed_mut("head.hidden", self.head_hidden.params_mut()));
        out.extend(prefixed_mut("head.out", self.head_out.params_mut()));
        out
    }
}

/// Row and column operators taking stride-8 maps to the (unpadded) input
/// resolution: 8× bilinear upsampling followed by the crop.
fn upsample_operators<T: Real>(h: usize, w: usize, out_h: usize, out_w: usize) -> (Array2<T>, Array2<T>) {
    let rows = bilinear_matrix::<T>(h * OUTPUT_STRIDE, h).slice(s![..out_h, ..]).to_owned();
    let cols = bilinear_matrix::<T>(w * OUTPUT_STRIDE, w).slice(s![..out_w, ..]).to_owned();
    (rows, cols)
}

/// 8× bilinear upsampling of stride-8 maps, cropped to `(out_h, out_w)`.
pub fn upsample_logits<T: Real>(x: &Array4<T>, out_h: usize, out_w: usize) -> Array4<T> {
    let (_, _, h, w) = x.dim();
    let (rows, cols) = upsample_operators(h, w, out_h, out_w);
    apply_separable(x, &rows, &cols)
}

fn upsample_backward<T: Real>(dy: &Array4<T>, h: usize, w: usize) -> Array4<T> {
    let (_, _, oh, ow) = dy.dim();
    let (rows, cols) = upsample_operators(h, w, oh, ow);
    apply_separable_backward(dy, &rows, &cols)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_w: f64,
    pub loss_o: f64,
    pub total: f64,
    pub alpha: f64,
    /// Set when every pixel was ignored and the loss was defined as zero.
    pub all_ignored: bool,
}

/// Gradients of the joint objective w.r.t. the stride-8 logits and weights.
#[derive(Debug, Clone)]
pub struct LossGrads<T> {
    pub dlogits: Array4<T>,
    pub dweights: Option<Array4<T>>,
}

const PROB_FLOOR: f64 = 1e-12;

/// `alpha · CE(UP(W), GT) + CE(UP(logits), GT)`, both averaged over the
/// non-ignored pixels of the batch.
pub fn joint_loss<T: Real>(
    logits: &Array4<T>,
    weights: Option<&Array4<T>>,
    labels: &Array3<u8>,
    alpha: f64,
    ignore_index: u8,
) -> Result<(LossReport, LossGrads<T>)> {
    let (b, k, h, w) = logits.dim();
    let (lb, lh, lw) = labels.dim();
    if lb != b || lh > h * OUTPUT_STRIDE || lw > w * OUTPUT_STRIDE {
        return Err(Error::Shape(format!(
            "labels {:?} do not match stride-8 logits {:?}",
            labels.dim(),
            logits.dim()
        )));
    }
    validate_labels(labels, k, ignore_index)?;
    let valid = labels.iter().filter(|&&l| l != ignore_index).count();
    if valid == 0 {
        log::warn!("every pixel in the batch is ignored; loss defined as zero");
        let report = LossReport { loss_w: 0.0, loss_o: 0.0, total: 0.0, alpha, all_ignored: true };
        return Ok((
            report,
            LossGrads { dlogits: Array4::zeros(logits.raw_dim()), dweights: weights.map(|x| Array4::zeros(x.raw_dim())) },
        ));
    }
    let inv_n = 1.0 / valid as f64;

    let probs = softmax_channels(&upsample_logits(logits, lh, lw));
    let mut loss_o = 0.0;
    let mut dfull = probs.clone();
    for ((bi, y, x), &l) in labels.indexed_iter() {
        if l == ignore_index {
            for c in 0..k {
                dfull[[bi, c, y, x]] = T::zero();
            }
            continue;
        }
        let p = probs[[bi, l as usize, y, x]].as_f64().max(PROB_FLOOR);
        loss_o -= p.ln();
        dfull[[bi, l as usize, y, x]] -= T::one();
    }
    loss_o *= inv_n;
    dfull.mapv_inplace(|v| v * T::of(inv_n));
    let dlogits = upsample_backward(&dfull, h, w);

    let (loss_w, dweights) = match weights {
        Some(wts) => {
            let up = upsample_logits(wts, lh, lw);
            let mut lw_sum = 0.0;
            let mut dup = Array4::<T>::zeros(up.raw_dim());
            for ((bi, y, x), &l) in labels.indexed_iter() {
                if l == ignore_index {
                    continue;
                }
                let p = up[[bi, l as usize, y, x]].as_f64().max(PROB_FLOOR);
                lw_sum -= p.ln();
                dup[[bi, l as usize, y, x]] = T::of(-inv_n / p);
            }
            (lw_sum * inv_n, Some(upsample_backward(&dup, h, w) * T::of(alpha)))
        }
        None => (0.0, None),
    };
    let report = LossReport { loss_w, loss_o, total: alpha * loss_w + loss_o, alpha, all_ignored: false };
    Ok((report, LossGrads { dlogits, dweights }))
}

/// Pixel-wise argmax of `[B, K, H, W]` scores.
pub fn argmax_labels<T: Real>(scores: &Array4<T>) -> Array3<u8> {
    let (b, k, h, w) = scores.dim();
    Array3::from_shape_fn((b, h, w), |(bi, y, x)| {
        let mut best = 0;
        for c in 1..k {
            if scores[[bi, c, y, x]] > scores[[bi, best, y, x]] {
                best = c;
            }
        }
        best as u8
    })
}
