//! Minimal layer toolkit with explicit backward passes.
//!
//! Layers are pure in the forward direction: `forward(&self, ..)` returns the
//! output together with whatever the backward pass needs. `backward(&mut self,
//! ..)` accumulates parameter gradients into the layer and returns the input
//! gradient, so one layer can be applied to several inputs (shared weights)
//! and back-propagated once per application.

mod conv;

pub use conv::{Conv2d, ConvCache};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::tensor::Real;

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// Uniform fan-in initialization in `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            T::of(rng.random_range(-bound..=bound))
        });
        Self::new(value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            value: self.value.mapv(|v| U::of(v.as_f64())),
            grad: self.grad.mapv(|v| U::of(v.as_f64())),
        }
    }
}

/// Anything that owns named parameters.
pub trait Parameterized<T> {
    /// Parameters in a fixed, deterministic order.
    fn params(&self) -> Vec<(String, &Param<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)>;

    fn zero_grad(&mut self)
    where
        T: Real,
    {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize
    where
        T: Real,
    {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn prefixed<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a Param<T>)>,
) -> impl Iterator<Item = (String, &'a Param<T>)> {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, p)| (format!("{prefix}.{n}"), p))
}

pub(crate) fn prefixed_mut<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a mut Param<T>)>,
) -> impl Iterator<Item = (String, &'a mut Param<T>)> {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, p)| (format!("{prefix}.{n}"), p))
}

pub fn relu<T: Real, D: ndarray::Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of [`relu`] given its output.
pub fn relu_backward<T: Real, D: ndarray::Dimension>(
    out: &ndarray::Array<T, D>,
    dy: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}
