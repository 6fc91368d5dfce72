//! Context computed from the current image alone.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::tensor::{adaptive_pool_matrix, apply_separable, apply_separable_backward, bilinear_matrix, Real};

pub const PYRAMID_BINS: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithinImageContext {
    /// No context module; features pass through unchanged (FCN-style).
    Identity,
    /// Average of multi-scale pooled maps resized back to the input size.
    PyramidPooling,
}

impl WithinImageContext {
    pub fn is_identity(self) -> bool {
        matches!(self, WithinImageContext::Identity)
    }

    pub fn forward<T: Real>(self, features: &Array4<T>) -> Array4<T> {
        match self {
            WithinImageContext::Identity => features.clone(),
            WithinImageContext::PyramidPooling => {
                let (_, _, h, w) = features.dim();
                let ops = pyramid_operators::<T>(h, w);
                let scale = T::of(1.0 / ops.len() as f64);
                let mut out = Array4::zeros(features.raw_dim());
                for (rows, cols) in &ops {
                    out += &apply_separable(features, rows, cols);
                }
                out * scale
            }
        }
    }

    pub fn backward<T: Real>(self, dout: &Array4<T>) -> Array4<T> {
        match self {
            WithinImageContext::Identity => dout.clone(),
            WithinImageContext::PyramidPooling => {
                let (_, _, h, w) = dout.dim();
                let ops = pyramid_operators::<T>(h, w);
                let scale = T::of(1.0 / ops.len() as f64);
                let mut out = Array4::zeros(dout.raw_dim());
                for (rows, cols) in &ops {
                    out += &apply_separable_backward(dout, rows, cols);
                }
                out * scale
            }
        }
    }
}

/// Pool-then-upsample operator pairs `(rows, cols)` for each pyramid level.
fn pyramid_operators<T: Real>(h: usize, w: usize) -> Vec<(Array2<T>, Array2<T>)> {
    PYRAMID_BINS
        .iter()
        .map(|&b| {
            let (bh, bw) = (b.min(h), b.min(w));
            let rows = bilinear_matrix::<T>(h, bh).dot(&adaptive_pool_matrix::<T>(bh, h));
            let cols = bilinear_matrix::<T>(w, bw).dot(&adaptive_pool_matrix::<T>(bw, w));
            (rows, cols)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_bit_exact() {
        let x = Array4::from_shape_fn((1, 3, 4, 4), |(_, c, y, x)| (c + y * x) as f32 * 0.37);
        assert_eq!(WithinImageContext::Identity.forward(&x), x);
    }

    #[test]
    fn pyramid_preserves_constants_and_shape() {
        let x = Array4::from_elem((2, 5, 8, 8), 1.25f64);
        let y = WithinImageContext::PyramidPooling.forward(&x);
        assert_eq!(y.dim(), (2, 5, 8, 8));
        assert!(y.iter().all(|&v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn pyramid_backward_is_the_adjoint() {
        let x = Array4::from_shape_fn((1, 2, 6, 5), |(_, c, y, x)| ((c * 31 + y * 7 + x * 3) % 11) as f64);
        let dy = Array4::from_shape_fn((1, 2, 6, 5), |(_, c, y, x)| ((c + y + 2 * x) % 5) as f64 - 2.0);
        let ctx = WithinImageContext::PyramidPooling;
        let lhs = (&ctx.forward(&x) * &dy).sum();
        let rhs = (&x * &ctx.backward(&dy)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
