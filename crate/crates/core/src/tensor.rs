//! Dense tensor helpers shared by the layers.
//!
//! Feature maps are `Array4<T>` in `[batch, channel, height, width]` layout.
//! Everything here is generic over [`Real`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference checks.

use ndarray::{s, Array2, Array4, ArrayView2, Axis, NdFloat, Zip};

/// Floating point element type of every tensor in the crate.
pub trait Real: NdFloat + Default + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Softmax over the channel axis of a `[B, C, H, W]` tensor.
pub fn softmax_channels<T: Real>(logits: &Array4<T>) -> Array4<T> {
    let mut out = logits.clone();
    let (b, c, h, w) = logits.dim();
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut max = T::neg_infinity();
                for ci in 0..c {
                    max = max.max(out[[bi, ci, y, x]]);
                }
                let mut sum = T::zero();
                for ci in 0..c {
                    let e = (out[[bi, ci, y, x]] - max).exp();
                    out[[bi, ci, y, x]] = e;
                    sum += e;
                }
                for ci in 0..c {
                    out[[bi, ci, y, x]] /= sum;
                }
            }
        }
    }
    out
}

/// Backward of [`softmax_channels`] given its output `probs`.
pub fn softmax_channels_backward<T: Real>(probs: &Array4<T>, dprobs: &Array4<T>) -> Array4<T> {
    let dot = (probs * dprobs).sum_axis(Axis(1)).insert_axis(Axis(1));
    probs * &(dprobs - &dot)
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<T: Real>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward of [`softmax_rows`] given its output `probs`.
pub fn softmax_rows_backward<T: Real>(probs: &Array2<T>, dprobs: &Array2<T>) -> Array2<T> {
    let dot = (probs * dprobs).sum_axis(Axis(1)).insert_axis(Axis(1));
    probs * &(dprobs - &dot)
}

/// Interpolation matrix `[out, in]` for 1-D bilinear resampling with
/// half-pixel centres (the `align_corners = false` convention).
pub fn bilinear_matrix<T: Real>(out_len: usize, in_len: usize) -> Array2<T> {
    let mut m = Array2::zeros((out_len, in_len));
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let lambda = src - i0 as f64;
        m[[o, i0]] += T::of(1.0 - lambda);
        m[[o, i1]] += T::of(lambda);
    }
    m
}

/// Averaging matrix `[bins, in]` of adaptive average pooling along one axis.
pub fn adaptive_pool_matrix<T: Real>(bins: usize, in_len: usize) -> Array2<T> {
    let mut m = Array2::zeros((bins, in_len));
    for b in 0..bins {
        let start = b * in_len / bins;
        let end = ((b + 1) * in_len).div_ceil(bins);
        let weight = T::of(1.0 / (end - start) as f64);
        for i in start..end {
            m[[b, i]] = weight;
        }
    }
    m
}

/// Applies `rows · X · colsᵀ` to every `[H, W]` plane of `x`.
pub fn apply_separable<T: Real>(x: &Array4<T>, rows: &Array2<T>, cols: &Array2<T>) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    assert_eq!(rows.ncols(), h, "row operator does not match height");
    assert_eq!(cols.ncols(), w, "column operator does not match width");
    let cols_t = cols.t();
    let mut out = Array4::zeros((b, c, rows.nrows(), cols.nrows()));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.slice(s![bi, ci, .., ..]);
            let res = rows.dot(&plane).dot(&cols_t);
            out.slice_mut(s![bi, ci, .., ..]).assign(&res);
        }
    }
    out
}

/// Transpose of [`apply_separable`] with respect to `x`.
pub fn apply_separable_backward<T: Real>(
    dy: &Array4<T>,
    rows: &Array2<T>,
    cols: &Array2<T>,
) -> Array4<T> {
    apply_separable(dy, &rows.t().to_owned(), &cols.t().to_owned())
}

/// Bilinear resize of every plane to `(out_h, out_w)`.
pub fn resize_bilinear<T: Real>(x: &Array4<T>, out_h: usize, out_w: usize) -> Array4<T> {
    let (_, _, h, w) = x.dim();
    apply_separable(x, &bilinear_matrix(out_h, h), &bilinear_matrix(out_w, w))
}

/// Reflect-pads the bottom and right edges so both spatial dims are
/// multiples of `multiple`.
pub fn reflect_pad_to_multiple<T: Real>(x: &Array4<T>, multiple: usize) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return x.clone();
    }
    let reflect = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let r = i % period;
        if r < n {
            r
        } else {
            period - r
        }
    };
    Array4::from_shape_fn((b, c, ph, pw), |(bi, ci, y, xx)| {
        x[[bi, ci, reflect(y, h), reflect(xx, w)]]
    })
}

/// `[K, H, W]`-style one-hot encoding of a label map batch, with ignored
/// pixels mapped to a uniform row.
pub fn one_hot_or_uniform<T: Real>(
    labels: &ndarray::Array3<u8>,
    num_classes: usize,
    ignore_index: u8,
) -> Array4<T> {
    let (b, h, w) = labels.dim();
    let uniform = T::of(1.0 / num_classes as f64);
    let mut out = Array4::zeros((b, num_classes, h, w));
    for ((bi, y, x), &l) in labels.indexed_iter() {
        if l == ignore_index || l as usize >= num_classes {
            for c in 0..num_classes {
                out[[bi, c, y, x]] = uniform;
            }
        } else {
            out[[bi, l as usize, y, x]] = T::one();
        }
    }
    out
}

/// Nearest-neighbour downsampling of a label batch by an integer stride,
/// sampling the centre pixel of each cell.
pub fn downsample_labels_nearest(labels: &ndarray::Array3<u8>, out_h: usize, out_w: usize) -> ndarray::Array3<u8> {
    let (b, h, w) = labels.dim();
    ndarray::Array3::from_shape_fn((b, out_h, out_w), |(bi, y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize).min(w - 1);
        labels[[bi, sy, sx]]
    })
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Array4<T>]) -> Array4<T> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("channel concat with mismatched shapes")
}

/// Splits a channel-concatenated gradient back into pieces of the given widths.
pub fn split_channels<T: Real>(x: &Array4<T>, widths: &[usize]) -> Vec<Array4<T>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&wd| {
            let part = x.slice(s![.., start..start + wd, .., ..]).to_owned();
            start += wd;
            part
        })
        .collect()
}

/// `true` when every element is finite.
pub fn all_finite<T: Real>(x: &Array4<T>) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Converts between float widths.
pub fn cast4<A: Real, B: Real>(x: &Array4<A>) -> Array4<B> {
    x.mapv(|v| B::of(v.as_f64()))
}

pub fn cast2<A: Real, B: Real>(x: &ArrayView2<A>) -> Array2<B> {
    x.mapv(|v| B::of(v.as_f64()))
}

/// Element-wise `a += b`.
pub fn add_assign4<T: Real>(a: &mut Array4<T>, b: &Array4<T>) {
    Zip::from(a).and(b).for_each(|x, &y| *x += y);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bilinear_rows_are_convex() {
        let m: Array2<f64> = bilinear_matrix(64, 8);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn bilinear_matches_half_pixel_convention() {
        // 2 -> 4: outputs sit at source coords -0.25(clamped), 0.25, 0.75, 1.25(clamped)
        let m: Array2<f64> = bilinear_matrix(4, 2);
        let x = array![10.0, 20.0];
        let y = m.dot(&x);
        assert_eq!(y.to_vec(), vec![10.0, 12.5, 17.5, 20.0]);
    }

    #[test]
    fn adaptive_pool_handles_uneven_bins() {
        let m: Array2<f64> = adaptive_pool_matrix(2, 3);
        assert_eq!(m, array![[0.5, 0.5, 0.0], [0.0, 0.5, 0.5]]);
    }

    #[test]
    fn separable_backward_is_adjoint() {
        let rows: Array2<f64> = bilinear_matrix(5, 3);
        let cols: Array2<f64> = bilinear_matrix(7, 2);
        let x = Array4::from_shape_fn((1, 2, 3, 2), |(_, c, y, x)| (c * 7 + y * 3 + x) as f64 * 0.1);
        let dy = Array4::from_shape_fn((1, 2, 5, 7), |(_, c, y, x)| ((c + y * x) % 5) as f64 - 2.0);
        let lhs = (&apply_separable(&x, &rows, &cols) * &dy).sum();
        let rhs = (&x * &apply_separable_backward(&dy, &rows, &cols)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn reflect_pad_mirrors_edges() {
        let x = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, y, x)| (y * 3 + x) as f64);
        let p = reflect_pad_to_multiple(&x, 4);
        assert_eq!(p.dim(), (1, 1, 4, 4));
        assert_eq!(p[[0, 0, 3, 0]], x[[0, 0, 1, 0]]);
        assert_eq!(p[[0, 0, 0, 3]], x[[0, 0, 0, 1]]);
    }

    #[test]
    fn channel_softmax_sums_to_one() {
        let x = Array4::from_shape_fn((2, 5, 3, 3), |(b, c, y, x)| (b + c * y) as f64 - x as f64);
        let p = softmax_channels(&x);
        for v in p.sum_axis(Axis(1)).iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
