use ndarray::{s, Array2, Array4, Axis, Ix2};
use rand::Rng;

use super::{Param, Parameterized};
use crate::tensor::Real;

/// 2-D convolution with square kernels, zero padding, and bias.
///
/// A 1×1 convolution with stride 1 is a per-pixel linear layer, which is how
/// every projection in the context heads is expressed.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// Saved im2col matrices, one per batch element.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<Array2<T>>,
    in_dim: (usize, usize, usize, usize),
}

impl<T: Real> Conv2d<T> {
    /// He-uniform initialized convolution; bias starts at zero.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self::with_bound(in_ch, out_ch, kernel, stride, pad, bound, rng)
    }

    pub fn with_bound<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::uniform(&[out_ch, in_ch, kernel, kernel], bound, rng),
            bias: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// Per-pixel linear layer.
    pub fn pointwise<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self::new(in_ch, out_ch, 1, 1, 0, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.kernel * self.kernel))
            .expect("conv weight is contiguous")
            .into_dimensionality::<Ix2>()
            .expect("2-D weight view")
    }

    fn im2col(&self, x: &Array4<T>, bi: usize, ho: usize, wo: usize) -> Array2<T> {
        let (_, c, h, w) = x.dim();
        let k = self.kernel;
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return x
                .slice(s![bi, .., .., ..])
                .to_owned()
                .into_shape_with_order((c, h * w))
                .expect("contiguous plane");
        }
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        let (s_, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..c {
            let plane = x.slice(s![bi, ci, .., ..]);
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..ho {
                        let iy = oy as isize * s_ + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize * s_ + kj as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[oy * wo + ox] = plane[[iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<T>, dx: &mut Array4<T>, bi: usize, ho: usize, wo: usize) {
        let (_, c, h, w) = dx.dim();
        let k = self.kernel;
        let (s_, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = cols.row((ci * k + ki) * k + kj);
                    for oy in 0..ho {
                        let iy = oy as isize * s_ + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize * s_ + kj as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[bi, ci, iy as usize, ix as usize]] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let weight = self.weight2();
        let bias = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1-D bias");
        let mut out = Array4::zeros((b, self.out_ch, ho, wo));
        let mut cache = Vec::with_capacity(b);
        for bi in 0..b {
            let cols = self.im2col(x, bi, ho, wo);
            let mut y = weight.dot(&cols);
            y += &bias.view().insert_axis(Axis(1));
            out.slice_mut(s![bi, .., .., ..])
                .assign(&y.into_shape_with_order((self.out_ch, ho, wo)).expect("shape"));
            cache.push(cols);
        }
        (out, ConvCache { cols: cache, in_dim: (b, c, h, w) })
    }

    /// Forward pass without keeping the backward cache.
    pub fn apply(&self, x: &Array4<T>) -> Array4<T> {
        self.forward(x).0
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(
        &mut self,
        cache: &ConvCache<T>,
        dy: &Array4<T>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        let (b, _, h, w) = cache.in_dim;
        let (_, _, ho, wo) = dy.dim();
        let ck = self.in_ch * self.kernel * self.kernel;
        let mut dw = Array2::<T>::zeros((self.out_ch, ck));
        let mut db = ndarray::Array1::<T>::zeros(self.out_ch);
        let mut dx = need_input_grad.then(|| Array4::zeros((b, self.in_ch, h, w)));
        for bi in 0..b {
            let dyb = dy
                .slice(s![bi, .., .., ..])
                .to_owned()
                .into_shape_with_order((self.out_ch, ho * wo))
                .expect("shape");
            dw += &dyb.dot(&cache.cols[bi].t());
            db += &dyb.sum_axis(Axis(1));
            if let Some(dx) = dx.as_mut() {
                let dcols = self.weight2().t().dot(&dyb);
                if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
                    dx.slice_mut(s![bi, .., .., ..])
                        .assign(&dcols.into_shape_with_order((self.in_ch, h, w)).expect("shape"));
                } else {
                    self.col2im(&dcols, dx, bi, ho, wo);
                }
            }
        }
        let dw = dw
            .into_shape_with_order(self.weight.grad.raw_dim())
            .expect("weight grad shape");
        self.weight.grad += &dw;
        self.bias.grad += &db.into_dyn();
        dx
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel;
        Array4::from_shape_fn((b, conv.out_ch, ho, wo), |(bi, o, oy, ox)| {
            let mut acc = conv.bias.value[[o]];
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * conv.stride + ki) as isize - conv.pad as isize;
                        let ix = (ox * conv.stride + kj) as isize - conv.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight.value[[o, ci, ki, kj]]
                                * x[[bi, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, s, p, &mut rng);
            conv.bias = Param::uniform(&[4], 1.0, &mut rng);
            let x = Array4::from_shape_fn((2, 3, 7, 6), |_| rng.random_range(-1.0..1.0));
            let fast = conv.apply(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 5, 5), |_| rng.random_range(-1.0..1.0));
        let (y, cache) = conv.forward(&x);
        let dy = Array4::from_shape_fn(y.raw_dim(), |_| rng.random_range(-1.0..1.0));
        let dx = conv.backward(&cache, &dy, true).unwrap();
        let loss = |c: &Conv2d<f64>, x: &Array4<f64>| (&c.apply(x) * &dy).sum();
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 4, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "dx {idx:?}: {fd} vs {}", dx[idx]);
        }
        let grad = conv.weight.grad.clone();
        for idx in [[0usize, 0, 0, 0], [2, 1, 1, 2]] {
            let mut cp = conv.clone();
            cp.weight.value[&idx[..]] += h;
            let mut cm = conv.clone();
            cm.weight.value[&idx[..]] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - grad[&idx[..]]).abs() < 1e-6);
        }
    }
}
