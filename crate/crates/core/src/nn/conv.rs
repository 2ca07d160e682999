//! 2-D convolution via im2col and GEMM.

use super::param::LayerParams;
use crate::error::{shape_err, Error, Result};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: &Tensor<impl Scalar>, weights: &Tensor<impl Scalar>, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = input.dims4()?;
        let (out_c, in_c, kh, kw) = weights.dims4()?;
        if in_c != c {
            return Err(Error::Config(format!(
                "conv kernel expects {in_c} input channels, input has {c}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Config(format!("conv kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            out_c,
            k: kh,
            stride,
            pad,
            ho: conv_output_extent(h, kh, stride, pad),
            wo: conv_output_extent(w, kw, stride, pad),
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input image is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<S: Scalar>(x: &[S], g: &Geometry, cols: &mut [S]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let plane = g.col_cols();
    for ci in 0..g.c {
        let img = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &img[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], g: &Geometry, dx: &mut [S]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let plane = g.col_cols();
    for ci in 0..g.c {
        let img = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut img[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of an `(N, C, H, W)` input with `(C_out, C, k, k)` weights plus bias.
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    params: &LayerParams<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let weights = &params.weights.value;
    let g = Geometry::new(input, weights, stride, pad)?;
    let bias = params.bias.value.data();
    if bias.len() != g.out_c {
        return shape_err(format!("bias has {} entries for {} output channels", bias.len(), g.out_c));
    }
    let (rows, plane) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(&[g.n, g.out_c, g.ho, g.wo]);
    let mut cols = vec![S::zero(); if g.is_pointwise() { 0 } else { rows * plane }];
    let in_len = g.c * g.h * g.w;
    let out_len = g.out_c * plane;
    for i in 0..g.n {
        let x = &input.data()[i * in_len..(i + 1) * in_len];
        let y = &mut out.data_mut()[i * out_len..(i + 1) * out_len];
        for (co, chunk) in y.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[co]);
        }
        let cols_ref: &[S] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        matmul(g.out_c, rows, plane, weights.data(), false, cols_ref, false, y, true);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<S> {
    pub input: Tensor<S>,
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Gradients of a convolution given the upstream gradient and the forward input.
pub fn conv2d_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    cached_input: Option<&Tensor<S>>,
    params: &LayerParams<S>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<S>> {
    let input = cached_input.ok_or_else(|| Error::Usage("conv2d_backward called without a forward cache".into()))?;
    let weights = &params.weights.value;
    let g = Geometry::new(input, weights, stride, pad)?;
    if grad_out.shape() != [g.n, g.out_c, g.ho, g.wo] {
        return shape_err(format!(
            "grad_out {:?} does not match forward output {:?}",
            grad_out.shape(),
            [g.n, g.out_c, g.ho, g.wo]
        ));
    }
    let (rows, plane) = (g.col_rows(), g.col_cols());
    let in_len = g.c * g.h * g.w;
    let out_len = g.out_c * plane;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weights = Tensor::zeros(weights.shape());
    let mut d_bias = Tensor::zeros(&[g.out_c]);
    let mut cols = vec![S::zero(); rows * plane];
    let mut d_cols = vec![S::zero(); rows * plane];
    for i in 0..g.n {
        let x = &input.data()[i * in_len..(i + 1) * in_len];
        let dy = &grad_out.data()[i * out_len..(i + 1) * out_len];
        for (co, chunk) in dy.chunks(plane).enumerate() {
            d_bias.data_mut()[co] += chunk.iter().copied().sum::<S>();
        }
        let dx = &mut d_input.data_mut()[i * in_len..(i + 1) * in_len];
        if g.is_pointwise() {
            matmul(g.out_c, plane, rows, dy, false, x, true, d_weights.data_mut(), true);
            matmul(rows, g.out_c, plane, weights.data(), true, dy, false, dx, false);
        } else {
            im2col(x, &g, &mut cols);
            matmul(g.out_c, plane, rows, dy, false, &cols, true, d_weights.data_mut(), true);
            matmul(rows, g.out_c, plane, weights.data(), true, dy, false, &mut d_cols, false);
            col2im(&d_cols, &g, dx);
        }
    }
    Ok(ConvGrads {
        input: d_input,
        weights: d_weights,
        bias: d_bias,
    })
}

/// Convolution layer holding its parameters and geometry.
#[derive(Clone, Debug)]
pub struct Conv2d<S> {
    pub params: LayerParams<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        conv2d_forward(input, &self.params, self.stride, self.pad)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<S>, cached_input: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let g = conv2d_backward(grad_out, cached_input, &self.params, self.stride, self.pad)?;
        self.params.weights.accumulate(&g.weights)?;
        self.params.bias.accumulate(&g.bias)?;
        Ok(g.input)
    }

    pub fn out_channels(&self) -> usize {
        self.params.weights.value.shape()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(w: Tensor<f64>, out_c: usize) -> LayerParams<f64> {
        LayerParams::new(w, Tensor::zeros(&[out_c]))
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (oc, _, k, _) = w.dims4().unwrap();
        let ho = conv_output_extent(h, k, stride, pad);
        let wo = conv_output_extent(wd, k, stride, pad);
        let mut out = Tensor::zeros(&[n, oc, ho, wo]);
        for b in 0..n {
            for o in 0..oc {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((b * oc + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_on_ones() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let p = params(Tensor::full(&[1, 1, 1, 1], 1.0), 1);
        let y = conv2d_forward(&x, &p, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_kernel_annihilates() {
        let x = Tensor::from_vec(&[2, 2, 4, 4], (0..64).map(|i| i as f64 - 7.0).collect()).unwrap();
        let p = params(Tensor::zeros(&[3, 2, 3, 3]), 3);
        let y = conv2d_forward(&x, &p, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_with_averaging_kernel() {
        let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        let p = params(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0), 1);
        let y = conv2d_forward(&x, &p, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        for (got, want) in y.data().iter().zip([5.0, 6.0, 9.0, 10.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_convolution_with_stride_and_padding() {
        let x = Tensor::from_vec(&[2, 3, 7, 6], (0..252).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect())
            .unwrap();
        let w = Tensor::from_vec(&[4, 3, 3, 3], (0..108).map(|i| ((i * 13 % 29) as f64) / 14.0 - 1.0).collect())
            .unwrap();
        for &(s, p) in &[(1, 1), (2, 1), (2, 0), (1, 0)] {
            let y = conv2d_forward(&x, &params(w.clone(), 4), s, p).unwrap();
            let want = naive_conv(&x, &w, s, p);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let p = params(Tensor::zeros(&[1, 3, 3, 3]), 1);
        assert!(matches!(conv2d_forward(&x, &p, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn backward_requires_cache() {
        let p = params(Tensor::zeros(&[1, 1, 3, 3]), 1);
        let g = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(conv2d_backward(&g, None, &p, 1, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = Tensor::from_vec(&[1, 2, 5, 5], (0..50).map(|i| i as f64 * 0.1).collect()).unwrap();
        let p = params(Tensor::full(&[3, 2, 3, 3], 0.5), 3);
        let g = conv2d_backward(&Tensor::zeros(&[1, 3, 5, 5]), Some(&x), &p, 1, 1).unwrap();
        assert!(g.input.data().iter().chain(g.weights.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_gradient_through() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|i| i as f64).collect()).unwrap();
        let p = params(Tensor::full(&[1, 1, 1, 1], 1.0), 1);
        let up = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|i| (i as f64).sin()).collect()).unwrap();
        let g = conv2d_backward(&up, Some(&x), &p, 1, 0).unwrap();
        assert_eq!(g.input.data(), up.data());
    }
}
