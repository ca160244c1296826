//! Dense NCHW tensors and the hand-written layer kernels the detector needs.
//!
//! Every operation comes as an explicit forward/backward pair. Kernels are
//! generic over [`Scalar`] so the same code path can be checked in `f64`
//! against finite differences while training runs in `f32`.

use std::fmt::Debug;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid configuration for {op}: {reason}")]
    Config { op: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Floating point element type usable by the kernels.
pub trait Scalar:
    LinalgScalar + num_traits::Float + Default + Debug + Send + Sync + std::iter::Sum
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major `(n, c, h, w)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                expected: vec![len],
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Standard-normal entries from `seed`.
    pub fn randn(shape: [usize; 4], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64(rng.sample::<f64, _>(normal)))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    /// Contiguous `(c, h, w)` slice of image `n`.
    pub fn image(&self, n: usize) -> &[T] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn expect_shape(&self, op: &'static str, expected: [usize; 4]) -> Result<()> {
        if self.shape == expected {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                expected: expected.to_vec(),
                actual: self.shape.to_vec(),
            })
        }
    }

    /// Concatenate along the batch axis.
    pub fn concat_batch(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Config {
            op: "concat_batch",
            reason: "no tensors".into(),
        })?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            p.expect_shape("concat_batch", [p.n(), c, h, w])?;
            n += p.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Images `start..end` along the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        Self {
            shape: [end - start, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * stride..end * stride].to_vec(),
        }
    }

    /// Split channels `[0, a)`, `[a, b)`, ... into separate tensors.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        let total: usize = sizes.iter().sum();
        if total != self.c() {
            return Err(TensorError::ShapeMismatch {
                op: "split_channels",
                expected: vec![self.c()],
                actual: vec![total],
            });
        }
        let plane = self.h() * self.w();
        let mut out: Vec<Self> = sizes
            .iter()
            .map(|&c| Self::zeros([self.n(), c, self.h(), self.w()]))
            .collect();
        for n in 0..self.n() {
            let mut c0 = 0;
            for (part, &c) in out.iter_mut().zip(sizes) {
                let src = &self.image(n)[c0 * plane..(c0 + c) * plane];
                part.data[n * c * plane..(n + 1) * c * plane].copy_from_slice(src);
                c0 += c;
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::split_channels`].
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Config {
            op: "concat_channels",
            reason: "no tensors".into(),
        })?;
        let [n, _, h, w] = first.shape;
        let c: usize = parts.iter().map(|p| p.c()).sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c * plane);
        for i in 0..n {
            for p in parts {
                p.expect_shape("concat_channels", [n, p.c(), h, w])?;
                data.extend_from_slice(p.image(i));
            }
        }
        Self::from_vec([n, c, h, w], data)
    }
}

/// Output length of a sliding window along one axis.
pub fn window_out_len(
    op: &'static str,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(TensorError::Config {
            op,
            reason: format!("kernel {kernel} and stride {stride} must be positive"),
        });
    }
    if len + 2 * padding < kernel {
        return Err(TensorError::Config {
            op,
            reason: format!("kernel {kernel} does not fit input {len} with padding {padding}"),
        });
    }
    Ok((len + 2 * padding - kernel) / stride + 1)
}

/// Valid (unpadded) input range `[start, end)` covered by output index `o`.
#[inline]
pub fn window_range(
    o: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = (o * stride) as isize - padding as isize;
    let hi = lo + kernel as isize;
    (lo.max(0) as usize, hi.clamp(0, len as isize) as usize)
}

/// Geometry of a pooling window sweep, shared by max/avg/mask pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output `(oh, ow)`; errors if any window would contain no valid pixel.
    pub fn output_dims(&self, op: &'static str, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = window_out_len(op, h, self.kernel, self.stride, self.padding)?;
        let ow = window_out_len(op, w, self.kernel, self.stride, self.padding)?;
        for (o, len) in [(0, h), (oh - 1, h), (0, w), (ow - 1, w)] {
            let (a, b) = window_range(o, len, self.kernel, self.stride, self.padding);
            if a >= b {
                return Err(TensorError::Config {
                    op,
                    reason: format!("window {o} has no valid positions (padding {})", self.padding),
                });
            }
        }
        Ok((oh, ow))
    }
}

/// Weights, bias, their gradients and momentum buffers for one conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    /// `(out_channels, in_channels, k, k)`
    pub weights: Tensor<T>,
    /// `(1, out_channels, 1, 1)`
    pub bias: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
    pub velocity_weights: Tensor<T>,
    pub velocity_bias: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        bias.expect_shape("LayerParams::new", [1, weights.n(), 1, 1])?;
        Ok(Self {
            grad_weights: Tensor::zeros(weights.shape()),
            grad_bias: Tensor::zeros(bias.shape()),
            velocity_weights: Tensor::zeros(weights.shape()),
            velocity_bias: Tensor::zeros(bias.shape()),
            weights,
            bias,
        })
    }

    /// He-normal weights (std = sqrt(2 / fan_in)) and zero bias.
    pub fn he_init(out_c: usize, in_c: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let data = (0..out_c * in_c * k * k)
            .map(|_| T::from_f64(rng.sample::<f64, _>(rand_distr::StandardNormal) * std))
            .collect();
        let weights = Tensor::from_vec([out_c, in_c, k, k], data).expect("sized above");
        Self::new(weights, Tensor::zeros([1, out_c, 1, 1])).expect("sized above")
    }

    pub fn out_channels(&self) -> usize {
        self.weights.n()
    }
    pub fn in_channels(&self) -> usize {
        self.weights.c()
    }
    pub fn kernel(&self) -> usize {
        self.weights.h()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_weights.fill(T::zero());
        self.grad_bias.fill(T::zero());
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    oc: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(
        x: &Tensor<T>,
        p: &LayerParams<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [oc, ic, k, k2] = p.weights.shape();
        if k != k2 {
            return Err(TensorError::Config {
                op: "conv2d",
                reason: format!("non-square kernel {k}x{k2}"),
            });
        }
        if x.c() != ic {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![ic],
                actual: vec![x.c()],
            });
        }
        let oh = window_out_len("conv2d", x.h(), k, stride, padding)?;
        let ow = window_out_len("conv2d", x.w(), k, stride, padding)?;
        Ok(Self {
            c: ic,
            h: x.h(),
            w: x.w(),
            k,
            oc,
            oh,
            ow,
            stride,
            padding,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold one `(c, h, w)` image into a `(c·k·k, oh·ow)` matrix.
    fn im2col<T: Scalar>(&self, img: &[T]) -> Vec<T> {
        let cols = self.cols();
        let mut out = vec![T::zero(); self.rows() * cols];
        for c in 0..self.c {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Fold a `(c·k·k, oh·ow)` matrix back, summing overlapping taps.
    fn col2im<T: Scalar>(&self, cols_mat: &[T]) -> Vec<T> {
        let cols = self.cols();
        let mut img = vec![T::zero(); self.c * self.h * self.w];
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols_mat[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = c * self.h * self.w + iy as usize * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                img[base + ix as usize] = img[base + ix as usize] + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        img
    }
}

fn matmul<T: Scalar>(
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
    beta: T,
    c: &mut ArrayViewMut2<'_, T>,
) {
    general_mat_mul(T::one(), &a, &b, beta, c);
}

/// Zero-padded 2-D cross-correlation.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, p, stride, padding)?;
    let (rows, cols) = (g.rows(), g.cols());
    let w = ArrayView2::from_shape((g.oc, rows), p.weights.data()).expect("weight layout");
    let bias = p.bias.data();
    let per_image: Vec<Vec<T>> = (0..x.n())
        .into_par_iter()
        .map(|n| {
            let col = g.im2col(x.image(n));
            let colv = ArrayView2::from_shape((rows, cols), &col).expect("im2col layout");
            let mut out = vec![T::zero(); g.oc * cols];
            for (o, chunk) in out.chunks_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[o]);
            }
            let mut outv = ArrayViewMut2::from_shape((g.oc, cols), &mut out).expect("out layout");
            matmul(w, colv, T::one(), &mut outv);
            out
        })
        .collect();
    Tensor::from_vec([x.n(), g.oc, g.oh, g.ow], per_image.concat())?.ensure_finite("conv2d_forward")
}

/// Returns the input gradient and accumulates into `p.grad_weights` / `p.grad_bias`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &mut LayerParams<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, p, stride, padding)?;
    grad_out.expect_shape("conv2d_backward", [x.n(), g.oc, g.oh, g.ow])?;
    let (rows, cols) = (g.rows(), g.cols());
    let weights = p.weights.data();
    let per_image: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..x.n())
        .into_par_iter()
        .map(|n| {
            let col = g.im2col(x.image(n));
            let colv = ArrayView2::from_shape((rows, cols), &col).expect("im2col layout");
            let go = grad_out.image(n);
            let gov = ArrayView2::from_shape((g.oc, cols), go).expect("grad layout");
            let mut dw = vec![T::zero(); g.oc * rows];
            let mut dwv = ArrayViewMut2::from_shape((g.oc, rows), &mut dw).expect("dw layout");
            matmul(gov, colv.t(), T::zero(), &mut dwv);
            let db: Vec<T> = go
                .chunks(cols)
                .map(|r| T::from_f64(r.iter().map(|v| v.as_f64()).sum()))
                .collect();
            let wv = ArrayView2::from_shape((g.oc, rows), weights).expect("weight layout");
            let mut dcol = vec![T::zero(); rows * cols];
            let mut dcolv = ArrayViewMut2::from_shape((rows, cols), &mut dcol).expect("dcol layout");
            matmul(wv.t(), gov, T::zero(), &mut dcolv);
            (g.col2im(&dcol), dw, db)
        })
        .collect();

    let mut dx = Vec::with_capacity(x.len());
    for (dxi, dw, db) in per_image {
        dx.extend_from_slice(&dxi);
        for (acc, v) in p.grad_weights.data_mut().iter_mut().zip(dw) {
            *acc = *acc + v;
        }
        for (acc, v) in p.grad_bias.data_mut().iter_mut().zip(db) {
            *acc = *acc + v;
        }
    }
    if !p.grad_weights.all_finite() || !p.grad_bias.all_finite() {
        return Err(TensorError::NonFinite {
            op: "conv2d_backward",
        });
    }
    Tensor::from_vec(x.shape(), dx)?.ensure_finite("conv2d_backward")
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes only where `x > 0`.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape("relu_backward", x.shape())?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Max pooling over valid positions. Returns the output and, per output
/// element, the flat input index that won (first occurrence in row-major
/// order on ties).
pub fn maxpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    geom: PoolGeometry,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (oh, ow) = geom.output_dims("maxpool2d", x.h(), x.w())?;
    let mut out = Tensor::zeros([x.n(), x.c(), oh, ow]);
    let mut argmax = vec![0usize; out.len()];
    let mut idx = 0;
    for n in 0..x.n() {
        for c in 0..x.c() {
            for oy in 0..oh {
                let (y0, y1) = window_range(oy, x.h(), geom.kernel, geom.stride, geom.padding);
                for ox in 0..ow {
                    let (x0, x1) = window_range(ox, x.w(), geom.kernel, geom.stride, geom.padding);
                    let mut best = x.offset(n, c, y0, x0);
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let o = x.offset(n, c, y, xx);
                            if x.data[o] > x.data[best] {
                                best = o;
                            }
                        }
                    }
                    out.data[idx] = x.data[best];
                    argmax[idx] = best;
                    idx += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: [usize; 4],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(TensorError::ShapeMismatch {
            op: "maxpool2d_backward",
            expected: vec![argmax.len()],
            actual: vec![grad_out.len()],
        });
    }
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data[i] = dx.data[i] + g;
    }
    Ok(dx)
}

/// Mean over valid (unpadded) positions of each window.
pub fn avgpool2d_forward<T: Scalar>(x: &Tensor<T>, geom: PoolGeometry) -> Result<Tensor<T>> {
    let (oh, ow) = geom.output_dims("avgpool2d", x.h(), x.w())?;
    let mut out = Tensor::zeros([x.n(), x.c(), oh, ow]);
    let mut idx = 0;
    for n in 0..x.n() {
        for c in 0..x.c() {
            for oy in 0..oh {
                let (y0, y1) = window_range(oy, x.h(), geom.kernel, geom.stride, geom.padding);
                for ox in 0..ow {
                    let (x0, x1) = window_range(ox, x.w(), geom.kernel, geom.stride, geom.padding);
                    let mut sum = 0.0f64;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            sum += x.at(n, c, y, xx).as_f64();
                        }
                    }
                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                    out.data[idx] = T::from_f64(sum / count);
                    idx += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn avgpool2d_backward<T: Scalar>(
    input_shape: [usize; 4],
    geom: PoolGeometry,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n_, c_, h, w] = input_shape;
    let (oh, ow) = geom.output_dims("avgpool2d", h, w)?;
    grad_out.expect_shape("avgpool2d_backward", [n_, c_, oh, ow])?;
    let mut dx = Tensor::zeros(input_shape);
    let mut idx = 0;
    for n in 0..n_ {
        for c in 0..c_ {
            for oy in 0..oh {
                let (y0, y1) = window_range(oy, h, geom.kernel, geom.stride, geom.padding);
                for ox in 0..ow {
                    let (x0, x1) = window_range(ox, w, geom.kernel, geom.stride, geom.padding);
                    let share = grad_out.data[idx] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let o = dx.offset(n, c, y, xx);
                            dx.data[o] = dx.data[o] + share;
                        }
                    }
                    idx += 1;
                }
            }
        }
    }
    Ok(dx)
}

/// Scalar loss plus its gradient with respect to the prediction tensor.
#[derive(Clone, Debug)]
pub struct LossOutput<T = f32> {
    pub loss: f64,
    pub grad: Tensor<T>,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits over every element.
pub fn loss_bce_logits<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<LossOutput<T>> {
    targets.expect_shape("loss_bce_logits", logits.shape())?;
    if logits.is_empty() {
        return Ok(LossOutput {
            loss: 0.0,
            grad: Tensor::zeros(logits.shape()),
        });
    }
    let count = logits.len() as f64;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.data().iter().zip(targets.data()) {
        let (z, t) = (z.as_f64(), t.as_f64());
        total += softplus(z) - z * t;
        grad.push(T::from_f64((sigmoid(z) - t) / count));
    }
    Ok(LossOutput {
        loss: total / count,
        grad: Tensor::from_vec(logits.shape(), grad)?,
    })
}

/// Softmax cross-entropy over the channel axis at each valid cell, averaged
/// over valid cells. `class_targets` and `valid` are indexed by
/// `(n·h + y)·w + x`.
pub fn loss_softmax_ce<T: Scalar>(
    logits: &Tensor<T>,
    class_targets: &[usize],
    valid: &[bool],
) -> Result<LossOutput<T>> {
    let [n_, classes, h, w] = logits.shape();
    let cells = n_ * h * w;
    if class_targets.len() != cells || valid.len() != cells {
        return Err(TensorError::ShapeMismatch {
            op: "loss_softmax_ce",
            expected: vec![cells],
            actual: vec![class_targets.len(), valid.len()],
        });
    }
    let mut grad = Tensor::zeros(logits.shape());
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Ok(LossOutput { loss: 0.0, grad });
    }
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; classes];
    for n in 0..n_ {
        for y in 0..h {
            for x in 0..w {
                let cell = (n * h + y) * w + x;
                if !valid[cell] {
                    continue;
                }
                let target = class_targets[cell];
                if target >= classes {
                    return Err(TensorError::Config {
                        op: "loss_softmax_ce",
                        reason: format!("class target {target} out of range {classes}"),
                    });
                }
                let max = (0..classes)
                    .map(|c| logits.at(n, c, y, x).as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (c, p) in probs.iter_mut().enumerate() {
                    *p = (logits.at(n, c, y, x).as_f64() - max).exp();
                    z += *p;
                }
                total += z.ln() + max - logits.at(n, target, y, x).as_f64();
                for (c, p) in probs.iter().enumerate() {
                    let indicator = if c == target { 1.0 } else { 0.0 };
                    let o = grad.offset(n, c, y, x);
                    grad.data[o] = T::from_f64((p / z - indicator) / n_valid as f64);
                }
            }
        }
    }
    Ok(LossOutput {
        loss: total / n_valid as f64,
        grad,
    })
}

/// Smooth-L1 (Huber with transition `beta`) averaged over every channel of
/// every valid cell.
pub fn loss_smooth_l1<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    valid: &[bool],
    beta: f64,
) -> Result<LossOutput<T>> {
    target.expect_shape("loss_smooth_l1", pred.shape())?;
    let [n_, ch, h, w] = pred.shape();
    if valid.len() != n_ * h * w {
        return Err(TensorError::ShapeMismatch {
            op: "loss_smooth_l1",
            expected: vec![n_ * h * w],
            actual: vec![valid.len()],
        });
    }
    let mut grad = Tensor::zeros(pred.shape());
    let n_valid = valid.iter().filter(|&&v| v).count() * ch;
    if n_valid == 0 {
        return Ok(LossOutput { loss: 0.0, grad });
    }
    let mut total = 0.0f64;
    for n in 0..n_ {
        for c in 0..ch {
            for y in 0..h {
                for x in 0..w {
                    if !valid[(n * h + y) * w + x] {
                        continue;
                    }
                    let o = pred.offset(n, c, y, x);
                    let d = pred.data[o].as_f64() - target.data[o].as_f64();
                    let (l, g) = if d.abs() < beta {
                        (0.5 * d * d / beta, d / beta)
                    } else {
                        (d.abs() - 0.5 * beta, d.signum())
                    };
                    total += l;
                    grad.data[o] = T::from_f64(g / n_valid as f64);
                }
            }
        }
    }
    Ok(LossOutput {
        loss: total / n_valid as f64,
        grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(TensorError::Config {
                op: "OptimizerConfig",
                reason,
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        Ok(())
    }
}

/// `v <- momentum*v + grad + wd*w; w <- w - lr*v`, then zero the gradients.
pub fn sgd_step<'a, T: Scalar + 'a>(
    params: impl IntoIterator<Item = &'a mut LayerParams<T>>,
    cfg: &OptimizerConfig,
) {
    let lr = T::from_f64(cfg.learning_rate as f64);
    let mu = T::from_f64(cfg.momentum as f64);
    let wd = T::from_f64(cfg.weight_decay as f64);
    for p in params {
        let LayerParams {
            weights,
            bias,
            grad_weights,
            grad_bias,
            velocity_weights,
            velocity_bias,
        } = p;
        for (w, (g, v)) in [(weights, (grad_weights, velocity_weights)), (bias, (grad_bias, velocity_bias))] {
            for ((w, g), v) in w.data.iter_mut().zip(g.data.iter_mut()).zip(v.data.iter_mut()) {
                *v = mu * *v + *g + wd * *w;
                *w = *w - lr * *v;
                *g = T::zero();
            }
        }
    }
}

/// An operation with a hand-written backward, checkable against finite
/// differences.
pub trait Differentiable {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64>;
    fn backward(&self, x: &Tensor<f64>, grad_out: &Tensor<f64>) -> Tensor<f64>;
}

/// Adapter turning a pair of closures into a [`Differentiable`].
pub struct FnOp<F, B> {
    pub forward: F,
    pub backward: B,
}

impl<F, B> Differentiable for FnOp<F, B>
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
    B: Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
{
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        (self.forward)(x)
    }
    fn backward(&self, x: &Tensor<f64>, grad_out: &Tensor<f64>) -> Tensor<f64> {
        (self.backward)(x, grad_out)
    }
}

/// Central-difference gradient check of `op` at `input`.
///
/// The op is reduced to a scalar with a fixed random projection of its
/// output; the analytic gradient is `op.backward(input, projection)`.
/// Returns the max relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check(op: &impl Differentiable, input: &Tensor<f64>, epsilon: f64) -> f64 {
    grad_check_where(op, input, epsilon, |_| true)
}

/// As [`grad_check`], but only input entries for which `include` returns
/// true are compared (used to skip kinks and ties).
pub fn grad_check_where(
    op: &impl Differentiable,
    input: &Tensor<f64>,
    epsilon: f64,
    include: impl Fn(usize) -> bool,
) -> f64 {
    let out = op.forward(input);
    let projection = Tensor::<f64>::randn(out.shape(), 0x5eed_9a0d);
    let objective = |x: &Tensor<f64>| -> f64 {
        op.forward(x)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let analytic = op.backward(input, &projection);
    let mut worst = 0.0f64;
    let mut probe = input.clone();
    for i in 0..input.len() {
        if !include(i) {
            continue;
        }
        let orig = probe.data[i];
        probe.data[i] = orig + epsilon;
        let plus = objective(&probe);
        probe.data[i] = orig - epsilon;
        let minus = objective(&probe);
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}
