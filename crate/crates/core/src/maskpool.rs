//! Boundary-aware mask pooling.
//!
//! Each pooling window counts the foreground and background pixels of a
//! binary mask over its valid (unpadded) positions. When foreground pixels
//! are at least as many as background pixels, the window emits the mean of
//! the foreground activations; otherwise the mean of the background ones.
//! The mask is a constant input and receives no gradient.
//!
//! Also here: mask downsampling to feature strides, background activation
//! scaling used by the perturbation experiments, and iterated morphology
//! used by the boundary ablation.

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{window_range, PoolGeometry, Scalar, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("non-binary mask: value {value} at index {index}")]
    NonBinary { value: u8, index: usize },
    #[error("mask shape {mask:?} does not match feature map {feature:?}")]
    ShapeMismatch {
        mask: (usize, usize),
        feature: (usize, usize),
    },
    #[error("expected {expected} masks for the batch, got {actual}")]
    BatchMismatch { expected: usize, actual: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = MaskError> = std::result::Result<T, E>;

/// Per-pixel foreground indicator, row-major `(height, width)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    /// Builds a mask from 0/1 values; any other value is rejected.
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(MaskError::Config(format!(
                "mask buffer of {} values for {height}x{width}",
                bits.len()
            )));
        }
        if let Some((index, &value)) = bits.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(MaskError::NonBinary { value, index });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, fg: bool) {
        self.bits[y * self.width + x] = fg as u8;
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }
}

/// Majority-vote downsampling: each `factor x factor` block (edge blocks may
/// be partial) becomes foreground iff its foreground count is at least its
/// background count.
pub fn downsample_mask(m: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    if factor == 0 {
        return Err(MaskError::Config("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(m.clone());
    }
    let oh = m.height.div_ceil(factor);
    let ow = m.width.div_ceil(factor);
    Ok(BinaryMask::from_fn(oh, ow, |by, bx| {
        let (y0, y1) = (by * factor, ((by + 1) * factor).min(m.height));
        let (x0, x1) = (bx * factor, ((bx + 1) * factor).min(m.width));
        let mut fg = 0usize;
        for y in y0..y1 {
            for x in x0..x1 {
                fg += m.get(y, x) as usize;
            }
        }
        let total = (y1 - y0) * (x1 - x0);
        fg >= total - fg
    }))
}

/// A mask together with its downsampled copies at feature-map strides.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    levels: Vec<(usize, BinaryMask)>,
}

impl MaskPyramid {
    /// Each level is computed directly from the source mask. Stride 1 is
    /// always present.
    pub fn build(source: &BinaryMask, strides: &[usize]) -> Result<Self> {
        let mut wanted: Vec<usize> = strides.to_vec();
        wanted.push(1);
        wanted.sort_unstable();
        wanted.dedup();
        let levels = wanted
            .into_iter()
            .map(|s| downsample_mask(source, s).map(|m| (s, m)))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn source(&self) -> &BinaryMask {
        &self.levels[0].1
    }

    pub fn level(&self, stride: usize) -> Option<&BinaryMask> {
        self.levels.iter().find(|(s, _)| *s == stride).map(|(_, m)| m)
    }

    pub fn levels(&self) -> &[(usize, BinaryMask)] {
        &self.levels
    }
}

/// Foreground/background pixel counts over the valid part of one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolWindowStats {
    pub n_fg: u32,
    pub n_bg: u32,
}

impl PoolWindowStats {
    /// Ties go to the foreground branch.
    pub fn takes_fg(&self) -> bool {
        self.n_fg >= self.n_bg
    }

    /// Pixel count of the branch that was selected.
    pub fn selected_count(&self) -> u32 {
        if self.takes_fg() {
            self.n_fg
        } else {
            self.n_bg
        }
    }
}

/// Per-window decisions from a forward pass, needed by the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchRecord {
    pub geometry: PoolGeometry,
    pub input_shape: [usize; 4],
    pub out_dims: (usize, usize),
    /// Indexed `(n·oh + oy)·ow + ox`; identical across channels.
    pub windows: Vec<PoolWindowStats>,
}

impl BranchRecord {
    pub fn window(&self, n: usize, oy: usize, ox: usize) -> PoolWindowStats {
        let (oh, ow) = self.out_dims;
        self.windows[(n * oh + oy) * ow + ox]
    }
}

fn check_masks<M: Borrow<BinaryMask>>(masks: &[M], n: usize, h: usize, w: usize) -> Result<()> {
    if masks.len() != n {
        return Err(MaskError::BatchMismatch {
            expected: n,
            actual: masks.len(),
        });
    }
    for m in masks {
        let m = m.borrow();
        if m.dims() != (h, w) {
            return Err(MaskError::ShapeMismatch {
                mask: m.dims(),
                feature: (h, w),
            });
        }
    }
    Ok(())
}

/// Plane offsets of the selected pixels of every window of one image, in
/// row-major window order, with `starts` delimiting each window.
fn selected_offsets(
    m: &BinaryMask,
    windows: &[PoolWindowStats],
    geometry: PoolGeometry,
    oh: usize,
    ow: usize,
) -> (Vec<u32>, Vec<usize>) {
    let (h, w) = m.dims();
    let PoolGeometry {
        kernel,
        stride,
        padding,
    } = geometry;
    let mut offsets = Vec::new();
    let mut starts = Vec::with_capacity(oh * ow + 1);
    starts.push(0);
    for oy in 0..oh {
        let (y0, y1) = window_range(oy, h, kernel, stride, padding);
        for ox in 0..ow {
            let (x0, x1) = window_range(ox, w, kernel, stride, padding);
            let fg = windows[oy * ow + ox].takes_fg();
            for y in y0..y1 {
                for xx in x0..x1 {
                    if m.get(y, xx) == fg {
                        offsets.push((y * w + xx) as u32);
                    }
                }
            }
            starts.push(offsets.len());
        }
    }
    (offsets, starts)
}

/// Mask pooling forward. `masks[i]` applies to every channel of image `i`.
pub fn maskpool2d_forward<T: Scalar, M: Borrow<BinaryMask>>(
    x: &Tensor<T>,
    masks: &[M],
    geometry: PoolGeometry,
) -> Result<(Tensor<T>, BranchRecord)> {
    let [n_, c_, h, w] = x.shape();
    check_masks(masks, n_, h, w)?;
    let (oh, ow) = geometry.output_dims("maskpool2d", h, w)?;
    let PoolGeometry {
        kernel,
        stride,
        padding,
    } = geometry;

    let mut windows = Vec::with_capacity(n_ * oh * ow);
    for m in masks {
        let m = m.borrow();
        for oy in 0..oh {
            let (y0, y1) = window_range(oy, h, kernel, stride, padding);
            for ox in 0..ow {
                let (x0, x1) = window_range(ox, w, kernel, stride, padding);
                let mut n_fg = 0u32;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        n_fg += m.get(y, xx) as u32;
                    }
                }
                let total = ((y1 - y0) * (x1 - x0)) as u32;
                windows.push(PoolWindowStats {
                    n_fg,
                    n_bg: total - n_fg,
                });
            }
        }
    }

    let mut out = Tensor::zeros([n_, c_, oh, ow]);
    let plane = h * w;
    let src = x.data();
    let data = out.data_mut();
    let mut idx = 0;
    for (n, m) in masks.iter().enumerate() {
        let (offsets, starts) = selected_offsets(m.borrow(), &windows[n * oh * ow..(n + 1) * oh * ow], geometry, oh, ow);
        for c in 0..c_ {
            let base = (n * c_ + c) * plane;
            let p = &src[base..base + plane];
            for wi in 0..oh * ow {
                let sel = &offsets[starts[wi]..starts[wi + 1]];
                let sum: f64 = sel.iter().map(|&o| p[o as usize].as_f64()).sum();
                data[idx] = T::from_f64(sum / sel.len() as f64);
                idx += 1;
            }
        }
    }
    let out = out.ensure_finite("maskpool2d_forward")?;
    Ok((
        out,
        BranchRecord {
            geometry,
            input_shape: x.shape(),
            out_dims: (oh, ow),
            windows,
        },
    ))
}

/// Routes `grad_out / selected_count` to every pixel of the selected region
/// of each window; overlapping windows accumulate.
pub fn maskpool2d_backward<T: Scalar, M: Borrow<BinaryMask>>(
    masks: &[M],
    grad_out: &Tensor<T>,
    record: &BranchRecord,
) -> Result<Tensor<T>> {
    let [n_, c_, h, w] = record.input_shape;
    check_masks(masks, n_, h, w)?;
    let (oh, ow) = record.out_dims;
    grad_out.expect_shape("maskpool2d_backward", [n_, c_, oh, ow])?;

    let mut dx = Tensor::zeros(record.input_shape);
    let plane = h * w;
    let go = grad_out.data();
    let mut idx = 0;
    for (n, m) in masks.iter().enumerate() {
        let (offsets, starts) = selected_offsets(
            m.borrow(),
            &record.windows[n * oh * ow..(n + 1) * oh * ow],
            record.geometry,
            oh,
            ow,
        );
        for c in 0..c_ {
            let base = (n * c_ + c) * plane;
            let p = &mut dx.data_mut()[base..base + plane];
            for wi in 0..oh * ow {
                let sel = &offsets[starts[wi]..starts[wi + 1]];
                let share = go[idx] / T::from_f64(sel.len() as f64);
                for &o in sel {
                    p[o as usize] = p[o as usize] + share;
                }
                idx += 1;
            }
        }
    }
    Ok(dx)
}

/// Multiplies background activations by `weight`; foreground values are
/// passed through untouched.
pub fn bg_scale<T: Scalar, M: Borrow<BinaryMask>>(
    x: &Tensor<T>,
    masks: &[M],
    weight: f32,
) -> Result<Tensor<T>> {
    let [n_, c_, h, w] = x.shape();
    check_masks(masks, n_, h, w)?;
    let weight = T::from_f64(weight as f64);
    let mut out = x.clone();
    let plane = h * w;
    for (n, m) in masks.iter().enumerate() {
        let bits = m.borrow().bits();
        for c in 0..c_ {
            let base = (n * c_ + c) * plane;
            for (v, &b) in out.data_mut()[base..base + plane].iter_mut().zip(bits) {
                if b == 0 {
                    *v = *v * weight;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphMode {
    Dilate,
    Erode,
}

fn morph_step(m: &BinaryMask, mode: MorphMode) -> BinaryMask {
    let (h, w) = m.dims();
    BinaryMask::from_fn(h, w, |y, x| {
        let ys = y.saturating_sub(1)..(y + 2).min(h);
        let mut any = false;
        let mut all = true;
        for yy in ys {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                let v = m.get(yy, xx);
                any |= v;
                all &= v;
            }
        }
        match mode {
            MorphMode::Dilate => any,
            MorphMode::Erode => all,
        }
    })
}

/// Applies 3x3 (8-connected) dilation or erosion steps until the foreground
/// area first reaches `area_factor` times the original area (at least for
/// dilation, at most for erosion). Out-of-image neighbours are ignored.
pub fn morph_perturb(m: &BinaryMask, mode: MorphMode, area_factor: f64) -> Result<BinaryMask> {
    if area_factor == 1.0 {
        return Err(MaskError::Config("area factor 1 requests no perturbation".into()));
    }
    match mode {
        MorphMode::Dilate if !(area_factor > 1.0 && area_factor.is_finite()) => {
            return Err(MaskError::Config(format!(
                "dilation needs area factor > 1, got {area_factor}"
            )))
        }
        MorphMode::Erode if !(area_factor > 0.0 && area_factor < 1.0) => {
            return Err(MaskError::Config(format!(
                "erosion needs area factor in (0, 1), got {area_factor}"
            )))
        }
        _ => {}
    }
    let original = m.area();
    if original == 0 {
        return Ok(m.clone());
    }
    let target = area_factor * original as f64;
    let reached = |area: usize| match mode {
        MorphMode::Dilate => area as f64 >= target,
        MorphMode::Erode => area as f64 <= target,
    };
    let mut current = m.clone();
    let mut area = original;
    while !reached(area) {
        let next = morph_step(&current, mode);
        let next_area = next.area();
        // Saturated: the whole frame or nothing left.
        if next_area == area {
            break;
        }
        current = next;
        area = next_area;
    }
    Ok(current)
}
