//! Procedural background textures.
//!
//! Training scenes use the first four families; intervention backgrounds
//! draw from a disjoint set so replaced backgrounds never repeat a pattern
//! the detector saw during training.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Stripes,
    Checker,
    Noise,
    Gradient,
    // Intervention-only families.
    Waves,
    Rings,
    Dots,
    Blotches,
}

pub const TRAIN_TEXTURES: [Texture; 4] = [Texture::Stripes, Texture::Checker, Texture::Noise, Texture::Gradient];
pub const INTERVENTION_TEXTURES: [Texture; 4] = [Texture::Waves, Texture::Rings, Texture::Dots, Texture::Blotches];

impl Texture {
    pub fn name(self) -> &'static str {
        match self {
            Texture::Stripes => "stripes",
            Texture::Checker => "checker",
            Texture::Noise => "noise",
            Texture::Gradient => "gradient",
            Texture::Waves => "waves",
            Texture::Rings => "rings",
            Texture::Dots => "dots",
            Texture::Blotches => "blotches",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        TRAIN_TEXTURES
            .into_iter()
            .chain(INTERVENTION_TEXTURES)
            .find(|t| t.name() == name)
    }
}

pub(crate) fn random_color(rng: &mut ChaCha8Rng, lo: u8, hi: u8) -> [u8; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

fn mix(a: [u8; 3], b: [u8; 3], t: f32) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    Rgb(std::array::from_fn(|i| {
        (a[i] as f32 * (1.0 - t) + b[i] as f32 * t).round() as u8
    }))
}

/// Paints `texture` into the rectangle `[x0, x1) x [y0, y1)` of `img`.
pub fn paint(img: &mut RgbImage, texture: Texture, rect: (u32, u32, u32, u32), rng: &mut ChaCha8Rng) {
    let (x0, y0, x1, y1) = rect;
    let a = random_color(rng, 0, 255);
    let b = random_color(rng, 0, 255);
    let period = rng.random_range(3..=7) as f32;
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let horizontal = rng.random_bool(0.5);
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let (w, h) = ((x1 - x0).max(1) as f32, (y1 - y0).max(1) as f32);
    let center = (
        rng.random_range(0.0..w.max(1.0)) + x0 as f32,
        rng.random_range(0.0..h.max(1.0)) + y0 as f32,
    );
    // Coarse lattice for blotches.
    let cell = 8.0f32;
    let lattice_w = (w / cell).ceil() as usize + 2;
    let lattice_h = (h / cell).ceil() as usize + 2;
    let lattice: Vec<f32> = if texture == Texture::Blotches {
        (0..lattice_w * lattice_h).map(|_| rng.random_range(0.0..1.0)).collect()
    } else {
        Vec::new()
    };

    for y in y0..y1 {
        for x in x0..x1 {
            let (fx, fy) = (x as f32 - x0 as f32, y as f32 - y0 as f32);
            let t = match texture {
                Texture::Stripes => {
                    let u = if horizontal { fy } else { fx };
                    ((u / period).floor() as i64).rem_euclid(2) as f32
                }
                Texture::Checker => {
                    (((fx / period).floor() as i64 + (fy / period).floor() as i64).rem_euclid(2)) as f32
                }
                Texture::Noise => rng.random_range(0.0..1.0),
                Texture::Gradient => {
                    let proj = (fx * dx + fy * dy) / (w.abs() + h.abs());
                    0.5 + proj
                }
                Texture::Waves => 0.5 + 0.5 * ((fx / period + (fy / (2.0 * period)).sin() * 2.0) + phase).sin(),
                Texture::Rings => {
                    let r = ((x as f32 - center.0).powi(2) + (y as f32 - center.1).powi(2)).sqrt();
                    0.5 + 0.5 * (r / period * 2.0 + phase).sin()
                }
                Texture::Dots => {
                    let cx = (fx / (2.0 * period)).fract() - 0.5;
                    let cy = (fy / (2.0 * period)).fract() - 0.5;
                    if cx * cx + cy * cy < 0.09 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Texture::Blotches => {
                    let (gx, gy) = (fx / cell, fy / cell);
                    let (ix, iy) = (gx as usize, gy as usize);
                    let (tx, ty) = (gx.fract(), gy.fract());
                    let at = |i: usize, j: usize| lattice[j * lattice_w + i];
                    let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                    let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                    top * (1.0 - ty) + bottom * ty
                }
            };
            img.put_pixel(x, y, mix(a, b, t));
        }
    }
}

/// A full-frame image of one texture.
pub fn texture_image(texture: Texture, width: u32, height: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut img = RgbImage::new(width, height);
    paint(&mut img, texture, (0, 0, width, height), rng);
    img
}
