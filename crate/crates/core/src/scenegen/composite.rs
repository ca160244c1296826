//! Background replacement: paste the foreground of a scene onto another
//! background. Annotations and masks pass through untouched.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::seq::index::sample;
use rand::Rng;

use super::texture::{texture_image, INTERVENTION_TEXTURES};
use super::{image_rng, Dataset, ImageRecord, Result, SceneError};
use crate::maskpool::BinaryMask;

/// Scale to cover `width x height` keeping aspect ratio, then centre-crop.
pub fn fit_background(bg: &RgbImage, width: u32, height: u32) -> RgbImage {
    if bg.dimensions() == (width, height) {
        return bg.clone();
    }
    let scale = (width as f64 / bg.width() as f64).max(height as f64 / bg.height() as f64);
    let sw = ((bg.width() as f64 * scale).ceil() as u32).max(width);
    let sh = ((bg.height() as f64 * scale).ceil() as u32).max(height);
    let scaled = imageops::resize(bg, sw, sh, FilterType::Triangle);
    let (x, y) = ((sw - width) / 2, (sh - height) / 2);
    imageops::crop_imm(&scaled, x, y, width, height).to_image()
}

/// Box-blurred alpha over the valid part of a `(2r+1)^2` window.
fn feathered_alpha(mask: &BinaryMask, radius: usize) -> Vec<f32> {
    let (h, w) = mask.dims();
    // Summed-area table for O(1) box sums.
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                mask.get(y, x) as u32 + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let mut alpha = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let s = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0];
            alpha.push(s as f32 / ((y1 - y0) * (x1 - x0)) as f32);
        }
    }
    alpha
}

/// Foreground where the mask is set, background elsewhere; with
/// `feather_radius > 0` the seam is alpha-blended.
pub fn blend(fg: &RgbImage, bg: &RgbImage, mask: &BinaryMask, feather_radius: usize) -> RgbImage {
    let (w, h) = fg.dimensions();
    if feather_radius == 0 {
        return RgbImage::from_fn(w, h, |x, y| {
            if mask.get(y as usize, x as usize) {
                *fg.get_pixel(x, y)
            } else {
                *bg.get_pixel(x, y)
            }
        });
    }
    let alpha = feathered_alpha(mask, feather_radius);
    RgbImage::from_fn(w, h, |x, y| {
        let a = alpha[y as usize * w as usize + x as usize];
        if a >= 1.0 {
            return *fg.get_pixel(x, y);
        }
        if a <= 0.0 {
            return *bg.get_pixel(x, y);
        }
        let (f, b) = (fg.get_pixel(x, y).0, bg.get_pixel(x, y).0);
        Rgb(std::array::from_fn(|i| (a * f[i] as f32 + (1.0 - a) * b[i] as f32).round() as u8))
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Pool index used for `image_id` under `seed`.
pub fn background_choice(seed: u64, image_id: &str, pool_len: usize) -> usize {
    (splitmix(seed ^ fnv1a(image_id.as_bytes())) % pool_len as u64) as usize
}

/// Recomposes one record on a pool background chosen from `(seed, image_id)`.
pub fn composite_random_bg(
    record: &ImageRecord,
    bg_pool: &[RgbImage],
    seed: u64,
    feather_radius: usize,
) -> Result<ImageRecord> {
    if bg_pool.is_empty() {
        return Err(SceneError::EmptyPool);
    }
    let bg = &bg_pool[background_choice(seed, &record.image_id, bg_pool.len())];
    let bg = fit_background(bg, record.width(), record.height());
    Ok(ImageRecord {
        image: blend(&record.image, &bg, &record.fg_mask, feather_radius),
        ..record.clone()
    })
}

/// [`composite_random_bg`] over a whole dataset; ids gain `_rndbg`.
pub fn composite_random_bg_dataset(
    dataset: &Dataset,
    bg_pool: &[RgbImage],
    seed: u64,
    feather_radius: usize,
) -> Result<Dataset> {
    let records = dataset
        .records
        .iter()
        .map(|r| {
            let mut out = composite_random_bg(r, bg_pool, seed, feather_radius)?;
            out.image_id = format!("{}_rndbg", r.image_id);
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        records,
        ..dataset.clone()
    })
}

/// Recomposes every record on the same background; ids gain `_fixbg`.
pub fn composite_fixed_bg(dataset: &Dataset, bg: &RgbImage, feather_radius: usize) -> Result<Dataset> {
    let records = dataset
        .records
        .iter()
        .map(|r| {
            let fitted = fit_background(bg, r.width(), r.height());
            ImageRecord {
                image_id: format!("{}_fixbg", r.image_id),
                image: blend(&r.image, &fitted, &r.fg_mask, feather_radius),
                ..r.clone()
            }
        })
        .collect();
    Ok(Dataset {
        records,
        ..dataset.clone()
    })
}

/// Full-frame backgrounds from texture families never used in training.
pub fn generate_bg_pool(count: usize, size: u32, seed: u64) -> Vec<RgbImage> {
    (0..count)
        .map(|i| {
            let mut rng = image_rng(seed ^ 0xb9_9001, i as u64);
            let texture = INTERVENTION_TEXTURES[rng.random_range(0..INTERVENTION_TEXTURES.len())];
            texture_image(texture, size, size, &mut rng)
        })
        .collect()
}

/// Every `.ppm` / `.png` / `.jpg` in `dir`, sorted by file name.
pub fn load_bg_dir(dir: &Path) -> Result<Vec<RgbImage>> {
    let io_err = |source| SceneError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            image::open(&p).map(|i| i.to_rgb8()).map_err(|source| SceneError::Image {
                path: p.display().to_string(),
                source,
            })
        })
        .collect()
}

/// `count` distinct pool indices drawn from `seed`.
pub(crate) fn sample_pool_indices(pool_len: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > pool_len {
        return Err(SceneError::Config(format!(
            "need {count} backgrounds but the pool has {pool_len}"
        )));
    }
    let mut rng = image_rng(seed, u64::MAX);
    Ok(sample(&mut rng, pool_len, count).into_vec())
}
