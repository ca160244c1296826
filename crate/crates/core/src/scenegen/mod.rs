//! Synthetic context-biased scenes and background interventions.
//!
//! Each generated scene places solid-coloured shapes on a plain backdrop.
//! Every object sits on a local patch of texture drawn from
//! `P(texture | class)`, so the background carries a controllable,
//! spurious cue about the object's class. The compositors then replace the
//! background while keeping the foreground pixels, masks and annotations.

mod composite;
mod io;
pub mod texture;

use image::{Rgb, RgbImage};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{BBox, Instance};
use crate::maskpool::{BinaryMask, MaskError};

pub use composite::{
    background_choice, blend, composite_fixed_bg, composite_random_bg, composite_random_bg_dataset,
    fit_background, generate_bg_pool, load_bg_dir,
};
pub(crate) use composite::sample_pool_indices;
pub use io::{load_dataset, save_dataset, Manifest, ManifestImage};
pub use texture::{Texture, INTERVENTION_TEXTURES, TRAIN_TEXTURES};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at byte {offset}: {reason}")]
    Parse {
        path: String,
        offset: usize,
        reason: String,
    },
    #[error("{path}: non-binary mask (value {value} at byte {offset})")]
    NonBinaryMask { path: String, offset: usize, value: u8 },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("background pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub type Result<T, E = SceneError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

pub const SHAPE_CLASSES: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle];

impl ShapeClass {
    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
        }
    }

    /// Pixel-centre inclusion test for a shape of `size` centred at `(cx, cy)`.
    fn contains(self, cx: f32, cy: f32, size: f32, px: f32, py: f32) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        let half = size / 2.0;
        match self {
            ShapeClass::Circle => dx * dx + dy * dy <= half * half,
            ShapeClass::Square => {
                let s = half * 0.85;
                dx.abs() <= s && dy.abs() <= s
            }
            ShapeClass::Triangle => {
                // Apex at the top centre, base along the bottom.
                if dy < -half || dy > half {
                    return false;
                }
                let frac = (dy + half) / size;
                dx.abs() <= frac * half
            }
        }
    }
}

/// One scene: pixels, foreground mask and annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub image: RgbImage,
    pub fg_mask: BinaryMask,
    pub instances: Vec<Instance>,
}

impl ImageRecord {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width() as f32, self.height() as f32);
        if self.fg_mask.dims() != (self.height() as usize, self.width() as usize) {
            return Err(SceneError::Validation(format!(
                "{}: mask {:?} does not match image {}x{}",
                self.image_id,
                self.fg_mask.dims(),
                self.height(),
                self.width()
            )));
        }
        for inst in &self.instances {
            let b = inst.bbox;
            if !b.is_valid() || b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > w || b.y_max > h {
                return Err(SceneError::Validation(format!(
                    "{}: box {:?} is empty or outside the image",
                    self.image_id, b
                )));
            }
        }
        Ok(())
    }
}

/// Row-stochastic `P(texture | class)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct BiasSpec {
    rows: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for BiasSpec {
    type Error = SceneError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        BiasSpec::new(rows)
    }
}

impl From<BiasSpec> for Vec<Vec<f64>> {
    fn from(b: BiasSpec) -> Self {
        b.rows
    }
}

impl BiasSpec {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || width == 0 {
            return Err(SceneError::Config("bias matrix is empty".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(SceneError::Config(format!("bias row {i} has {} entries, expected {width}", r.len())));
            }
            if r.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(SceneError::Config(format!("bias row {i} has a negative entry")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(SceneError::Config(format!("bias row {i} sums to {s}")));
            }
        }
        Ok(Self { rows })
    }

    /// Class `c` prefers texture `c mod textures` with probability `p`; the
    /// rest is spread evenly.
    pub fn diagonal(num_classes: usize, num_textures: usize, p: f64) -> Result<Self> {
        if num_textures < 2 {
            return Self::new(vec![vec![1.0]; num_classes]);
        }
        let rest = (1.0 - p) / (num_textures - 1) as f64;
        Self::new(
            (0..num_classes)
                .map(|c| (0..num_textures).map(|t| if t == c % num_textures { p } else { rest }).collect())
                .collect(),
        )
    }

    pub fn uniform(num_classes: usize, num_textures: usize) -> Self {
        Self {
            rows: vec![vec![1.0 / num_textures as f64; num_textures]; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn num_textures(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class]
    }

    fn sample(&self, class: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        for (t, &p) in self.rows[class].iter().enumerate() {
            acc += p;
            if u < acc {
                return t;
            }
        }
        // Rounding slack: last texture with non-zero mass.
        self.rows[class].iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_images: usize,
    pub image_size: u32,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of object sizes in pixels.
    pub object_size: (u32, u32),
    /// Local texture patch margin as a fraction of the object size.
    pub patch_margin: f32,
    pub bias: BiasSpec,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_images: 2000,
            image_size: 128,
            objects_per_image: (1, 4),
            object_size: (18, 36),
            patch_margin: 0.5,
            bias: BiasSpec::diagonal(3, 4, 0.85).expect("valid default"),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SceneError::Config(m));
        if self.n_images == 0 {
            return bad("n_images must be >= 1".into());
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("objects_per_image {lo}..={hi} is empty or zero"));
        }
        let (smin, smax) = self.object_size;
        if smin < 4 || smin > smax || smax > self.image_size {
            return bad(format!("object sizes {smin}..={smax} do not fit image {}", self.image_size));
        }
        if self.bias.num_classes() != SHAPE_CLASSES.len() || self.bias.num_textures() != TRAIN_TEXTURES.len() {
            return bad(format!(
                "bias must be {}x{}, got {}x{}",
                SHAPE_CLASSES.len(),
                TRAIN_TEXTURES.len(),
                self.bias.num_classes(),
                self.bias.num_textures()
            ));
        }
        Ok(())
    }
}

/// An in-memory dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub textures: Vec<String>,
    pub seed: Option<u64>,
    pub bias: Option<BiasSpec>,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ground_truth(&self) -> Vec<Vec<Instance>> {
        self.records.iter().map(|r| r.instances.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.image_id.as_str()) {
                return Err(SceneError::Validation(format!("duplicate image id {}", r.image_id)));
            }
            r.validate()?;
            if let Some(i) = r.instances.iter().find(|i| i.class_id >= self.classes.len()) {
                return Err(SceneError::Validation(format!(
                    "{}: class id {} out of range",
                    r.image_id, i.class_id
                )));
            }
        }
        Ok(())
    }

    /// The first `n` records.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            records: self.records.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }
}

/// Per-image RNG independent of how images are scheduled.
pub(crate) fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct Placed {
    class: ShapeClass,
    texture: usize,
    cx: f32,
    cy: f32,
    size: f32,
    bbox: BBox,
    silhouette: BinaryMask,
    color: [u8; 3],
}

fn overlap_ratio(a: &BBox, b: &BBox) -> f32 {
    let smaller = a.area().min(b.area());
    if smaller <= 0.0 {
        0.0
    } else {
        a.intersection(b) / smaller
    }
}

fn rasterize(class: ShapeClass, cx: f32, cy: f32, size: f32, dim: u32) -> (BinaryMask, Option<BBox>) {
    let n = dim as usize;
    let mut mask = BinaryMask::zeros(n, n);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let lo_y = (cy - size).floor().max(0.0) as usize;
    let hi_y = ((cy + size).ceil() as usize).min(n);
    let lo_x = (cx - size).floor().max(0.0) as usize;
    let hi_x = ((cx + size).ceil() as usize).min(n);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            if class.contains(cx, cy, size, x as f32 + 0.5, y as f32 + 0.5) {
                mask.set(y, x, true);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    let bbox = (x0 < x1).then(|| BBox::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32));
    (mask, bbox)
}

fn render_scene(cfg: &GeneratorConfig, index: usize) -> ImageRecord {
    let mut rng = image_rng(cfg.seed, index as u64);
    let dim = cfg.image_size;
    let base = texture::random_color(&mut rng, 70, 180);
    let mut img = RgbImage::from_fn(dim, dim, |_, _| {
        let jitter = rng.random_range(-6i16..=6);
        Rgb(base.map(|c| (c as i16 + jitter).clamp(0, 255) as u8))
    });

    let (lo, hi) = cfg.objects_per_image;
    let wanted = rng.random_range(lo..=hi);
    let mut placed: Vec<Placed> = Vec::new();
    for obj in 0..wanted {
        let class = SHAPE_CLASSES[rng.random_range(0..SHAPE_CLASSES.len())];
        let texture = cfg.bias.sample(class as usize, &mut rng);
        let size = rng.random_range(cfg.object_size.0..=cfg.object_size.1) as f32;
        let mut accepted = None;
        for _ in 0..100 {
            let half = size / 2.0;
            let cx = rng.random_range(half..=dim as f32 - half);
            let cy = rng.random_range(half..=dim as f32 - half);
            let (silhouette, bbox) = rasterize(class, cx, cy, size, dim);
            let Some(bbox) = bbox else { continue };
            if placed.iter().all(|p| overlap_ratio(&p.bbox, &bbox) <= 0.3) {
                accepted = Some((cx, cy, silhouette, bbox));
                break;
            }
        }
        match accepted {
            Some((cx, cy, silhouette, bbox)) => placed.push(Placed {
                class,
                texture,
                cx,
                cy,
                size,
                bbox,
                silhouette,
                color: texture::random_color(&mut rng, 0, 255),
            }),
            None => warn!("image {index}: object {obj} could not be placed after 100 tries; skipped"),
        }
    }

    // All patches first so no patch paints over an earlier object.
    for p in &placed {
        let margin = p.size * cfg.patch_margin;
        let clampf = |v: f32| v.clamp(0.0, dim as f32) as u32;
        let rect = (
            clampf(p.cx - p.size / 2.0 - margin),
            clampf(p.cy - p.size / 2.0 - margin),
            clampf(p.cx + p.size / 2.0 + margin),
            clampf(p.cy + p.size / 2.0 + margin),
        );
        texture::paint(&mut img, TRAIN_TEXTURES[p.texture], rect, &mut rng);
    }
    let mut fg_mask = BinaryMask::zeros(dim as usize, dim as usize);
    for p in &placed {
        for y in 0..dim as usize {
            for x in 0..dim as usize {
                if p.silhouette.get(y, x) {
                    img.put_pixel(x as u32, y as u32, Rgb(p.color));
                }
            }
        }
        fg_mask.union_with(&p.silhouette);
    }

    ImageRecord {
        image_id: format!("img_{index:05}"),
        image: img,
        fg_mask,
        instances: placed
            .iter()
            .map(|p| Instance {
                class_id: p.class as usize,
                bbox: p.bbox,
                texture_id: Some(p.texture),
            })
            .collect(),
    }
}

/// Renders `cfg.n_images` scenes. Output depends only on `cfg`.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let records: Vec<ImageRecord> = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| render_scene(cfg, i))
        .collect();
    Ok(Dataset {
        classes: SHAPE_CLASSES.iter().map(|c| c.name().to_string()).collect(),
        textures: TRAIN_TEXTURES.iter().map(|t| t.name().to_string()).collect(),
        seed: Some(cfg.seed),
        bias: Some(cfg.bias.clone()),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, bias: BiasSpec, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_images: n,
            image_size: 64,
            object_size: (10, 20),
            bias,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn bias_validation() {
        assert!(BiasSpec::new(vec![vec![0.5, 0.4]]).is_err());
        assert!(BiasSpec::new(vec![vec![1.5, -0.5]]).is_err());
        assert!(BiasSpec::new(vec![vec![0.5, 0.5], vec![1.0]]).is_err());
        let d = BiasSpec::diagonal(3, 4, 0.85).unwrap();
        assert!((d.row(1)[1] - 0.85).abs() < 1e-12);
        assert!((d.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identity_bias_pins_textures() {
        let bias = BiasSpec::new(vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ])
        .unwrap();
        let ds = generate_dataset(&small(60, bias, 3)).unwrap();
        for r in &ds.records {
            for i in &r.instances {
                assert_eq!(i.texture_id, Some(i.class_id));
            }
        }
    }

    #[test]
    fn scenes_satisfy_invariants() {
        let ds = generate_dataset(&small(40, BiasSpec::diagonal(3, 4, 0.85).unwrap(), 9)).unwrap();
        ds.validate().unwrap();
        for r in &ds.records {
            assert!((1..=4).contains(&r.instances.len()));
            let mut union = BinaryMask::zeros(64, 64);
            for inst in &r.instances {
                let b = inst.bbox;
                let mut hit = false;
                for y in b.y_min as usize..b.y_max as usize {
                    for x in b.x_min as usize..b.x_max as usize {
                        hit |= r.fg_mask.get(y, x);
                        if r.fg_mask.get(y, x) {
                            union.set(y, x, true);
                        }
                    }
                }
                assert!(hit);
            }
            // Every FG pixel lies inside some instance box.
            assert_eq!(union, r.fg_mask);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small(12, BiasSpec::diagonal(3, 4, 0.85).unwrap(), 42);
        assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
        let other = GeneratorConfig { seed: 43, ..cfg.clone() };
        assert_ne!(generate_dataset(&cfg).unwrap().records, generate_dataset(&other).unwrap().records);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small(1, BiasSpec::uniform(3, 4), 0);
        cfg.n_images = 0;
        assert!(generate_dataset(&cfg).is_err());
        let cfg = GeneratorConfig { object_size: (10, 200), ..small(1, BiasSpec::uniform(3, 4), 0) };
        assert!(generate_dataset(&cfg).is_err());
        let cfg = small(1, BiasSpec::uniform(2, 4), 0);
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn crowded_images_skip_objects_instead_of_failing() {
        let cfg = GeneratorConfig {
            image_size: 32,
            object_size: (30, 32),
            objects_per_image: (4, 4),
            ..small(3, BiasSpec::uniform(3, 4), 1)
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert!(ds.records.iter().all(|r| !r.instances.is_empty() && r.instances.len() < 4));
    }

    #[test]
    fn shapes_rasterize_inside_their_box() {
        for class in SHAPE_CLASSES {
            let (m, b) = rasterize(class, 16.0, 16.0, 12.0, 32);
            let b = b.unwrap();
            assert!(m.area() > 0);
            assert!(b.width() <= 13.0 && b.height() <= 13.0);
        }
    }
}
