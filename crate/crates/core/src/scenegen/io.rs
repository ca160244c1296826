//! On-disk dataset format: binary PPM images, binary PGM masks (0 / 255) and
//! one JSON annotation manifest. Paths inside the manifest are relative to
//! the manifest file.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{BiasSpec, Dataset, ImageRecord, Result, SceneError};
use crate::boxes::Instance;
use crate::maskpool::BinaryMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub file: String,
    pub mask_file: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<Instance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub images: Vec<ManifestImage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub textures: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasSpec>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_pnm(path: &Path, magic: &str, width: u32, height: u32, payload: &[u8]) -> Result<()> {
    let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(io_err(path))
}

/// Header fields and payload start of a binary PNM file.
struct Pnm<'a> {
    width: u32,
    height: u32,
    payload: &'a [u8],
    payload_offset: usize,
}

fn parse_pnm<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 2]) -> Result<Pnm<'a>> {
    let err = |offset: usize, reason: String| SceneError::Parse {
        path: path.display().to_string(),
        offset,
        reason,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, format!("expected header field {}", ["width", "height", "maxval"][i])));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, "header number out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected whitespace after maxval".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, format!("unsupported maxval {maxval}")));
    }
    let channels = if magic == b"P6" { 3 } else { 1 };
    let needed = width as usize * height as usize * channels;
    let available = bytes.len() - pos;
    if available < needed {
        return Err(err(bytes.len(), format!("truncated payload: {available} of {needed} bytes")));
    }
    Ok(Pnm {
        width,
        height,
        payload: &bytes[pos..pos + needed],
        payload_offset: pos,
    })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_pnm(path, "P6", img.width(), img.height(), img.as_raw())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let pnm = parse_pnm(path, &bytes, b"P6")?;
    Ok(RgbImage::from_raw(pnm.width, pnm.height, pnm.payload.to_vec()).expect("payload length checked"))
}

pub fn write_mask_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let payload: Vec<u8> = mask.bits().iter().map(|&b| b * 255).collect();
    write_pnm(path, "P5", mask.width() as u32, mask.height() as u32, &payload)
}

/// Reads a 0/255 PGM; any other grey level is a non-binary mask.
pub fn read_mask_pgm(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let pnm = parse_pnm(path, &bytes, b"P5")?;
    let mut bits = Vec::with_capacity(pnm.payload.len());
    for (i, &v) in pnm.payload.iter().enumerate() {
        match v {
            0 => bits.push(0),
            255 => bits.push(1),
            value => {
                return Err(SceneError::NonBinaryMask {
                    path: path.display().to_string(),
                    offset: pnm.payload_offset + i,
                    value,
                })
            }
        }
    }
    Ok(BinaryMask::new(pnm.height as usize, pnm.width as usize, bits)?)
}

/// Writes `manifest_path` plus `images/` and `masks/` next to it.
pub fn save_dataset(dataset: &Dataset, manifest_path: &Path) -> Result<()> {
    dataset.validate()?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut images = Vec::with_capacity(dataset.records.len());
    for r in &dataset.records {
        let file = format!("images/{}.ppm", r.image_id);
        let mask_file = format!("masks/{}.pgm", r.image_id);
        write_ppm(&root.join(&file), &r.image)?;
        write_mask_pgm(&root.join(&mask_file), &r.fg_mask)?;
        images.push(ManifestImage {
            id: r.image_id.clone(),
            file,
            mask_file,
            width: r.width(),
            height: r.height(),
            instances: r.instances.clone(),
        });
    }
    let manifest = Manifest {
        classes: dataset.classes.clone(),
        images,
        textures: dataset.textures.clone(),
        seed: dataset.seed,
        bias: dataset.bias.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|source| SceneError::Json {
        path: manifest_path.display().to_string(),
        source,
    })?;
    fs::write(manifest_path, json).map_err(io_err(manifest_path))
}

fn resolve(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let bytes = fs::read(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|source| SceneError::Json {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        let image = read_ppm(&resolve(&root, &entry.file))?;
        let fg_mask = read_mask_pgm(&resolve(&root, &entry.mask_file))?;
        if image.dimensions() != (entry.width, entry.height) {
            return Err(SceneError::Validation(format!(
                "{}: image is {:?}, manifest says {}x{}",
                entry.id,
                image.dimensions(),
                entry.width,
                entry.height
            )));
        }
        records.push(ImageRecord {
            image_id: entry.id.clone(),
            image,
            fg_mask,
            instances: entry.instances.clone(),
        });
    }
    let dataset = Dataset {
        classes: manifest.classes,
        textures: manifest.textures,
        seed: manifest.seed,
        bias: manifest.bias,
        records,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_dataset, GeneratorConfig};

    fn tiny() -> Dataset {
        generate_dataset(&GeneratorConfig {
            n_images: 3,
            image_size: 32,
            object_size: (8, 12),
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.json");
        let ds = tiny();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn saving_twice_is_bitwise_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ds = tiny();
        save_dataset(&ds, &a.path().join("m.json")).unwrap();
        save_dataset(&ds, &b.path().join("m.json")).unwrap();
        for rel in ["m.json", "images/img_00001.ppm", "masks/img_00002.pgm"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn truncated_mask_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        fs::write(&path, b"P5\n4 4\n255\n\x00\x00").unwrap();
        match read_mask_pgm(&path) {
            Err(SceneError::Parse { offset, reason, .. }) => {
                assert_eq!(offset, 13);
                assert!(reason.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grey_mask_value_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        fs::write(&path, b"P5\n2 1\n255\n\xff\x07").unwrap();
        let err = read_mask_pgm(&path).unwrap_err();
        assert!(matches!(err, SceneError::NonBinaryMask { value: 7, offset: 12, .. }));
        assert!(err.to_string().contains("non-binary mask"));
    }

    #[test]
    fn bad_magic_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        fs::write(&path, b"P3\n1 1\n255\n").unwrap();
        assert!(matches!(read_ppm(&path), Err(SceneError::Parse { offset: 0, .. })));
        fs::write(&path, b"P6\n# comment\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(read_ppm(&path).unwrap().get_pixel(0, 0).0, [1, 2, 3]);
    }

    #[test]
    fn duplicate_ids_are_rejected_on_save() {
        let mut ds = tiny();
        ds.records[1].image_id = ds.records[0].image_id.clone();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(save_dataset(&ds, &dir.path().join("m.json")), Err(SceneError::Validation(_))));
    }
}
