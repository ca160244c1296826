//! Binary checkpoint format.
//!
//! ```text
//! "MPLB" | u32 version | u32 len | JSON {config, seed, iterations}
//! then per tensor: u32 name len | name | 4 x u32 shape | f32 payload
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetError, Model, ModelConfig, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub iterations: u64,
    pub params: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    seed: u64,
    iterations: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, iterations: u64) -> Self {
        Self {
            config: model.config().clone(),
            seed,
            iterations,
            params: model
                .named_parameters()
                .into_iter()
                .map(|(name, t)| (name, t.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model, checking every tensor against the config's
    /// layer shapes.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), self.seed)?;
        let expected: Vec<(String, [usize; 4])> = model
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        let bad = |reason: String| DetError::Checkpoint {
            path: "<memory>".into(),
            reason,
        };
        if expected.len() != self.params.len() {
            return Err(bad(format!("expected {} tensors, found {}", expected.len(), self.params.len())));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&self.params) {
            if name != got_name || *shape != t.shape() {
                return Err(bad(format!("tensor {got_name} {:?} does not match {name} {shape:?}", t.shape())));
            }
        }
        for (i, layer) in model.layers.iter_mut().enumerate() {
            layer.params.weights = self.params[2 * i].1.clone();
            layer.params.bias = self.params[2 * i + 1].1.clone();
        }
        Ok(model)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: ckpt.config.clone(),
        seed: ckpt.seed,
        iterations: ckpt.iterations,
    })
    .expect("header is always serializable");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (name, t) in &ckpt.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|source| DetError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> DetError {
        DetError::Checkpoint {
            path: self.path.display().to_string(),
            reason: format!("{} (offset {})", reason.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| DetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.err("bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| r.err(format!("bad header: {e}")))?;
    let mut params = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.err("tensor name is not UTF-8"))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let count: usize = shape.iter().product();
        let data = r
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push((name, Tensor::from_vec(shape, data)?));
    }
    let ckpt = Checkpoint {
        config: header.config,
        seed: header.seed,
        iterations: header.iterations,
        params,
    };
    ckpt.to_model().map_err(|e| match e {
        DetError::Checkpoint { reason, .. } => DetError::Checkpoint {
            path: path.display().to_string(),
            reason,
        },
        other => other,
    })?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskpool::{BinaryMask, MaskPyramid};
    use crate::minidet::{ForwardOptions, PoolingVariant};

    fn model() -> Model {
        Model::new(
            ModelConfig {
                pooling_variant: PoolingVariant::Mask,
                channels: vec![3, 4, 5, 6],
                image_size: 16,
                ..Default::default()
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let ckpt = Checkpoint::from_model(&m, 21, 7);
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        for ((_, a), (_, b)) in back.params.iter().zip(&ckpt.params) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let x = Tensor::randn([1, 3, 16, 16], 2);
        let masks = [MaskPyramid::build(&BinaryMask::from_fn(16, 16, |y, x| y > x), &[2, 4, 8]).unwrap()];
        let opts = ForwardOptions { masks: Some(&masks), ..Default::default() };
        assert_eq!(back.to_model().unwrap().forward(&x, &opts).unwrap(), m.forward(&x, &opts).unwrap());
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Checkpoint::from_model(&model(), 0, 0), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));
        bytes[0] = b'M';
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Checkpoint::from_model(&model(), 0, 0), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut ckpt = Checkpoint::from_model(&model(), 0, 0);
        ckpt.params[0].1 = Tensor::zeros([1, 1, 1, 1]);
        assert!(ckpt.to_model().is_err());
    }
}
