//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "RSCA" | u32 version | u32 config hash | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 ndims | u32 dims[ndims] | f32 data
//! ```
//!
//! Tensors appear in manifest order: parameters, then batch-norm running
//! statistics. Dims are the logical shape (leading unit axes dropped).

use std::collections::HashMap;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"RSCA";
pub const VERSION: u32 = 1;

fn logical_dims(s: Shape) -> Vec<usize> {
    let d = s.0;
    let first = d.iter().position(|&v| v != 1).unwrap_or(3);
    d[first..].to_vec()
}

fn shape_from_dims(dims: &[usize]) -> Option<Shape> {
    if dims.is_empty() || dims.len() > 4 {
        return None;
    }
    let mut d = [1usize; 4];
    d[4 - dims.len()..].copy_from_slice(dims);
    Some(Shape(d))
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let manifest = model.store.manifest();
    let mut out = Vec::with_capacity(16 + 4 * model.store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.config().config_hash().to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    for (name, t) in manifest {
        let len = u16::try_from(name.len()).map_err(|_| Error::Validation(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = logical_dims(t.shape());
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Header and tensors of a checkpoint, before matching against a model.
#[derive(Clone, Debug)]
pub struct RawCheckpoint {
    pub version: u32,
    pub config_hash: u32,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn parse(bytes: &[u8]) -> std::result::Result<RawCheckpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let config_hash = r.u32()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::ManifestMismatch(format!("non UTF-8 name at byte {at}")))?
            .to_string();
        let nd = r.u8()? as usize;
        let dims = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let shape = shape_from_dims(&dims)
            .filter(|s| s.0.iter().all(|&d| d > 0) || s.c() == 0)
            .ok_or_else(|| CheckpointError::ManifestMismatch(format!("{name}: bad dims {dims:?}")))?;
        let numel = shape.numel();
        let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_vec(shape, data)
            .map_err(|e| CheckpointError::ManifestMismatch(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::ManifestMismatch(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(RawCheckpoint { version, config_hash, tensors })
}

/// Rebuild a model for `config` from checkpoint bytes. The tensor names and
/// shapes must match the model exactly, then the stored config hash must too.
pub fn from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<Model> {
    let raw = parse(bytes)?;
    let mut model = Model::build(config, 0)?;
    {
        let mut manifest: HashMap<&str, &mut Tensor<f32>> = model.store.manifest_mut().into_iter().collect();
        if manifest.len() != raw.tensors.len() {
            return Err(CheckpointError::ManifestMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                raw.tensors.len(),
                manifest.len()
            ))
            .into());
        }
        for (name, t) in raw.tensors {
            let slot = manifest
                .get_mut(name.as_str())
                .ok_or_else(|| CheckpointError::ManifestMismatch(format!("unexpected tensor {name}")))?;
            if slot.shape() != t.shape() {
                return Err(CheckpointError::ManifestMismatch(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    slot.shape()
                ))
                .into());
            }
            **slot = t;
        }
    }
    let expected = config.config_hash();
    if raw.config_hash != expected {
        return Err(CheckpointError::ConfigMismatch { expected, found: raw.config_hash }.into());
    }
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Scale;

    fn tiny() -> ModelConfig {
        ModelConfig::scaled(Scale::new(1, 16).unwrap()).unwrap()
    }

    #[test]
    fn dims_roundtrip() {
        for s in [Shape::new(1, 1, 1, 5), Shape::new(1, 1, 3, 5), Shape::new(4, 3, 1, 1), Shape::new(1, 4, 1, 1)] {
            assert_eq!(shape_from_dims(&logical_dims(s)), Some(s));
        }
        assert_eq!(logical_dims(Shape::new(1, 1, 1, 1)), vec![1]);
    }

    #[test]
    fn header_layout() {
        let m = Model::build(&tiny(), 3).unwrap();
        let b = to_bytes(&m).unwrap();
        assert_eq!(&b[..4], b"RSCA");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), tiny().config_hash());
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize, m.store.manifest().len());
    }

    #[test]
    fn corrupt_headers() {
        let m = Model::build(&tiny(), 3).unwrap();
        let mut b = to_bytes(&m).unwrap();
        assert!(matches!(parse(&b[..10]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(parse(&b[..b.len() - 1]), Err(CheckpointError::Truncated(_))));
        b[4] = 2;
        assert!(matches!(parse(&b), Err(CheckpointError::UnsupportedVersion(2))));
        b[0] = b'X';
        assert!(matches!(parse(&b), Err(CheckpointError::BadMagic)));
        assert!(matches!(parse(b"RS"), Err(CheckpointError::BadMagic)));
    }
}
