//! Portable checkpoint format.
//!
//! ```text
//! "MMRB" | version: u16 LE | spec_len: u32 LE | spec JSON (UTF-8)
//! per parameter tensor: rank: u8 | extents: rank × u32 LE | data: f64 LE
//! crc32 of everything above: u32 LE
//! ```

use std::fs;
use std::path::Path;

use super::{Model, ModelParams, ModelSpec};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MMRB";
const VERSION: u16 = 1;

/// Serializes a model into checkpoint bytes.
pub fn write_checkpoint(spec: &ModelSpec, params: &ModelParams) -> Result<Vec<u8>> {
    params.check(spec)?;
    let json = serde_json::to_vec(spec)?;
    let mut buf = Vec::with_capacity(16 + json.len() + params.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in &params.tensors {
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptHeader(format!(
                "unexpected end of payload at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes. The checksum is verified before anything else.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 {
        return Err(Error::Checksum {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptHeader("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::CorruptHeader(format!("unsupported version {version}")));
    }
    let json_len = r.u32()? as usize;
    let spec: ModelSpec = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::CorruptHeader(format!("spec block: {e}")))?;
    let shapes = spec.param_shapes()?;

    let mut tensors = Vec::with_capacity(shapes.len());
    for (i, want) in shapes.iter().enumerate() {
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &shape != want {
            return Err(Error::shape(
                "checkpoint",
                format!("tensor {i} has shape {shape:?}, spec expects {want:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != payload.len() {
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes after parameters",
            payload.len() - r.pos
        )));
    }
    Model::new(spec, ModelParams { tensors })
}

pub fn save_checkpoint(spec: &ModelSpec, params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(spec, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelSpec, ModelParams)> {
    let m = read_checkpoint(&fs::read(path)?)?;
    Ok((m.spec, m.params))
}
