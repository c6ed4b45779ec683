//! Binary checkpoint format.
//!
//! ```text
//! "MTRO" | version u32 | config digest [32] | count u32 |
//!   count × ( name_len u32 | name utf-8 | ndim u32 | dims u32… | values f32… )
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::layout;
use super::params::ParamStore;
use crate::error::{MetroError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTRO";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(config: &ModelConfig, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config.digest());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in e.value.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(MetroError::Validation("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a checkpoint and checks it against `config`'s digest and layout.
pub fn decode_checkpoint(bytes: &[u8], config: &ModelConfig) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(MetroError::Validation("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(MetroError::Validation(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    if r.take(32)? != config.digest() {
        return Err(MetroError::Validation(
            "checkpoint was written for a different model config".into(),
        ));
    }
    let specs = layout(config);
    let count = r.u32()? as usize;
    if count != specs.len() {
        return Err(MetroError::Validation(format!(
            "checkpoint has {count} entries, config expects {}",
            specs.len()
        )));
    }
    let mut store = ParamStore::new();
    for s in &specs {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| MetroError::Validation("parameter name is not utf-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != s.name || shape != s.shape {
            return Err(MetroError::Validation(format!(
                "checkpoint entry {name} {shape:?} does not match expected {} {:?}",
                s.name, s.shape
            )));
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        store.add(name, Tensor::new(shape, data)?, s.trainable)?;
    }
    if r.pos != bytes.len() {
        return Err(MetroError::Validation("trailing bytes after checkpoint".into()));
    }
    Ok(store)
}

pub fn write_checkpoint(path: impl AsRef<Path>, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(config, params)).map_err(|e| MetroError::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MetroError::io(path, e))?;
    decode_checkpoint(&bytes, config)
}
