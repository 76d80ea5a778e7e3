//! Model checkpoint container.
//!
//! Layout (little-endian): magic `EDCK`, u16 version, u32 config-blob length
//! and the blob itself (UTF-8 `key=value` lines, sorted by key), u32 tensor
//! count, then per tensor: u16 name length, name bytes, u8 element width
//! (4 or 8), u8 rank (always 2), u32 per dimension, and the payload in
//! row-major order. Save→load→save is byte-identical at either width.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tape::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Element width of stored tensor payloads. Parameters are always f64 in
/// memory; 32-bit storage quantizes on save and widens on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_byte_width(w: u8) -> Result<Self> {
        match w {
            4 => Ok(Dtype::F32),
            8 => Ok(Dtype::F64),
            other => Err(Error::Format(format!(
                "unsupported tensor element width {other}"
            ))),
        }
    }
}

pub type ConfigMap = BTreeMap<String, String>;

fn encode_config(config: &ConfigMap) -> Result<Vec<u8>> {
    let mut blob = String::new();
    for (k, v) in config {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Validation(format!(
                "config key/value may not contain '=' in key or newlines: {k}"
            )));
        }
        blob.push_str(k);
        blob.push('=');
        blob.push_str(v);
        blob.push('\n');
    }
    Ok(blob.into_bytes())
}

fn decode_config(blob: &[u8]) -> Result<ConfigMap> {
    let text = std::str::from_utf8(blob)
        .map_err(|_| Error::Format("checkpoint config blob is not UTF-8".into()))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line without '=': {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

pub fn save_checkpoint(
    path: &Path,
    config: &ConfigMap,
    params: &ParamStore,
    dtype: Dtype,
) -> Result<()> {
    for (name, m) in params.iter() {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "refusing to save non-finite values in tensor {name}"
            )));
        }
    }
    let blob = encode_config(config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    buf.extend_from_slice(&blob);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, m) in params.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(dtype.byte_width());
        buf.push(2);
        buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        match dtype {
            Dtype::F32 => {
                for &v in m.iter() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in m.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ConfigMap, ParamStore, Dtype)> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let blob_len = c.u32()? as usize;
    let config = decode_config(c.take(blob_len)?)?;
    let count = c.u32()? as usize;
    let mut params = ParamStore::new();
    let mut dtype = Dtype::F64;
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        dtype = Dtype::from_byte_width(c.u8()?)?;
        let rank = c.u8()?;
        if rank != 2 {
            return Err(Error::Format(format!(
                "tensor {name} has rank {rank}, expected 2"
            )));
        }
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let n = rows * cols;
        let mut values = Vec::with_capacity(n);
        match dtype {
            Dtype::F32 => {
                let body = c.take(n * 4)?;
                for chunk in body.chunks_exact(4) {
                    values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
                }
            }
            Dtype::F64 => {
                let body = c.take(n * 8)?;
                for chunk in body.chunks_exact(8) {
                    values.push(f64::from_le_bytes([
                        chunk[0], chunk[1], chunk[2], chunk[3], chunk[4], chunk[5], chunk[6],
                        chunk[7],
                    ]));
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "tensor {name} contains non-finite values"
            )));
        }
        let m = Matrix::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::Shape(format!("tensor {name}: {e}")))?;
        params.insert(&name, m);
    }
    if c.pos != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            data.len() - c.pos
        )));
    }
    Ok((config, params, dtype))
}
