//! `STLW` checkpoint files: config header plus every named parameter and
//! running statistic, all little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::network::Model;

pub const MAGIC: &[u8; 4] = b"STLW";
pub const VERSION: u32 = 1;

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        reason: reason.into(),
    }
}

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let state = model.state();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for f in model.config().to_fields() {
        out.extend_from_slice(&(f as u32).to_le_bytes());
    }
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, t) in state {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(format_err(format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes only the config header.
pub fn read_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader { buf: bytes, pos: 0 };
    read_header(&mut r)
}

fn read_header(r: &mut Reader<'_>) -> Result<ModelConfig> {
    if r.take(4, "magic")? != MAGIC {
        return Err(format_err("bad magic, expected STLW"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let mut fields = [0usize; 12];
    for (f, name) in fields.iter_mut().zip(ModelConfig::FIELDS) {
        *f = r.u32(name)? as usize;
    }
    Ok(ModelConfig::from_fields(fields))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let config = read_header(&mut r)?;
    let mut model = Model::<f32>::zeroed(config)?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors: HashMap<String, Tensor<f32>> = HashMap::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format_err("tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| format_err(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(format_err(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let names: Vec<String> = model.state().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(model.state_mut()) {
        let t = tensors
            .remove(name)
            .ok_or_else(|| format_err(format!("missing tensor {name}")))?;
        if t.dims() != slot.dims() {
            return Err(format_err(format!(
                "{name} has shape {:?}, config implies {:?}",
                t.dims(),
                slot.dims()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(format_err(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and requires its config to equal `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model<f32>> {
    let bytes = fs::read(path)?;
    let found = read_config(&bytes)?;
    if let Some((field, want, got)) = expected.first_difference(&found) {
        return Err(Error::ConfigMismatch {
            field,
            expected: want,
            found: got,
        });
    }
    from_bytes(&bytes)
}
