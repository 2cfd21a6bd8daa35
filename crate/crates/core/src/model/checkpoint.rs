//! Binary checkpoint: magic `LSLA`, u32 version, u64 config length and
//! UTF-8 `key=value` config text, u32 tensor count, then per tensor a u32
//! name length and name bytes, u32 rank, u64 dims and f64 payload, and a
//! trailing CRC-32 of everything before it. All integers little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{LslaError, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LSLA";

pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = model.config.to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> LslaError {
        LslaError::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| self.fail(format!("length {v} exceeds file size")))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        let bytes = self.take(n)?;
        std::str::from_utf8(bytes).map_err(|_| self.fail("invalid UTF-8"))
    }
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    let fail = |reason: &str| LslaError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < MAGIC.len() + 8 || &bytes[..4] != MAGIC {
        return Err(fail("not an LSLA checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(LslaError::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4, path };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let n = r.u64()?;
    let n = r.len(n)?;
    let config = ModelConfig::from_text(r.utf8(n)?)?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.utf8(n)?.to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = r.u64()?;
            shape.push(r.len(d)?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| r.fail(format!("{name}: shape {shape:?} too large")))?;
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params
            .insert(name.clone(), Tensor::new(&shape, data)?)
            .map_err(|_| r.fail(format!("duplicate tensor {name}")))?;
    }
    if r.pos != body.len() {
        return Err(r.fail(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Model::from_parts(config, params)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LslaError::MissingFile(PathBuf::from(path)),
        _ => e.into(),
    })?;
    read_checkpoint(&bytes, path)
}
