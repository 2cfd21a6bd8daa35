//! Raw tensor file: magic `LSLT`, u32 version, u32 rank, u64 dims,
//! little-endian f64 payload, then a CRC-32 of all preceding bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{LslaError, Result};
use crate::numcore::Tensor;

pub const CONTAINER_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LSLT";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |reason: String| LslaError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fail("not an LSLT tensor file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(LslaError::Checksum { stored, computed });
    }
    let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != CONTAINER_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let rank = u32_at(8) as usize;
    let header = 12 + 8 * rank;
    if body.len() < header {
        return Err(fail(format!("truncated header for rank {rank}")));
    }
    let shape: Vec<usize> = body[12..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let payload = &body[header..];
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    if numel.and_then(|n| n.checked_mul(8)) != Some(payload.len()) {
        return Err(fail(format!("payload of {} bytes does not match shape {shape:?}", payload.len())));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LslaError::MissingFile(PathBuf::from(path)),
        _ => e.into(),
    })?;
    decode_tensor(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let t = Tensor::new(&[2, 1, 3], vec![0.0, -1.5, 2.0, f64::MIN_POSITIVE, 1e300, 0.25]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"LSLT");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 3 * 8 + 6 * 8 + 4);
        let p = Path::new("x");
        assert_eq!(decode_tensor(&bytes, p).unwrap(), t);
        let mut bad = bytes.clone();
        bad[30] ^= 0x80;
        assert!(matches!(decode_tensor(&bad, p), Err(LslaError::Checksum { .. })));
        assert!(decode_tensor(&bytes[..10], p).is_err());
    }
}
