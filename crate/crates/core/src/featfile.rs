//! Binary tensor encoding shared by feature files and checkpoints.
//!
//! Layout: magic `JPKD` | version u32 LE | ndim u32 LE | ndim extents u32 LE |
//! row-major payload LE. Version 1 stores 32-bit floats (feature files),
//! version 2 stores 64-bit floats (checkpoint tensors, which must restore
//! training state exactly).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, FormatErrorKind, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"JPKD";
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;
const MAX_RANK: u32 = 8;

pub(crate) fn encode_tensor(out: &mut Vec<u8>, t: &Tensor, version: u32) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match version {
        VERSION_F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        _ => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

/// Sequential little-endian reader that reports short input as truncation.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn fail(&self, kind: FormatErrorKind) -> Error {
        Error::format(self.what, kind)
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(FormatErrorKind::Truncated));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn tensor(&mut self, version: u32) -> Result<Tensor> {
        if self.bytes(4)? != MAGIC {
            return Err(self.fail(FormatErrorKind::BadMagic));
        }
        if self.u32()? != version {
            return Err(self.fail(FormatErrorKind::BadVersion));
        }
        let ndim = self.u32()?;
        if ndim == 0 || ndim > MAX_RANK {
            return Err(self.fail(FormatErrorKind::BadHeader));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            let e = self.u32()? as usize;
            if e == 0 {
                return Err(self.fail(FormatErrorKind::BadHeader));
            }
            shape.push(e);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| self.fail(FormatErrorKind::BadHeader))?;
        let width = if version == VERSION_F32 { 4 } else { 8 };
        let payload = self.bytes(count.checked_mul(width).ok_or_else(|| self.fail(FormatErrorKind::BadHeader))?)?;
        let data: Vec<f64> = if version == VERSION_F32 {
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
        } else {
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: self.what });
        }
        Tensor::new(shape, data)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(FormatErrorKind::TrailingBytes));
        }
        Ok(())
    }
}

/// Feature-file bytes for `t` (values narrowed to 32 bits).
pub fn encode_features(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.shape().len() + 4 * t.numel());
    encode_tensor(&mut out, t, VERSION_F32);
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes, "feature file");
    let t = r.tensor(VERSION_F32)?;
    r.finish()?;
    Ok(t)
}

/// Writes bytes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_features(t))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_three_is_44_bytes() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_features(&t);
        assert_eq!(bytes.len(), 44);
        assert_eq!(&bytes[..4], b"JPKD");
        assert_eq!(decode_features(&bytes).unwrap(), t);
    }

    #[test]
    fn corruptions_map_to_distinct_codes() {
        let t = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        let good = encode_features(&t);
        let mut magic = good.clone();
        magic[0] = b'X';
        let mut version = good.clone();
        version[4] = 9;
        let mut header = good.clone();
        header[8] = 0;
        let mut trailing = good.clone();
        trailing.push(0);
        let kind = |b: &[u8]| decode_features(b).unwrap_err().format_kind();
        assert_eq!(kind(&magic), Some(FormatErrorKind::BadMagic));
        assert_eq!(kind(&version), Some(FormatErrorKind::BadVersion));
        assert_eq!(kind(&header), Some(FormatErrorKind::BadHeader));
        assert_eq!(kind(&good[..good.len() - 1]), Some(FormatErrorKind::Truncated));
        assert_eq!(kind(&trailing), Some(FormatErrorKind::TrailingBytes));
        assert_eq!(decode_features(&magic).unwrap_err().to_string(), "feature file: bad magic");
    }
}
