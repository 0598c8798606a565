//! Byte-level reader shared by the binary file formats (checkpoints,
//! embedding files). Tracks the read offset so corruption errors can name
//! the exact byte.

use std::path::Path;

use crate::error::{CamError, Result};

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], pos: usize, path: &'a Path) -> Self {
        ByteReader { bytes, pos, path }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn corrupt(&self, reason: impl Into<String>) -> CamError {
        CamError::Corrupt {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt(format!("wanted {n} bytes, file ends")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32_slice(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Verify the trailing little-endian CRC32 and magic of a container file.
/// Returns the body (everything before the checksum).
pub(crate) fn check_container<'a>(
    bytes: &'a [u8],
    path: &Path,
    magic: &'static [u8; 4],
    expected_name: &'static str,
) -> Result<&'a [u8]> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(CamError::BadMagic {
            path: path.to_path_buf(),
            expected: expected_name,
        });
    }
    if bytes.len() < 12 {
        return Err(CamError::Corrupt {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            reason: "truncated before checksum".into(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    if hasher.finalize() != stored {
        return Err(CamError::Corrupt {
            path: path.to_path_buf(),
            offset: (bytes.len() - 4) as u64,
            reason: "checksum mismatch".into(),
        });
    }
    Ok(body)
}

/// Append the CRC32 of everything currently in `buf`.
pub(crate) fn seal_container(buf: &mut Vec<u8>) {
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(buf);
    let crc = hasher.finalize();
    buf.extend_from_slice(&crc.to_le_bytes());
}
