//! Little-endian readers/writers shared by the binary file formats.

use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, buf: &'a [u8]) -> Self {
        Self { path, buf, pos: 0 }
    }

    pub fn path(&self) -> PathBuf {
        self.path.to_path_buf()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                path: self.path(),
                section,
                expected: n,
                actual: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, section: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, section)?.try_into().expect("length checked"))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.array::<4>("magic")?;
        if &found != expected {
            return Err(Error::BadMagic {
                path: self.path(),
                expected: *expected,
                found,
            });
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<u32> {
        let v = self.u32("version")?;
        if v != supported {
            return Err(Error::BadVersion {
                path: self.path(),
                found: v,
            });
        }
        Ok(v)
    }

    pub fn u8(&mut self, section: &'static str) -> Result<u8> {
        Ok(self.array::<1>(section)?[0])
    }

    pub fn u16(&mut self, section: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(section)?))
    }

    pub fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(section)?))
    }

    pub fn f64(&mut self, section: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(section)?))
    }

    pub fn f64s(&mut self, n: usize, section: &'static str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.malformed(format!("{section} length overflows")))?;
        let raw = self.take(bytes, section)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path(),
            reason: reason.into(),
        }
    }

    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::TrailingBytes {
                path: self.path(),
                actual: self.remaining(),
            });
        }
        Ok(())
    }

    /// Reads a named tensor blob written by [`put_named_tensor`].
    pub fn named_tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u16("parameter name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "parameter name")?)
            .map_err(|_| self.malformed("parameter name is not utf-8"))?
            .to_owned();
        let ndim = self.u8("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32("parameter dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.malformed(format!("`{name}` dims overflow")))?;
        let data = self.f64s(numel, "parameter data")?;
        let t = Tensor::new(shape, data).map_err(|e| self.malformed(format!("`{name}`: {e}")))?;
        Ok((name, t))
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_named_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        put_u32(out, d);
    }
    put_f64s(out, t.data());
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
