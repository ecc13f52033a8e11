//! Little-endian binary container shared by the model, dataset and
//! detector-state files.
//!
//! Layout: 8-byte magic, `u32` format version, payload, trailing CRC-32 of
//! everything before it.

use crate::error::{format, Error, Result};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8]) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.usize(vs.len());
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn usizes(&mut self, vs: &[usize]) {
        self.usize(vs.len());
        for &v in vs {
            self.usize(v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.buf.extend_from_slice(b);
    }

    /// Appends the checksum and returns the finished file image.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.finish())?;
        Ok(())
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Validates magic and version; the checksum is verified by [`Reader::finish`]
    /// so that structural errors are reported with their own context first.
    pub fn new(buf: &'a [u8], magic: &[u8; 8], what: &'static str) -> Result<Self> {
        if buf.len() < 16 {
            return format(format!("{what}: file truncated ({} bytes)", buf.len()));
        }
        if &buf[..8] != magic {
            return format(format!("{what}: bad magic bytes"));
        }
        let mut r = Reader { buf, pos: 8, what };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return format(format!(
                "{what}: unsupported format version {version} (expected {FORMAT_VERSION})"
            ));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        // The last four bytes are the checksum, never payload.
        let end = self.pos.checked_add(n).filter(|&e| e + 4 <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => format(format!("{}: file truncated at byte {}", self.what, self.pos)),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{}: length {v} overflows", self.what)))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads a length-prefixed block, bounding the length by the remaining bytes.
    pub fn len_prefix(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        let remaining = self.buf.len().saturating_sub(self.pos + 4);
        if n.checked_mul(elem).is_none_or(|b| b > remaining) {
            return format(format!("{}: block of {n} elements exceeds file size", self.what));
        }
        Ok(n)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(8)?;
        self.f64s_exact(n)
    }

    pub fn f64s_exact(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len_prefix(1)?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid utf-8 string", self.what)))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len_prefix(1)?;
        Ok(self.take(n)?.to_vec())
    }

    /// Confirms the payload was consumed exactly and the checksum matches.
    pub fn finish(self) -> Result<()> {
        if self.pos + 4 != self.buf.len() {
            return format(format!(
                "{}: {} trailing bytes after payload",
                self.what,
                self.buf.len() - self.pos - 4
            ));
        }
        let stored = u32::from_le_bytes(self.buf[self.pos..].try_into().unwrap());
        let actual = crc32fast::hash(&self.buf[..self.pos]);
        if stored != actual {
            return format(format!("{}: checksum mismatch", self.what));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}
