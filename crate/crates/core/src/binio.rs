//! Shared plumbing for the versioned file formats: a text header terminated
//! by a blank line followed by little-endian binary payloads.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Splits `bytes` at the first blank line after `magic`. Returns the header
/// text (without the magic line) and the payload offset.
pub fn split_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(&'a str, usize)> {
    let first_nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format {
            offset: 0,
            detail: "missing header line".into(),
        })?;
    if &bytes[..first_nl] != magic.as_bytes() {
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "expected magic {magic:?}, found {:?}",
                String::from_utf8_lossy(&bytes[..first_nl.min(32)])
            ),
        });
    }
    // The magic line's own newline may start the terminator (empty header).
    let end = bytes[first_nl..]
        .windows(2)
        .position(|w| w == b"\n\n")
        .map(|p| first_nl + p)
        .ok_or_else(|| Error::Format {
            offset: bytes.len(),
            detail: "header is not terminated by a blank line".into(),
        })?;
    let body = if end > first_nl { &bytes[first_nl + 1..end + 1] } else { &[][..] };
    let text = std::str::from_utf8(body).map_err(|e| Error::Format {
        offset: first_nl + 1 + e.valid_up_to(),
        detail: "header is not valid UTF-8".into(),
    })?;
    Ok((text, end + 2))
}

/// Bounds-checked little-endian reader that reports byte offsets.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                detail: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// Reads a u64 length and checks it against `expected`.
    pub fn len_field(&mut self, expected: usize, what: &str) -> Result<()> {
        let at = self.pos;
        let got = self.u64(what)?;
        if got != expected as u64 {
            return Err(Error::Format {
                offset: at,
                detail: format!("{what} length {got}, header implies {expected}"),
            });
        }
        Ok(())
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format {
                offset: self.pos,
                detail: format!("{what} too large"),
            })?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        self.take(n, what)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Converts a header parse failure into a format error at offset 0.
pub fn header_error(e: Error) -> Error {
    match e {
        Error::Config(detail) => Error::Format { offset: 0, detail },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_split_and_reader() {
        let mut buf = b"MAGIC\na=1\n\n".to_vec();
        put_u64(&mut buf, 2);
        put_f64s(&mut buf, &[1.5, -0.25]);
        let (text, off) = split_header(&buf, "MAGIC").unwrap();
        assert_eq!(text, "a=1\n");
        let mut r = Reader::new(&buf, off);
        r.len_field(2, "payload").unwrap();
        assert_eq!(r.f64s(2, "payload").unwrap(), vec![1.5, -0.25]);
        r.finish().unwrap();
    }

    #[test]
    fn truncation_reports_offset() {
        let buf = b"M\n\n\x01\x02".to_vec();
        let (_, off) = split_header(&buf, "M").unwrap();
        match Reader::new(&buf, off).u64("length") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("{other:?}"),
        }
        assert!(split_header(b"X\n\n", "M").is_err());
        assert!(split_header(b"M\na=1\n", "M").is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(read_file(&p).unwrap(), b"two");
    }
}
