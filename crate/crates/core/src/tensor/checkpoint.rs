//! The `LDFT` named-tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "LDFT" | version u32 | entry_count u32
//! per entry: name_len u16 | name utf-8 | rank u8 | extents u32 x rank | f32 x numel
//! ```

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LDFT";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| Error::invalid("too many entries"))?.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("rank exceeds 255"))?;
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::invalid("extent exceeds u32"))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn fail(&self, reason: &str) -> Error {
        Error::Format { path: self.origin.to_owned(), reason: reason.to_owned() }
    }
}

pub fn decode(buf: &[u8], origin: &str) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0, origin };
    if r.take(4)? != MAGIC {
        return Err(r.fail("bad magic, not an LDFT container"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(&format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| r.fail("entry name is not UTF-8"))?.to_owned();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel.checked_mul(4).ok_or_else(|| r.fail("oversized entry"))?)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.fail(&format!("entry {name}: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
