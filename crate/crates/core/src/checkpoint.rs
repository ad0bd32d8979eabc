//! Binary checkpoint format for a [`ParamStore`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "AGCK" | version u32 | body_len u64 | body | sha256(body) (32 bytes)
//! body = count u32, then per tensor:
//!        name_len u32 | name utf-8 | rows u64 | cols u64 | trainable u8 | rows*cols f64
//! ```
//!
//! Values are stored as f64 so that save followed by load is bitwise exact for
//! the in-memory representation.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Mat, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"AGCK";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;
const DIGEST_LEN: usize = 32;

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut body = Vec::with_capacity(params.parameter_count() * 8 + 64 * params.len());
    body.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params.tensors() {
        body.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        body.extend_from_slice(t.name.as_bytes());
        body.extend_from_slice(&(t.value.rows as u64).to_le_bytes());
        body.extend_from_slice(&(t.value.cols as u64).to_le_bytes());
        body.push(t.trainable as u8);
        for v in &t.value.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&Sha256::digest(&body));
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CheckpointFormat("record runs past the end of the body".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::CheckpointTruncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let available = (bytes.len() - HEADER_LEN) as u64;
    if body_len.saturating_add(DIGEST_LEN as u64) > available {
        return Err(Error::CheckpointTruncated);
    }
    let body_len = body_len as usize;
    if available as usize != body_len + DIGEST_LEN {
        return Err(Error::CheckpointFormat("trailing bytes after digest".into()));
    }
    let body = &bytes[HEADER_LEN..HEADER_LEN + body_len];
    let digest = &bytes[HEADER_LEN + body_len..];
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CheckpointChecksum);
    }

    let mut r = Reader { buf: body, pos: 0 };
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CheckpointFormat("tensor name is not utf-8".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::CheckpointFormat(format!("bad trainable flag {b} for `{name}`"))),
        };
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::CheckpointFormat(format!("shape overflow for `{name}`")))?;
        let data = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor {
            name,
            value: Mat::from_vec(rows, cols, data),
            trainable,
        });
    }
    if r.pos != body.len() {
        return Err(Error::CheckpointFormat("unused bytes in body".into()));
    }
    ParamStore::from_tensors(tensors)
}

/// Writes to a temporary file in the target directory, then renames it into place.
pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it has exactly the tensors and shapes of `template`.
pub fn load_compatible(path: &Path, template: &ParamStore) -> Result<ParamStore> {
    let loaded = load_checkpoint(path)?;
    template.ensure_compatible(&loaded)?;
    Ok(loaded)
}

/// Writes through a temporary file in the same directory, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
