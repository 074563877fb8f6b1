//! Binary checkpoint files: a TOML metadata header plus named f64 records,
//! integrity-protected by a trailing SHA-256.
//!
//! Layout: the ASCII magic `VIBCK`, a u32 LE format version, a u64 LE
//! header length, the TOML header bytes, a u64 LE record count, then the
//! records. Each record is: name length (u64 LE), UTF-8 name, rank
//! (u64 LE), dimensions (u64 LE each), data (f64 LE). The final 32 bytes
//! are the SHA-256 of everything before them. Writes are atomic (temp file
//! plus rename).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

const MAGIC: &[u8; 5] = b"VIBCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A named tensor record: name, shape, row-major data.
pub type Record = (String, Vec<usize>, Vec<f64>);

/// Writes `meta` and `records` to `path` atomically.
pub fn save<M: Serialize>(path: &Path, meta: &M, records: &[Record]) -> Result<(), CheckpointError> {
    let header = toml::to_string(meta).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, shape, data) in records {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "record {name} shape/data mismatch");
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint written by [`save`].
pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<Record>), CheckpointError> {
    let raw = fs::read(path)?;
    if raw.len() < MAGIC.len() + 4 + 8 + 8 + 32 {
        return Err(CheckpointError::Format("file too short".into()));
    }
    let (body, digest) = raw.split_at(raw.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut cur = Cursor { buf: body, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC.as_slice() {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let header_len = cur.take_u64()? as usize;
    let header = std::str::from_utf8(cur.take(header_len)?)
        .map_err(|_| CheckpointError::Format("header is not UTF-8".into()))?;
    let meta: M = toml::from_str(header).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let n_records = cur.take_u64()? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let name_len = cur.take_u64()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| CheckpointError::Format("record name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take_u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.take_u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = cur.take(numel * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, shape, data));
    }
    if cur.pos != body.len() {
        return Err(CheckpointError::Format("trailing bytes after records".into()));
    }
    Ok((meta, records))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
