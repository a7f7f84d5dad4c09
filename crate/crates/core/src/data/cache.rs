//! Binary cache of an encoded dataset.
//!
//! Layout (little-endian): 8-byte magic, 8-byte schema hash, `u64` row
//! count, `u32` field count, row-major `u32` indices, then one `u8` label per
//! row.

use std::io::{Read, Write};

use super::EncodedDataset;
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"CTRKENC1";

pub fn write_cache<W: Write>(w: &mut W, ds: &EncodedDataset, schema_hash: [u8; 8]) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&schema_hash)?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    w.write_all(&(ds.num_fields() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(ds.indices().len() * 4);
    for ix in ds.indices() {
        buf.extend_from_slice(&ix.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.write_all(ds.labels())?;
    Ok(())
}

/// Reads a cache, returning the stored schema hash with the dataset. When
/// `expect_hash` is given, a different stored hash is a schema error.
pub fn read_cache<R: Read>(r: &mut R, expect_hash: Option<[u8; 8]>) -> Result<([u8; 8], EncodedDataset)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let fmt = |m: &str| Error::Format(format!("encoded cache: {}", m));
    if bytes.len() < 28 {
        return Err(fmt("truncated header"));
    }
    if &bytes[..8] != CACHE_MAGIC {
        return Err(fmt("bad magic"));
    }
    let mut hash = [0u8; 8];
    hash.copy_from_slice(&bytes[8..16]);
    if let Some(want) = expect_hash {
        if want != hash {
            return Err(Error::Schema("encoded cache was built for a different schema".into()));
        }
    }
    let rows = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let fields = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as u64;
    let body = &bytes[28..];
    let want = rows
        .checked_mul(fields)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(rows))
        .ok_or_else(|| fmt("size overflow"))?;
    if body.len() as u64 != want {
        return Err(fmt("payload length does not match header"));
    }
    let n_idx = (rows * fields) as usize;
    let indices = body[..n_idx * 4]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = body[n_idx * 4..].to_vec();
    let ds = EncodedDataset::new(fields as usize, indices, labels).map_err(|_| fmt("labels must be 0 or 1"))?;
    Ok((hash, ds))
}
