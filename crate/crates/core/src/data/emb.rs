//! `EMB1` embedding container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic "EMB1" | version u32 | dim u32 | count u64 | flags u8 (bit0: ids)
//! | fm_name: u16 len + UTF-8
//! | classes: u16 count, then per name u16 len + UTF-8
//! | labels: count × u16
//! | ids (if flagged): per row u16 len + UTF-8
//! | vectors: count × dim × f32
//! ```

use std::path::Path;

use super::EmbeddingDataset;
use crate::error::{format_err, validation_err, Result};
use crate::io::{write_atomic, Reader};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB_VERSION: u32 = 1;
const FLAG_IDS: u8 = 1;

fn push_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| validation_err!("string longer than 65535 bytes"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn write_embedding_bytes(ds: &EmbeddingDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut out = Vec::with_capacity(64 + ds.count() * (2 + 4 * ds.dim));
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.count() as u64).to_le_bytes());
    out.push(if ds.sample_ids.is_some() { FLAG_IDS } else { 0 });
    push_str(&mut out, &ds.fm_name)?;
    out.extend_from_slice(&(ds.class_names.len() as u16).to_le_bytes());
    for name in &ds.class_names {
        push_str(&mut out, name)?;
    }
    for &l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    if let Some(ids) = &ds.sample_ids {
        for id in ids {
            push_str(&mut out, id)?;
        }
    }
    for &v in &ds.vectors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_embedding_bytes(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != EMB_MAGIC {
        return Err(format_err!("not an EMB1 file (bad magic)"));
    }
    let version = r.u32()?;
    if version != EMB_VERSION {
        return Err(format_err!("unsupported EMB version {version}"));
    }
    let dim = r.u32()? as usize;
    let count = usize::try_from(r.u64()?).map_err(|_| format_err!("row count overflows"))?;
    let flags = r.u8()?;
    if flags & !FLAG_IDS != 0 {
        return Err(format_err!("unknown flag bits {flags:#04x}"));
    }
    let fm_name = r.short_str()?;
    let n_names = r.u16()? as usize;
    let class_names = (0..n_names).map(|_| r.short_str()).collect::<Result<Vec<_>>>()?;
    // Bound allocations by what the buffer can actually hold.
    if count.saturating_mul(2) > r.remaining() {
        return Err(format_err!("truncated input: header declares {count} rows"));
    }
    let labels = (0..count).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    let sample_ids = if flags & FLAG_IDS != 0 {
        Some((0..count).map(|_| r.short_str()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let n_values = count
        .checked_mul(dim)
        .filter(|n| n.saturating_mul(4) == r.remaining())
        .ok_or_else(|| {
            format_err!(
                "payload holds {} bytes, header declares {count} rows of dimension {dim}",
                r.remaining()
            )
        })?;
    let vectors = (0..n_values).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let ds = EmbeddingDataset {
        dim,
        fm_name,
        class_names,
        labels,
        vectors,
        sample_ids,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_embedding_file(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    write_atomic(path, &write_embedding_bytes(ds)?)
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingDataset> {
    read_embedding_bytes(&std::fs::read(path)?)
}
