//! Binary saccade-target file.
//!
//! Little-endian layout: `"SACT"`, u16 version (1), u16 reserved, u32 N,
//! u32 k, u32 record count, then per record u32 image id, u16 label and
//! k × u16 ascending patch indices. The multi-hot vector is rebuilt on read.

use std::fs;
use std::path::Path;

use super::SaccadeRecord;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SACT";
const VERSION: u16 = 1;
pub const SACCADE_HEADER_BYTES: usize = 20;

const WHAT: &str = "saccade-target file";

pub fn encode_saccade_records(num_patches: usize, k: usize, records: &[SaccadeRecord]) -> Result<Vec<u8>> {
    if num_patches > u16::MAX as usize + 1 {
        return Err(Error::InvalidArgument(format!("{num_patches} patches do not fit u16 indices")));
    }
    let mut buf = Vec::with_capacity(SACCADE_HEADER_BYTES + records.len() * (6 + 2 * k));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(num_patches as u32).to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (i, r) in records.iter().enumerate() {
        r.validate()?;
        if r.k() != k || r.num_patches() != num_patches {
            return Err(Error::InvalidArgument(format!(
                "record {i} has k={} N={}, file has k={k} N={num_patches}",
                r.k(),
                r.num_patches()
            )));
        }
        buf.extend_from_slice(&r.image_id.to_le_bytes());
        buf.extend_from_slice(&r.label.to_le_bytes());
        for &idx in &r.indices {
            buf.extend_from_slice(&(idx as u16).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_saccade_file(path: &Path, num_patches: usize, k: usize, records: &[SaccadeRecord]) -> Result<()> {
    let bytes = encode_saccade_records(num_patches, k, records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decoded header and records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaccadeFile {
    pub num_patches: usize,
    pub k: usize,
    pub records: Vec<SaccadeRecord>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, context: impl FnOnce() -> String) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                what: WHAT,
                offset: self.pos as u64,
                detail: format!("truncated: {} needs {n} bytes, {} left", context(), self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, context: impl FnOnce() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }
}

pub fn decode_saccade_records(bytes: &[u8]) -> Result<SaccadeFile> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, || "magic".into())?;
    if magic != MAGIC {
        return Err(Error::Format {
            what: WHAT,
            offset: 0,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u16(|| "version".into())?;
    if version != VERSION {
        return Err(Error::Format {
            what: WHAT,
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    r.u16(|| "reserved".into())?;
    let num_patches = r.u32(|| "patch count".into())? as usize;
    let k = r.u32(|| "k".into())? as usize;
    let count = r.u32(|| "record count".into())? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let start = r.pos as u64;
        let image_id = r.u32(|| format!("record {i} image id"))?;
        let label = r.u16(|| format!("record {i} label"))?;
        let mut indices = Vec::with_capacity(k);
        for j in 0..k {
            indices.push(r.u16(|| format!("record {i} index {j}"))? as usize);
        }
        let rec = SaccadeRecord::new(image_id, label, indices, num_patches).map_err(|e| Error::Format {
            what: WHAT,
            offset: start,
            detail: format!("record {i}: {e}"),
        })?;
        records.push(rec);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            what: WHAT,
            offset: r.pos as u64,
            detail: format!(
                "{} trailing bytes after the {count} records the header declares",
                bytes.len() - r.pos
            ),
        });
    }
    Ok(SaccadeFile {
        num_patches,
        k,
        records,
    })
}

pub fn read_saccade_file(path: &Path) -> Result<SaccadeFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_saccade_records(&bytes)
}
