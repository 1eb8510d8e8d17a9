//! # Checkpoint layout
//!
//! All integers and reals little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `SAAF` |
//! | 4 | 4 | u32 version (1) |
//! | 8 | 24 | u32 bands, embed, heads, depth, patch, classes |
//! | 32 | 8 | f64 dropout |
//! | 40 | 4 | u32 level count L |
//! | 44 | 4·L | u32 partition length per level |
//! | … | 8 | u64 scalar count S |
//! | … | 4·S | f32 values of every store entry in declaration order |
//!
//! Store entries include the batch-norm running statistics. S must equal
//! [`SaaFormerConfig::parameter_count`] for the decoded configuration.

use std::path::Path;

use super::{SaaFormer, SaaFormerConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SAAF";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::ExtentOverflow(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &SaaFormer) -> Result<Vec<u8>> {
    let c = model.config();
    let count = model.store().total_count();
    let mut out = Vec::with_capacity(52 + 4 * c.levels.len() + 4 * count);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.bands, c.embed, c.heads, c.depth, c.patch, c.classes] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&c.dropout.to_le_bytes());
    put_u32(&mut out, c.levels.len())?;
    for &l in &c.levels {
        put_u32(&mut out, l)?;
    }
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for entry in model.store().entries() {
        for &v in entry.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(len)
            .ok_or_else(|| Error::ExtentOverflow("offset overflow".into()))?;
        let slice = self.bytes.get(self.at..end).ok_or(Error::Truncated {
            needed: end,
            available: self.bytes.len(),
        })?;
        self.at = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes. The configuration is validated and the scalar
/// count checked against the remaining length before any model is built.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<SaaFormer> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (bands, embed, heads, depth, patch, classes) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let dropout = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let level_count = r.u32()?;
    let raw = r.take(level_count.checked_mul(4).ok_or_else(|| Error::ExtentOverflow("level count".into()))?)?;
    let levels = raw
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    let config = SaaFormerConfig {
        bands,
        embed,
        heads,
        depth,
        levels,
        patch,
        dropout,
        classes,
    };
    config.validate().map_err(|e| Error::Malformed(e.to_string()))?;

    let count = r.u64()?;
    let expected = config.parameter_count();
    if u128::from(count) != expected {
        return Err(Error::Malformed(format!(
            "scalar count {count} does not match the {expected} implied by the configuration"
        )));
    }
    let remaining = bytes.len() - r.at;
    let needed = 4 * u128::from(count);
    if (remaining as u128) < needed {
        return Err(Error::Truncated {
            needed: r.at.saturating_add(needed.min(usize::MAX as u128) as usize),
            available: bytes.len(),
        });
    }
    if remaining as u128 > needed {
        return Err(Error::TrailingBytes(remaining - needed as usize));
    }

    let mut model = SaaFormer::new(config, 0)?;
    for entry in model.store_mut().entries_mut() {
        let raw = r.take(4 * entry.tensor.numel())?;
        for (dst, b) in entry.tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(Error::Malformed(format!("non-finite value in {}", entry.name)));
            }
            *dst = f64::from(v);
        }
    }
    Ok(model)
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &SaaFormer) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<SaaFormer> {
    decode_checkpoint(&std::fs::read(path)?)
}
