//! Hyperspectral cubes and label maps.
//!
//! # `.hsic` layout
//!
//! All integers and reals little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `HSIC` |
//! | 4 | 4 | u32 version (1) |
//! | 8 | 12 | u32 H, W, C |
//! | 20 | 4·H·W·C | f32 values, row-major, bands interleaved per pixel |
//! | … | 1 | u8 label flag (0 or 1) |
//! | … | 2·H·W | u16 labels, row-major, present iff flag is 1 |

use std::path::Path;

use super::Center;
use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

pub const CUBE_MAGIC: [u8; 4] = *b"HSIC";
pub const CUBE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// `H × W × C` reflectances, band-interleaved by pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(invalid(format!("cube extents must be positive, got {height}x{width}x{bands}")));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(bands))
            .ok_or_else(|| Error::ExtentOverflow(format!("{height}x{width}x{bands}")))?;
        if values.len() != expected {
            return Err(invalid(format!("cube needs {expected} values, got {}", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.bands;
        &self.values[start..start + self.bands]
    }

    /// The `patch × patch` window centred on `(row, col)`, flattened as
    /// `[patch, patch, C]`. Positions outside the scene are mirrored with
    /// the edge pixel repeated (`… 1 0 | 0 1 2 …`).
    pub fn patch(&self, row: usize, col: usize, patch: usize) -> Vec<f64> {
        let r = (patch / 2) as i64;
        let mut out = Vec::with_capacity(patch * patch * self.bands);
        for dr in -r..=r {
            let y = mirror(row as i64 + dr, self.height);
            for dc in -r..=r {
                let x = mirror(col as i64 + dc, self.width);
                out.extend(self.pixel(y, x).iter().map(|&v| f64::from(v)));
            }
        }
        out
    }

    /// Windows of all `centers` as a `[N, patch, patch, C]` tensor.
    pub fn patches(&self, centers: &[Center], patch: usize) -> Result<Tensor> {
        if patch.is_multiple_of(2) {
            return Err(invalid(format!("patch size must be odd, got {patch}")));
        }
        if let Some(&(r, c)) = centers.iter().find(|&&(r, c)| r >= self.height || c >= self.width) {
            return Err(invalid(format!("center ({r}, {c}) outside {}x{} scene", self.height, self.width)));
        }
        let mut data = Vec::with_capacity(centers.len() * patch * patch * self.bands);
        for &(r, c) in centers {
            data.extend(self.patch(r, c, patch));
        }
        Tensor::new(&[centers.len(), patch, patch, self.bands], data)
    }
}

/// Symmetric reflection of `i` into `0..n`.
fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Per-pixel class ids; 0 is unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("label map extents must be positive"));
        }
        if height.checked_mul(width) != Some(labels.len()) {
            return Err(invalid(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height.saturating_mul(width),
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Largest class id, i.e. K.
    pub fn class_count(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Labeled pixels per class; index 0 counts unlabeled pixels.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count() + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Labeled pixels of `class` in row-major order.
    pub fn pixels_of(&self, class: u16) -> Vec<Center> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == class)
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }
}

/// Serialises a cube and optional labels to `.hsic` bytes.
pub fn encode_cube(cube: &HsiCube, labels: Option<&LabelMap>) -> Result<Vec<u8>> {
    if let Some(l) = labels {
        if (l.height, l.width) != (cube.height, cube.width) {
            return Err(invalid(format!(
                "label map {}x{} does not match cube {}x{}",
                l.height, l.width, cube.height, cube.width
            )));
        }
    }
    let label_len = labels.map_or(0, |l| 2 * l.labels.len());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * cube.values.len() + 1 + label_len);
    out.extend_from_slice(&CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    for extent in [cube.height, cube.width, cube.bands] {
        let extent = u32::try_from(extent).map_err(|_| Error::ExtentOverflow(format!("extent {extent} exceeds u32")))?;
        out.extend_from_slice(&extent.to_le_bytes());
    }
    for v in &cube.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match labels {
        Some(l) => {
            out.push(1);
            for v in &l.labels {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    Ok(out)
}

fn take(bytes: &[u8], at: usize, len: usize) -> Result<&[u8]> {
    let end = at.checked_add(len).ok_or_else(|| Error::ExtentOverflow("offset overflow".into()))?;
    bytes.get(at..end).ok_or(Error::Truncated {
        needed: end,
        available: bytes.len(),
    })
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = take(bytes, at, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses `.hsic` bytes. No partial cube is ever returned.
pub fn decode_cube(bytes: &[u8]) -> Result<(HsiCube, Option<LabelMap>)> {
    let magic = take(bytes, 0, 4)?;
    if magic != CUBE_MAGIC {
        return Err(Error::BadMagic {
            expected: CUBE_MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = read_u32(bytes, 4)?;
    if version != CUBE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (h, w, c) = (read_u32(bytes, 8)? as usize, read_u32(bytes, 12)? as usize, read_u32(bytes, 16)? as usize);
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Malformed(format!("zero extent in {h}x{w}x{c}")));
    }
    let overflow = || Error::ExtentOverflow(format!("{h}x{w}x{c} does not fit in memory"));
    let pixels = h.checked_mul(w).ok_or_else(overflow)?;
    let count = pixels.checked_mul(c).ok_or_else(overflow)?;
    let value_bytes = count.checked_mul(4).ok_or_else(overflow)?;
    let raw = take(bytes, HEADER_LEN, value_bytes)?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut at = HEADER_LEN + value_bytes;
    let flag = take(bytes, at, 1)?[0];
    at += 1;
    let labels = match flag {
        0 => None,
        1 => {
            let label_bytes = pixels.checked_mul(2).ok_or_else(overflow)?;
            let raw = take(bytes, at, label_bytes)?;
            at += label_bytes;
            let labels = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
            Some(LabelMap::new(h, w, labels)?)
        }
        other => return Err(Error::Malformed(format!("label flag must be 0 or 1, got {other}"))),
    };
    if at != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - at));
    }
    Ok((HsiCube::new(h, w, c, values)?, labels))
}

pub fn write_cube(path: impl AsRef<Path>, cube: &HsiCube, labels: Option<&LabelMap>) -> Result<()> {
    std::fs::write(path, encode_cube(cube, labels)?)?;
    Ok(())
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<(HsiCube, Option<LabelMap>)> {
    decode_cube(&std::fs::read(path)?)
}
