use std::path::Path;

use super::{read_bytes, write_bytes, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GRID_MAGIC: [u8; 4] = *b"SSGR";
pub const MASK_MAGIC: [u8; 4] = *b"SSMK";
pub const FORMAT_VERSION: u32 = 1;

/// Largest rank a grid header may declare.
const MAX_RANK: u32 = 16;

pub fn encode_grid(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(&GRID_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn header(r: &mut Reader<'_>, magic: [u8; 4], what: &str) -> Result<()> {
    if r.take(4, "magic")? != magic {
        return Err(Error::Format(format!("not a {what} file (bad magic)")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported {what} version {version}"
        )));
    }
    Ok(())
}

pub fn decode_grid(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes);
    header(&mut r, GRID_MAGIC, "grid")?;
    let rank = r.u32("rank")?;
    if rank > MAX_RANK {
        return Err(Error::Format(format!(
            "grid rank {rank} exceeds {MAX_RANK}"
        )));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count = 1usize;
    for _ in 0..rank {
        let e = r.u32("extent")? as usize;
        count = count
            .checked_mul(e)
            .ok_or_else(|| Error::Format("grid extents overflow".into()))?;
        shape.push(e);
    }
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::Format("grid extents overflow".into()))?;
    if r.remaining() != expected {
        return Err(Error::Format(format!(
            "grid payload is {} bytes, extents {shape:?} need {expected}",
            r.remaining()
        )));
    }
    let payload = r.take(expected, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_grid(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_grid(t))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_grid(&read_bytes(path.as_ref())?)
}

/// A label map: 0 is background, `1..=C` are classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskFile {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

impl MaskFile {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    /// Classes with at least one pixel, ascending, background excluded.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = [false; 256];
        for &v in &self.ids {
            seen[v as usize] = true;
        }
        (1..256).filter(|&c| seen[c]).collect()
    }

    pub fn max_id(&self) -> u8 {
        self.ids.iter().copied().max().unwrap_or(0)
    }
}

pub fn encode_mask(m: &MaskFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + m.ids.len());
    out.extend_from_slice(&MASK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.height as u32).to_le_bytes());
    out.extend_from_slice(&(m.width as u32).to_le_bytes());
    out.extend_from_slice(&m.ids);
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskFile> {
    let mut r = Reader::new(bytes);
    header(&mut r, MASK_MAGIC, "mask")?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| Error::Format("mask extents overflow".into()))?;
    if r.remaining() != n {
        return Err(Error::Format(format!(
            "mask payload is {} bytes, {h}x{w} needs {n}",
            r.remaining()
        )));
    }
    let ids = r.take(n, "payload")?.to_vec();
    r.finish("mask payload")?;
    Ok(MaskFile {
        height: h,
        width: w,
        ids,
    })
}

pub fn write_mask(path: impl AsRef<Path>, m: &MaskFile) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mask(m))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskFile> {
    decode_mask(&read_bytes(path.as_ref())?)
}
