//! Binary tensor blobs and the named-parameter checkpoint container.
//!
//! A blob is an 8-byte shape header (four little-endian `u16` dimensions,
//! unused trailing dimensions set to 0) followed by the elements as
//! little-endian `f32` in row-major order. Dataset files are plain
//! concatenations of blobs; the manifest records each blob's byte offset.
//!
//! A checkpoint is `b"AVCK"`, a `u32` format version, a `u32` tensor count,
//! then per tensor a `u16` name length, the UTF-8 name and one blob.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SHAPE_HEADER_BYTES: usize = 8;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A dense row-major `f32` array with at most four dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Blob {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::shape(format!("blob rank must be 1..=4, got {}", shape.len())));
        }
        if let Some(&d) = shape.iter().find(|&&d| d == 0 || d > u16::MAX as usize) {
            return Err(Error::shape(format!("blob dimension {d} outside 1..=65535")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn byte_len(&self) -> usize {
        SHAPE_HEADER_BYTES + 4 * self.data.len()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = [0u8; SHAPE_HEADER_BYTES];
        for (i, &d) in self.shape.iter().enumerate() {
            header[2 * i..2 * i + 2].copy_from_slice(&(d as u16).to_le_bytes());
        }
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut header = [0u8; SHAPE_HEADER_BYTES];
        r.read_exact(&mut header)?;
        let mut shape = Vec::with_capacity(4);
        for i in 0..4 {
            let d = u16::from_le_bytes([header[2 * i], header[2 * i + 1]]) as usize;
            if d == 0 {
                break;
            }
            shape.push(d);
        }
        if shape.is_empty() {
            return Err(Error::shape("blob header has no dimensions"));
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data })
    }

    /// Reads the blob starting at `offset` of an in-memory file image.
    pub fn read_at(bytes: &[u8], offset: usize) -> Result<Self> {
        let slice = bytes
            .get(offset..)
            .ok_or_else(|| Error::invalid(format!("blob offset {offset} past end of file")))?;
        Self::read_from(&mut &slice[..])
    }
}

/// Writes named tensors as a versioned checkpoint. Order is preserved.
pub fn write_checkpoint(path: &Path, tensors: &[(String, Blob)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, blob) in tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("tensor name too long: {name}")));
        }
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        blob.write_to(&mut out)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Blob)>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Missing(format!("checkpoint {}: {e}", path.display())))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut cursor = &bytes[12..];
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        cursor.read_exact(&mut len).map_err(|_| bad("truncated name length"))?;
        let len = u16::from_le_bytes(len) as usize;
        if cursor.len() < len {
            return Err(bad("truncated tensor name"));
        }
        let name = std::str::from_utf8(&cursor[..len])
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        cursor = &cursor[len..];
        let blob = Blob::read_from(&mut cursor).map_err(|e| bad(&format!("tensor {name}: {e}")))?;
        tensors.push((name, blob));
    }
    Ok(tensors)
}
