//! IDX files: big-endian `u32` magic, big-endian `u32` extents, then
//! unsigned bytes in row-major order.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            detail: "file truncated inside the header".into(),
        })
}

/// Parses an unsigned-byte IDX buffer whose magic must equal `expected`.
pub fn parse_idx(bytes: &[u8], expected: u32) -> Result<IdxArray> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            detail: format!("magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() < count {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!("expected {count} data bytes after the header, found {}", body.len()),
        });
    }
    if body.len() > count {
        return Err(Error::Format {
            offset: (header + count) as u64,
            detail: format!("{} trailing bytes", body.len() - count),
        });
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Loads an image/label pair. Pixels are scaled to [0, 1]; the digit is the class index.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx(&std::fs::read(images)?, IDX_IMAGES_MAGIC)?;
    let lab = parse_idx(&std::fs::read(labels)?, IDX_LABELS_MAGIC)?;
    if img.dims[0] != lab.dims[0] {
        return Err(Error::Format {
            offset: 4,
            detail: format!("{} images but {} labels", img.dims[0], lab.dims[0]),
        });
    }
    let num_classes = 10;
    if let Some(pos) = lab.data.iter().position(|&y| y as usize >= num_classes) {
        return Err(Error::Format {
            offset: (8 + pos) as u64,
            detail: format!("label {} is not a digit", lab.data[pos]),
        });
    }
    Dataset::new(
        img.data.iter().map(|&p| p as f64 / 255.0).collect(),
        vec![1, img.dims[1], img.dims[2]],
        lab.data.iter().map(|&y| y as usize).collect(),
        num_classes,
        Split::Train,
    )
}

/// Writes a `[N, 1, H, W]` dataset with inputs in [0, 1] as an IDX pair.
pub fn write_mnist_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let [1, h, w] = ds.sample_shape()[..] else {
        return Err(Error::dim("IDX images need sample shape [1, H, W]"));
    };
    let pixels: Vec<u8> = ds.inputs().iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let labs: Vec<u8> = ds.labels().iter().map(|&y| y as u8).collect();
    std::fs::write(images, encode_idx(IDX_IMAGES_MAGIC, &[ds.len(), h, w], &pixels))?;
    std::fs::write(labels, encode_idx(IDX_LABELS_MAGIC, &[ds.len()], &labs))?;
    Ok(())
}
