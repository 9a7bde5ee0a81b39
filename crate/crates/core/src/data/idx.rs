//! IDX container: big-endian `u32` magic and dimensions followed by raw
//! `u8` payload. Files ending in `.gz` (or starting with the gzip magic)
//! are transparently (de)compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Truncated(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let payload = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, payload).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("header ends before {what}")))
}

/// Raw pixel bytes of an image file: `(count, rows, cols, payload)`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Truncated(format!(
            "{n} images of {rows}x{cols} need {need} bytes, found {}",
            payload.len()
        )));
    }
    Ok((n, rows, cols, &payload[..need]))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Truncated(format!(
            "{n} labels declared, {} bytes present",
            payload.len()
        )));
    }
    Ok(&payload[..n])
}

/// Loads an image/label file pair. Pixels are scaled to `[0,1]`; the class
/// count is one past the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    load_idx_with_classes(images_path, labels_path, None)
}

pub fn load_idx_with_classes(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    num_classes: Option<usize>,
) -> Result<LabeledDataset> {
    let img_bytes = read_bytes(images_path.as_ref())?;
    let lbl_bytes = read_bytes(labels_path.as_ref())?;
    let (n, rows, cols, pixels) = read_idx_images(&img_bytes)?;
    let labels = read_idx_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let plane = rows * cols;
    let images = (0..n)
        .map(|i| {
            let data = pixels[i * plane..(i + 1) * plane]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            Tensor::new(vec![1, rows, cols], data)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    LabeledDataset::new(images, labels, k)
}

/// Writes a single-channel dataset as an IDX pair; pixels are quantized to
/// `round(255 * v)`. A `.gz` suffix selects gzip compression.
pub fn write_idx(ds: &LabeledDataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (rows, cols) = match ds.image_shape() {
        Some(&[1, h, w]) => (h, w),
        Some(s) => {
            return Err(Error::Shape(format!(
                "IDX images must be single-channel, got {s:?}"
            )))
        }
        None => (0, 0),
    };
    if ds.num_classes > 256 {
        return Err(Error::Contract("IDX labels hold at most 256 classes".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * rows * cols);
    for v in [IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for t in &ds.images {
        img.extend(t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut lbl = Vec::with_capacity(8 + ds.len());
    for v in [LABELS_MAGIC, ds.len() as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend(ds.labels.iter().map(|&l| l as u8));
    write_bytes(images_path.as_ref(), &img)?;
    write_bytes(labels_path.as_ref(), &lbl)
}
