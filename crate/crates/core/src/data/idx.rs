//! IDX (MNIST-style) reader and writer. Big-endian header: magic, then one
//! u32 per dimension, then raw u8 payload.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use super::LabeledDataset;
use crate::error::{LabError, Result};
use crate::matrix::Matrix;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(BigEndian::read_u32)
        .ok_or_else(|| LabError::Format {
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(LabError::Format {
            offset: 0,
            message: format!("magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    if bytes.len() < start + len {
        return Err(LabError::Format {
            offset: bytes.len() as u64,
            message: format!(
                "truncated payload: need {} bytes, file has {}",
                start + len,
                bytes.len()
            ),
        });
    }
    Ok(&bytes[start..start + len])
}

/// Parses an image file into `(count, pixels per image, bytes)`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = rows * cols;
    let data = payload(bytes, 16, count * pixels)?;
    Ok((count, pixels, data.to_vec()))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

/// Loads an IDX image/label pair, scaling pixels by `1/255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (count, pixels, data) = read_idx_images(&fs::read(images_path)?)?;
    let labels = read_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != count {
        return Err(LabError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let samples = Matrix::from_vec(count, pixels, data.iter().map(|&b| f64::from(b) / 255.0).collect())?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(samples, labels, class_count)
}

pub fn write_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; 16];
    BigEndian::write_u32(&mut out[0..4], IMAGES_MAGIC);
    BigEndian::write_u32(&mut out[4..8], count as u32);
    BigEndian::write_u32(&mut out[8..12], rows as u32);
    BigEndian::write_u32(&mut out[12..16], cols as u32);
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; 8];
    BigEndian::write_u32(&mut out[0..4], LABELS_MAGIC);
    BigEndian::write_u32(&mut out[4..8], labels.len() as u32);
    out.extend_from_slice(labels);
    out
}
