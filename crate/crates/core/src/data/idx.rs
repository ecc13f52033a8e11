//! IDX files as distributed for MNIST (big-endian headers, `u8` payload).

use super::LabeledDataset;
use crate::error::{format, Result};
use crate::nn::Tensor;
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().unwrap())),
        None => format(format!("{what}: header truncated")),
    }
}

/// Parses in-memory IDX image/label files; pixels are scaled by `1/255`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return format(format!("images: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return format(format!("labels: magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return format(format!("{n} images but {n_labels} labels"));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return format("images: empty dimensions");
    }
    let pixels = &images[16..];
    let expected = n * rows * cols;
    if pixels.len() != expected {
        return format(format!("images: {} payload bytes, expected {expected}", pixels.len()));
    }
    let raw_labels = &labels[8..];
    if raw_labels.len() != n {
        return format(format!("labels: {} payload bytes, expected {n}", raw_labels.len()));
    }
    let data: Vec<f64> = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let images = Tensor::new(vec![n, rows, cols, 1], data)?;
    LabeledDataset::clean(images, labels, classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}
