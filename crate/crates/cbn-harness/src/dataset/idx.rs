//! IDX image/label file parsing (the MNIST container format).
//!
//! Images use magic 0x00000803 (unsigned bytes, 3 dimensions), labels
//! 0x00000801. All integers are big-endian. Errors carry the byte offset at
//! which the problem was detected.

use std::path::Path;

use super::{standardize, Dataset};
use crate::error::{io_err, HarnessError, HarnessResult};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: u64, message: String) -> HarnessError {
    HarnessError::Format {
        path: path.to_path_buf(),
        offset,
        message,
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> HarnessResult<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("file truncated while reading {what} (need {end} bytes)"),
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses an IDX image file into per-image pixel vectors plus (rows, cols).
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> HarnessResult<(Vec<Vec<u8>>, usize, usize)> {
    let magic = read_be_u32(bytes, 0, path, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = read_be_u32(bytes, 4, path, "image count")? as usize;
    let rows = read_be_u32(bytes, 8, path, "row count")? as usize;
    let cols = read_be_u32(bytes, 12, path, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(format_err(path, 8, "zero image extents".into()));
    }
    let plane = rows * cols;
    let need = 16 + count * plane;
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("file truncated: need {need} bytes for {count} images"),
        ));
    }
    let images = (0..count)
        .map(|i| bytes[16 + i * plane..16 + (i + 1) * plane].to_vec())
        .collect();
    Ok((images, rows, cols))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> HarnessResult<Vec<u8>> {
    let magic = read_be_u32(bytes, 0, path, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let count = read_be_u32(bytes, 4, path, "label count")? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("file truncated: need {need} bytes for {count} labels"),
        ));
    }
    Ok(bytes[8..8 + count].to_vec())
}

fn load_pair(images_path: &Path, labels_path: &Path, mean: &[f64], std: &[f64]) -> HarnessResult<Dataset> {
    let image_bytes = std::fs::read(images_path).map_err(|e| io_err(images_path, e))?;
    let label_bytes = std::fs::read(labels_path).map_err(|e| io_err(labels_path, e))?;
    let (raw, rows, cols) = parse_idx_images(&image_bytes, images_path)?;
    let labels = parse_idx_labels(&label_bytes, labels_path)?;
    if raw.len() != labels.len() {
        return Err(HarnessError::Argument(format!(
            "{} has {} images but {} has {} labels",
            images_path.display(),
            raw.len(),
            labels_path.display(),
            labels.len()
        )));
    }
    let images = standardize(raw, 1, rows * cols, mean, std)?;
    Ok(Dataset {
        images,
        labels: labels.into_iter().map(usize::from).collect(),
        channels: 1,
        height: rows,
        width: cols,
        classes: 10,
    })
}

/// Loads the four standard files from a directory:
/// `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
/// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`.
pub fn load_mnist_dir(dir: &Path, mean: &[f64], std: &[f64]) -> HarnessResult<(Dataset, Dataset)> {
    let train = load_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        mean,
        std,
    )?;
    let eval = load_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        mean,
        std,
    )?;
    Ok((train, eval))
}
