//! CIFAR-10 binary format: a flat sequence of 3073-byte records, each one
//! label byte followed by 3072 bytes of 32x32 RGB pixel data in channel-major
//! order.

use std::path::Path;

use super::{standardize, Dataset};
use crate::error::{io_err, HarnessError, HarnessResult};

pub const RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;

/// Splits a file into (label, pixels) records.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> HarnessResult<Vec<(u8, Vec<u8>)>> {
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        let whole = bytes.len() - bytes.len() % RECORD_BYTES;
        return Err(HarnessError::Format {
            path: path.to_path_buf(),
            offset: whole as u64,
            message: format!(
                "file length {} is not a positive multiple of the {RECORD_BYTES}-byte record size",
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(RECORD_BYTES)
        .map(|rec| (rec[0], rec[1..].to_vec()))
        .collect())
}

fn load_files(paths: &[std::path::PathBuf], mean: &[f64], std: &[f64]) -> HarnessResult<Dataset> {
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        for (ri, (label, pixels)) in parse_cifar_records(&bytes, path)?.into_iter().enumerate() {
            if label > 9 {
                return Err(HarnessError::Format {
                    path: path.clone(),
                    offset: (ri * RECORD_BYTES) as u64,
                    message: format!("label byte {label} outside 0..=9"),
                });
            }
            labels.push(label as usize);
            raw.push(pixels);
        }
    }
    let images = standardize(raw, 3, SIDE * SIDE, mean, std)?;
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: SIDE,
        width: SIDE,
        classes: 10,
    })
}

/// Loads `data_batch_1.bin` through `data_batch_5.bin` as the training set and
/// `test_batch.bin` as the eval set.
pub fn load_cifar_dir(dir: &Path, mean: &[f64], std: &[f64]) -> HarnessResult<(Dataset, Dataset)> {
    let train_paths: Vec<_> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let train = load_files(&train_paths, mean, std)?;
    let eval = load_files(&[dir.join("test_batch.bin")], mean, std)?;
    Ok((train, eval))
}
