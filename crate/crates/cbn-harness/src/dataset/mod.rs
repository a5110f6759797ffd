//! Dataset loading: IDX and CIFAR-10 binary files plus a generated set.
//!
//! All loaders produce the same in-memory form: standardized `f64` images in
//! channel-major order with integer labels, in a deterministic order. File
//! pixels are scaled to [0, 1] and then standardized with per-channel
//! constants; the generated dataset is produced directly in standardized
//! units.

mod cifar;
mod idx;
mod synthetic;

pub use cifar::{load_cifar_dir, parse_cifar_records};
pub use idx::{load_mnist_dir, parse_idx_images, parse_idx_labels};
pub use synthetic::generate_synthetic;

use cbn_core::tensor::{Rng, Tensor};

use crate::config::{AugmentSpec, DatasetKind, DatasetSpec};
use crate::error::{HarnessError, HarnessResult};

/// In-memory labeled image set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One flattened channel-major image per example.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Assembles the examples at `indices` into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> HarnessResult<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(HarnessError::Argument("batch indices are empty".into()));
        }
        let plane = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self.images.get(i).ok_or_else(|| {
                HarnessError::Argument(format!("example index {i} out of range ({})", self.len()))
            })?;
            data.extend_from_slice(img);
            labels.push(self.labels[i]);
        }
        let x = Tensor::from_vec(
            &[indices.len(), self.channels, self.height, self.width],
            data,
        )?;
        Ok((x, labels))
    }

    fn truncate(&mut self, keep: Option<usize>) {
        if let Some(n) = keep {
            self.images.truncate(n);
            self.labels.truncate(n);
        }
    }

    fn validate(&self) -> HarnessResult<()> {
        if self.images.len() != self.labels.len() {
            return Err(HarnessError::Argument(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(HarnessError::Argument(format!(
                "label {bad} outside the {} classes",
                self.classes
            )));
        }
        Ok(())
    }
}

/// Scales raw bytes to [0, 1] and standardizes with per-channel constants.
fn standardize(
    raw: Vec<Vec<u8>>,
    channels: usize,
    plane: usize,
    mean: &[f64],
    std: &[f64],
) -> HarnessResult<Vec<Vec<f64>>> {
    if mean.len() != channels || std.len() != channels {
        return Err(HarnessError::Argument(format!(
            "standardization constants cover {} channels but images have {channels}",
            mean.len()
        )));
    }
    if let Some(s) = std.iter().find(|&&s| !(s > 0.0)) {
        return Err(HarnessError::Argument(format!(
            "standardization std must be positive, got {s}"
        )));
    }
    Ok(raw
        .into_iter()
        .map(|img| {
            let mut out = Vec::with_capacity(img.len());
            for (i, &b) in img.iter().enumerate() {
                let c = i / plane;
                out.push((b as f64 / 255.0 - mean[c]) / std[c]);
            }
            out
        })
        .collect())
}

fn resolve_constants(
    spec: &DatasetSpec,
    default_mean: &[f64],
    default_std: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mean = spec.mean.clone().unwrap_or_else(|| default_mean.to_vec());
    let std = spec.std.clone().unwrap_or_else(|| default_std.to_vec());
    (mean, std)
}

/// Loads the train and eval sets selected by a dataset configuration.
pub fn load_dataset(spec: &DatasetSpec) -> HarnessResult<(Dataset, Dataset)> {
    let (mut train, mut eval) = match spec.kind {
        DatasetKind::MnistIdx => {
            let dir = spec.path.as_deref().ok_or_else(|| {
                HarnessError::Argument("mnist-idx needs a `path` directory".into())
            })?;
            let (mean, std) = resolve_constants(spec, &[0.1307], &[0.3081]);
            load_mnist_dir(dir, &mean, &std)?
        }
        DatasetKind::Cifar10Bin => {
            let dir = spec.path.as_deref().ok_or_else(|| {
                HarnessError::Argument("cifar10-bin needs a `path` directory".into())
            })?;
            let (mean, std) = resolve_constants(
                spec,
                &[0.4914, 0.4822, 0.4465],
                &[0.2470, 0.2435, 0.2616],
            );
            load_cifar_dir(dir, &mean, &std)?
        }
        DatasetKind::SyntheticGaussian => generate_synthetic(
            &spec.synthetic,
            spec.train_subset.unwrap_or(512),
            spec.eval_subset.unwrap_or(256),
        )?,
    };
    if spec.kind != DatasetKind::SyntheticGaussian {
        train.truncate(spec.train_subset);
        eval.truncate(spec.eval_subset);
    }
    train.validate()?;
    eval.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(HarnessError::Argument(
            "both train and eval sets must be non-empty".into(),
        ));
    }
    Ok((train, eval))
}

/// Applies the configured augmentations to a batch in place. Draws from the
/// generator in a fixed per-image order, so consumption is reproducible.
pub fn augment_batch(x: &mut Tensor, spec: &AugmentSpec, rng: &mut Rng) -> HarnessResult<()> {
    if !spec.hflip && !spec.random_crop {
        return Ok(());
    }
    let (n, c, h, w) = x.dims4()?;
    for ni in 0..n {
        let flip = spec.hflip && rng.uniform() < 0.5;
        let (dy, dx) = if spec.random_crop {
            let span = 2 * spec.crop_padding + 1;
            (rng.index(span), rng.index(span))
        } else {
            (spec.crop_padding, spec.crop_padding)
        };
        if flip {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w / 2 {
                        let a = x.at(&[ni, ci, hi, wi]);
                        let b = x.at(&[ni, ci, hi, w - 1 - wi]);
                        *x.at_mut(&[ni, ci, hi, wi]) = b;
                        *x.at_mut(&[ni, ci, hi, w - 1 - wi]) = a;
                    }
                }
            }
        }
        if spec.random_crop {
            // Zero-pad by `crop_padding`, then crop back at offset (dy, dx):
            // output pixel (i, j) reads padded (i + dy, j + dx).
            let p = spec.crop_padding;
            let mut plane = vec![0.0; h * w];
            for ci in 0..c {
                for (idx, slot) in plane.iter_mut().enumerate() {
                    let (i, j) = (idx / w, idx % w);
                    let src_i = i + dy;
                    let src_j = j + dx;
                    *slot = if src_i >= p && src_i - p < h && src_j >= p && src_j - p < w {
                        x.at(&[ni, ci, src_i - p, src_j - p])
                    } else {
                        0.0
                    };
                }
                for (idx, &v) in plane.iter().enumerate() {
                    *x.at_mut(&[ni, ci, idx / w, idx % w]) = v;
                }
            }
        }
    }
    Ok(())
}
