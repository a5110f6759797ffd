//! Experiment configuration: structured text file with a fixed key set.
//!
//! Unknown keys are rejected so that typos cannot silently disable options.
//! Optional keys have documented defaults; `window` defaults to the batch-size
//! rule from the core library.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cbn_core::compensation::suggested_window;
use cbn_core::normalizers::{BnConfig, NormalizerKind};

use crate::error::{io_err, HarnessError, HarnessResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
pub enum DatasetKind {
    #[serde(rename = "mnist-idx")]
    MnistIdx,
    #[serde(rename = "cifar10-bin")]
    Cifar10Bin,
    #[serde(rename = "synthetic-gaussian")]
    SyntheticGaussian,
}

/// Parameters of the generated dataset: class prototypes plus per-image
/// brightness/contrast jitter, which makes per-channel statistics vary
/// strongly between individual images.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Seed of the generator; independent of the training seed so the same
    /// dataset can be reused across training runs.
    pub seed: u64,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Std of the per-pixel noise added to the class prototype.
    pub noise: f64,
    /// Per-image multiplicative jitter: gain drawn from [1 - j, 1 + j].
    pub gain_jitter: f64,
    /// Per-image additive jitter: offset drawn from [-j, j].
    pub offset_jitter: f64,
    /// Scale of the class prototypes; smaller values make classes overlap more.
    pub prototype_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            classes: 4,
            channels: 1,
            height: 12,
            width: 12,
            noise: 0.6,
            gain_jitter: 0.5,
            offset_jitter: 0.8,
            prototype_scale: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Directory holding the data files; unused for the generated dataset.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Cap on training examples (file datasets: first N; generated: exact N).
    #[serde(default)]
    pub train_subset: Option<usize>,
    /// Cap on evaluation examples.
    #[serde(default)]
    pub eval_subset: Option<usize>,
    /// Per-channel standardization mean; defaults depend on the dataset kind.
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    /// Per-channel standardization std.
    #[serde(default)]
    pub std: Option<Vec<f64>>,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
pub enum NormKind {
    #[serde(rename = "bn")]
    Bn,
    #[serde(rename = "naive-cbn")]
    NaiveCbn,
    #[serde(rename = "cbn")]
    Cbn,
}

impl NormKind {
    pub fn core_kind(self) -> NormalizerKind {
        match self {
            NormKind::Bn => NormalizerKind::BatchNorm,
            NormKind::NaiveCbn => NormalizerKind::NaiveCbn,
            NormKind::Cbn => NormalizerKind::Cbn,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::NaiveCbn => "naive-cbn",
            NormKind::Cbn => "cbn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizerSpec {
    pub kind: NormKind,
    /// Statistics window; omitted → ceil(16 / batch size) capped at 8.
    #[serde(default)]
    pub window: Option<usize>,
    /// Burn-in length in epochs, converted to iterations at startup.
    #[serde(default = "default_burn_in_epochs")]
    pub burn_in_epochs: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_running_decay")]
    pub running_decay: f64,
    /// Whether backward sends gradients through the compensation terms.
    #[serde(default = "default_true")]
    pub taylor_backprop: bool,
}

fn default_burn_in_epochs() -> f64 {
    1.0
}

fn default_epsilon() -> f64 {
    1e-5
}

fn default_running_decay() -> f64 {
    0.9
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
pub enum ScheduleKind {
    #[serde(rename = "cosine")]
    Cosine,
    #[serde(rename = "step")]
    Step,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    /// Epochs at which the step schedule multiplies the rate by 0.1.
    #[serde(default)]
    pub milestones: Vec<usize>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            milestones: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    /// Mirror each image horizontally with probability 1/2.
    pub hflip: bool,
    /// Zero-pad then crop back to the original size at a random position.
    pub random_crop: bool,
    pub crop_padding: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            hflip: false,
            random_crop: false,
            crop_padding: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    /// Model preset name; see `model::preset_layers`.
    #[serde(default = "default_model")]
    pub model: String,
    pub normalizer: NormalizerSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub augment: AugmentSpec,
}

fn default_model() -> String {
    "desk4".into()
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> HarnessResult<TrainConfig> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> HarnessResult<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        TrainConfig::from_toml_str(&text)
    }

    pub fn validate(&self) -> HarnessResult<()> {
        if self.batch_size < 1 {
            return Err(HarnessError::Argument("batch size must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(HarnessError::Argument("epochs must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(HarnessError::Argument(format!(
                "base learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HarnessError::Argument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(HarnessError::Argument("weight decay must be non-negative".into()));
        }
        if !(self.normalizer.burn_in_epochs >= 0.0) {
            return Err(HarnessError::Argument(
                "burn-in epochs must be non-negative".into(),
            ));
        }
        if self.schedule.kind == ScheduleKind::Step {
            let ms = &self.schedule.milestones;
            if !ms.windows(2).all(|w| w[0] < w[1]) {
                return Err(HarnessError::Argument(
                    "step milestones must be strictly increasing".into(),
                ));
            }
        }
        if let Some(w) = self.normalizer.window {
            if w < 1 {
                return Err(HarnessError::Argument("window must be at least 1".into()));
            }
        }
        let ds = &self.dataset;
        if ds.kind == DatasetKind::SyntheticGaussian {
            let s = &ds.synthetic;
            if s.classes < 2 {
                return Err(HarnessError::Argument(
                    "the generated dataset needs at least 2 classes".into(),
                ));
            }
            if s.channels == 0 || s.height == 0 || s.width == 0 {
                return Err(HarnessError::Argument(
                    "the generated dataset needs non-empty image extents".into(),
                ));
            }
        } else if ds.path.is_none() {
            return Err(HarnessError::Argument(
                "file-based datasets need a `path`".into(),
            ));
        }
        if let (Some(mean), Some(std)) = (&ds.mean, &ds.std) {
            if mean.len() != std.len() {
                return Err(HarnessError::Argument(
                    "standardization mean and std must have the same length".into(),
                ));
            }
        }
        // The remaining normalizer values share the core validation.
        self.bn_config(1)?;
        Ok(())
    }

    /// Window actually used given the batch size.
    pub fn resolved_window(&self) -> HarnessResult<usize> {
        match self.normalizer.window {
            Some(w) => Ok(w),
            None => Ok(suggested_window(self.batch_size)?),
        }
    }

    /// Core normalizer configuration with burn-in converted to iterations.
    pub fn bn_config(&self, iters_per_epoch: usize) -> HarnessResult<BnConfig> {
        let cfg = BnConfig {
            epsilon: self.normalizer.epsilon,
            running_decay: self.normalizer.running_decay,
            window: self.resolved_window()?,
            burn_in_iters: (self.normalizer.burn_in_epochs * iters_per_epoch as f64).round()
                as u64,
            taylor_backprop: self.normalizer.taylor_backprop,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable label identifying the method for run comparisons, for example
    /// `cbn-k8-bs2`.
    pub fn method_label(&self) -> HarnessResult<String> {
        let kind = self.normalizer.kind;
        let label = match kind {
            NormKind::Bn => format!("bn-bs{}", self.batch_size),
            _ => format!(
                "{}-k{}-bs{}",
                kind.token(),
                self.resolved_window()?,
                self.batch_size
            ),
        };
        Ok(label)
    }
}
