//! Model presets: small convolutional classifiers built from the core layer
//! zoo, with a normalizer after every convolution.

use cbn_core::network::LayerSpec;
use cbn_core::normalizers::{BnConfig, NormalizerKind};

use crate::error::{HarnessError, HarnessResult};

fn conv_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> HarnessResult<usize> {
    let padded = extent + 2 * padding;
    if padded < kernel {
        return Err(HarnessError::Argument(format!(
            "image extent {extent} too small for kernel {kernel} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Appends one conv -> normalizer -> relu block and returns the new shape.
fn push_block(
    layers: &mut Vec<LayerSpec>,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    hw: (usize, usize),
    kind: NormalizerKind,
    cfg: &BnConfig,
) -> HarnessResult<(usize, usize)> {
    layers.push(LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel: (3, 3),
        stride: (stride, stride),
        padding: (1, 1),
    });
    layers.push(LayerSpec::Normalizer {
        kind,
        cfg: cfg.clone(),
    });
    layers.push(LayerSpec::Relu);
    Ok((
        conv_out(hw.0, 3, stride, 1)?,
        conv_out(hw.1, 3, stride, 1)?,
    ))
}

/// Channel widths and strides of each preset's conv blocks.
fn preset_blocks(preset: &str) -> HarnessResult<&'static [(usize, usize)]> {
    match preset {
        // Four blocks: 16/32/32/64 channels, downsampling from the second on.
        "desk4" => Ok(&[(16, 1), (32, 2), (32, 2), (64, 2)]),
        // Two blocks for fast tests.
        "tiny" => Ok(&[(8, 2), (16, 2)]),
        other => Err(HarnessError::Argument(format!(
            "unknown model preset {other:?} (available: desk4, tiny)"
        ))),
    }
}

/// Builds the layer list for a preset: conv blocks, global average pooling,
/// and a fully connected classification head.
pub fn preset_layers(
    preset: &str,
    input: (usize, usize, usize),
    classes: usize,
    kind: NormalizerKind,
    cfg: &BnConfig,
) -> HarnessResult<Vec<LayerSpec>> {
    if classes < 2 {
        return Err(HarnessError::Argument(
            "classification needs at least 2 classes".into(),
        ));
    }
    let blocks = preset_blocks(preset)?;
    let (mut channels, mut h, mut w) = input;
    let mut layers = Vec::new();
    for &(out_channels, stride) in blocks {
        let hw = push_block(
            &mut layers,
            channels,
            out_channels,
            stride,
            (h, w),
            kind,
            cfg,
        )?;
        channels = out_channels;
        h = hw.0;
        w = hw.1;
    }
    if h == 0 || w == 0 {
        return Err(HarnessError::Argument(format!(
            "input {input:?} collapses to zero spatial extent in preset {preset}"
        )));
    }
    // Global average pooling down to one value per channel.
    layers.push(LayerSpec::AvgPool {
        kernel: (h, w),
        stride: (h, w),
    });
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::FullyConnected {
        in_features: channels,
        out_features: classes,
    });
    Ok(layers)
}
