//! Direct 2-D convolution (cross-correlation) with zero padding.

use super::Tensor;
use crate::error::{CoreError, CoreResult};

/// Output spatial extent for one axis: floor((extent + 2*pad - kernel) / stride) + 1.
fn out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> CoreResult<usize> {
    if stride == 0 {
        return Err(CoreError::Argument("stride must be at least 1".into()));
    }
    let padded = extent + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(CoreError::Shape(format!(
            "kernel extent {kernel} incompatible with padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output (height, width) of a convolution over an H x W input.
pub fn conv2d_output_hw(
    input_hw: (usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> CoreResult<(usize, usize)> {
    Ok((
        out_extent(input_hw.0, kernel.0, stride.0, padding.0)?,
        out_extent(input_hw.1, kernel.1, stride.1, padding.1)?,
    ))
}

/// Convolves `input` (N x C_in x H x W) with `weight` (C_out x C_in x K_h x K_w)
/// as a cross-correlation: no kernel flip, zero padding, no bias.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> CoreResult<Tensor> {
    let (n, c_in, h, w) = input.dims4()?;
    let (c_out, wc_in, kh, kw) = weight.dims4()?;
    if wc_in != c_in {
        return Err(CoreError::Shape(format!(
            "input has {c_in} channels but weight expects {wc_in}"
        )));
    }
    let (h_out, w_out) = conv2d_output_hw((h, w), (kh, kw), stride, padding)?;
    let mut out = Tensor::zeros(&[n, c_out, h_out, w_out]);
    let x = input.data();
    let th = weight.data();
    let o = out.data_mut();
    for ni in 0..n {
        for co in 0..c_out {
            let out_base = (ni * c_out + co) * h_out * w_out;
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        let x_plane = (ni * c_in + ci) * h * w;
                        let w_plane = (co * c_in + ci) * kh * kw;
                        for ki in 0..kh {
                            let ih = (oh * stride.0 + ki) as isize - padding.0 as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let x_row = x_plane + ih as usize * w;
                            let w_row = w_plane + ki * kw;
                            for kj in 0..kw {
                                let iw = (ow * stride.1 + kj) as isize - padding.1 as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += x[x_row + iw as usize] * th[w_row + kj];
                            }
                        }
                    }
                    o[out_base + oh * w_out + ow] = acc;
                }
            }
        }
    }
    Ok(out)
}
