//! Reverse-mode gradients for a traced train-mode forward pass.

use crate::error::{CoreError, CoreResult};
use crate::normalizers::{self, NormalizerKind};
use crate::tensor::Tensor;

use super::{ForwardTrace, LayerParams, LayerSpec, NetworkGraph};

/// Gradient of the loss with respect to one layer's parameters.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    None,
    Conv { weight: Tensor },
    Fc { weight: Tensor, bias: Tensor },
    Norm { gamma: Tensor, beta: Tensor },
}

/// Gradients for every layer plus the network input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub input: Tensor,
}

/// Propagates `grad_output` back through the traced forward pass. Normalizer
/// layers contribute their compensation-term gradient to the bound layer's
/// weight gradient; the bound layer sits earlier in the network, so the
/// contribution is pending by the time the walk reaches it.
pub fn backward(
    graph: &NetworkGraph,
    trace: &ForwardTrace,
    grad_output: &Tensor,
) -> CoreResult<Gradients> {
    let n_layers = graph.layers.len();
    if trace.inputs.len() != n_layers || trace.norm_caches.len() != n_layers {
        return Err(CoreError::State(
            "forward trace does not match the network".into(),
        ));
    }
    if grad_output.shape() != trace.output.shape() {
        return Err(CoreError::Shape(format!(
            "output gradient shape {:?} does not match network output {:?}",
            grad_output.shape(),
            trace.output.shape()
        )));
    }
    let mut layer_grads: Vec<LayerGrads> = (0..n_layers).map(|_| LayerGrads::None).collect();
    let mut pending_extra: Vec<Option<Tensor>> = vec![None; n_layers];
    let mut g = grad_output.clone();
    for idx in (0..n_layers).rev() {
        let x = &trace.inputs[idx];
        g = match &graph.layers[idx] {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let LayerParams::Conv { weight } = &graph.params[idx] else {
                    return Err(CoreError::State(format!("layer {idx} lost its weights")));
                };
                let (gx, mut gw) = conv_backward(x, weight, &g, *stride, *padding)?;
                if let Some(extra) = pending_extra[idx].take() {
                    gw.axpy(1.0, &extra)?;
                }
                layer_grads[idx] = LayerGrads::Conv { weight: gw };
                gx
            }
            LayerSpec::FullyConnected { .. } => {
                let LayerParams::Fc { weight, .. } = &graph.params[idx] else {
                    return Err(CoreError::State(format!("layer {idx} lost its weights")));
                };
                let (gx, mut gw, gb) = fc_backward(x, weight, &g)?;
                if let Some(extra) = pending_extra[idx].take() {
                    // Compensation gradients arrive in the 1x1-kernel view.
                    let (out, din) = weight.dims2()?;
                    gw.axpy(1.0, &extra.reshape(&[out, din])?)?;
                }
                layer_grads[idx] = LayerGrads::Fc {
                    weight: gw,
                    bias: gb,
                };
                gx
            }
            LayerSpec::Relu => {
                let mut gx = g.clone();
                let xd = x.data();
                for (gv, xv) in gx.data_mut().iter_mut().zip(xd) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                gx
            }
            LayerSpec::AvgPool { kernel, stride } => avg_pool_backward(x, &g, *kernel, *stride)?,
            LayerSpec::MaxPool { .. } => {
                let chosen = trace.max_indices[idx].as_ref().ok_or_else(|| {
                    CoreError::State(format!("trace lacks max-pool choices for layer {idx}"))
                })?;
                if chosen.len() != g.numel() {
                    return Err(CoreError::State(format!(
                        "max-pool choices for layer {idx} do not match the gradient"
                    )));
                }
                let mut gx = Tensor::zeros(x.shape());
                let gxd = gx.data_mut();
                for (out_idx, &src) in chosen.iter().enumerate() {
                    gxd[src] += g.data()[out_idx];
                }
                gx
            }
            LayerSpec::Flatten => g.reshape(x.shape())?,
            LayerSpec::Normalizer { kind, .. } => {
                let cache = trace.norm_caches[idx].as_ref().ok_or_else(|| {
                    CoreError::State(format!("trace lacks a normalizer cache for layer {idx}"))
                })?;
                let LayerParams::Norm { state } = &graph.params[idx] else {
                    return Err(CoreError::State(format!("layer {idx} lost its state")));
                };
                let back = match kind {
                    NormalizerKind::BatchNorm => normalizers::bn_backward(&g, cache, state)?,
                    NormalizerKind::NaiveCbn | NormalizerKind::Cbn => {
                        normalizers::cbn_backward(&g, cache, state)?
                    }
                };
                layer_grads[idx] = LayerGrads::Norm {
                    gamma: back.grad_gamma,
                    beta: back.grad_beta,
                };
                if let Some(extra) = back.grad_theta_extra {
                    let bound = graph.bindings[idx].ok_or_else(|| {
                        CoreError::State(format!("layer {idx} has no binding"))
                    })?;
                    pending_extra[bound] = Some(match pending_extra[bound].take() {
                        Some(mut acc) => {
                            acc.axpy(1.0, &extra)?;
                            acc
                        }
                        None => extra,
                    });
                }
                back.grad_x
            }
        };
    }
    Ok(Gradients {
        layers: layer_grads,
        input: g,
    })
}

/// Gradients of a convolution with respect to its input and weights.
fn conv_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_y: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> CoreResult<(Tensor, Tensor)> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(CoreError::Shape(format!(
            "weight expects {wcin} input channels, input has {cin}"
        )));
    }
    let (gn, gcout, oh, ow) = grad_y.dims4()?;
    if gn != n || gcout != cout {
        return Err(CoreError::Shape(format!(
            "output gradient shape {:?} does not match convolution output",
            grad_y.shape()
        )));
    }
    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_y.data();
    let gxd = grad_x.data_mut();
    let gwd = grad_w.data_mut();
    for ni in 0..n {
        for co in 0..cout {
            let g_base = (ni * cout + co) * oh * ow;
            let w_base = co * cin * kh * kw;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let gval = gd[g_base + ohi * ow + owi];
                    if gval == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        let x_base = (ni * cin + ci) * h * w;
                        let wc_base = w_base + ci * kh * kw;
                        for ki in 0..kh {
                            let ih = ohi * stride.0 + ki;
                            if ih < padding.0 || ih - padding.0 >= h {
                                continue;
                            }
                            let ih = ih - padding.0;
                            for kj in 0..kw {
                                let iw = owi * stride.1 + kj;
                                if iw < padding.1 || iw - padding.1 >= w {
                                    continue;
                                }
                                let iw = iw - padding.1;
                                let xoff = x_base + ih * w + iw;
                                let woff = wc_base + ki * kw + kj;
                                gwd[woff] += gval * xd[xoff];
                                gxd[xoff] += gval * wd[woff];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((grad_x, grad_w))
}

/// Gradients of a fully-connected layer with respect to input, weight, bias.
fn fc_backward(x: &Tensor, weight: &Tensor, grad_y: &Tensor) -> CoreResult<(Tensor, Tensor, Tensor)> {
    let (n, d) = x.dims2()?;
    let (out, din) = weight.dims2()?;
    if din != d {
        return Err(CoreError::Shape(format!(
            "weight expects {din} features, input has {d}"
        )));
    }
    let (gn, gout) = grad_y.dims2()?;
    if gn != n || gout != out {
        return Err(CoreError::Shape(format!(
            "output gradient shape {:?} does not match layer output",
            grad_y.shape()
        )));
    }
    let mut grad_x = Tensor::zeros(&[n, d]);
    let mut grad_w = Tensor::zeros(&[out, d]);
    let mut grad_b = Tensor::zeros(&[out]);
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_y.data();
    let gxd = grad_x.data_mut();
    let gwd = grad_w.data_mut();
    let gbd = grad_b.data_mut();
    for ni in 0..n {
        for o in 0..out {
            let gval = gd[ni * out + o];
            gbd[o] += gval;
            if gval == 0.0 {
                continue;
            }
            for i in 0..d {
                gwd[o * d + i] += gval * xd[ni * d + i];
                gxd[ni * d + i] += gval * wd[o * d + i];
            }
        }
    }
    Ok((grad_x, grad_w, grad_b))
}

/// Distributes pooled gradients uniformly over each pooling window.
fn avg_pool_backward(
    x: &Tensor,
    grad_y: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> CoreResult<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (gn, gc, oh, ow) = grad_y.dims4()?;
    if gn != n || gc != c {
        return Err(CoreError::Shape(format!(
            "output gradient shape {:?} does not match pooled input",
            grad_y.shape()
        )));
    }
    let mut grad_x = Tensor::zeros(x.shape());
    let gxd = grad_x.data_mut();
    let gd = grad_y.data();
    let count = (kernel.0 * kernel.1) as f64;
    for ni in 0..n {
        for ci in 0..c {
            let in_base = (ni * c + ci) * h * w;
            let out_base = (ni * c + ci) * oh * ow;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let share = gd[out_base + ohi * ow + owi] / count;
                    for kh in 0..kernel.0 {
                        let ih = ohi * stride.0 + kh;
                        for kw in 0..kernel.1 {
                            let iw = owi * stride.1 + kw;
                            gxd[in_base + ih * w + iw] += share;
                        }
                    }
                }
            }
        }
    }
    Ok(grad_x)
}
