//! Forward evaluation of a network graph in train and eval modes, plus the
//! pure (state-frozen) variants used by finite-difference probes and
//! diagnostics.

use crate::error::{CoreError, CoreResult};
use crate::normalizers::{self, BoundLayerInputs, NormCache, NormalizerKind};
use crate::tensor::{conv2d_forward, Tensor};

use super::{LayerParams, LayerSpec, NetworkGraph};

/// Whether a forward pass trains (mutating normalizer state, producing a
/// trace) or evaluates (pure, running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything backward needs from one train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input tensor of each layer, `inputs[i]` feeding layer `i`.
    pub inputs: Vec<Tensor>,
    /// Per-layer normalizer caches; `None` for other layer kinds.
    pub norm_caches: Vec<Option<NormCache>>,
    /// For max-pool layers, the flat input index chosen for each output
    /// element (ties resolved to the lowest flat index).
    pub max_indices: Vec<Option<Vec<usize>>>,
    /// The network output.
    pub output: Tensor,
}

fn check_batch(graph: &NetworkGraph, batch: &Tensor) -> CoreResult<()> {
    let (n, c, h, w) = batch.dims4()?;
    if n == 0 {
        return Err(CoreError::Shape("batch has no samples".into()));
    }
    let (ec, eh, ew) = graph.input_shape;
    if (c, h, w) != (ec, eh, ew) {
        return Err(CoreError::Shape(format!(
            "batch shape {:?} does not match network input {:?}",
            batch.shape(),
            graph.input_shape
        )));
    }
    Ok(())
}

fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn fully_connected(x: &Tensor, weight: &Tensor, bias: &Tensor) -> CoreResult<Tensor> {
    let (n, d) = x.dims2()?;
    let (out, din) = weight.dims2()?;
    if din != d {
        return Err(CoreError::Shape(format!(
            "fully-connected weight expects {din} features, input has {d}"
        )));
    }
    if bias.shape() != [out] {
        return Err(CoreError::Shape(format!(
            "bias shape {:?} does not match {out} output features",
            bias.shape()
        )));
    }
    let mut y = Tensor::zeros(&[n, out]);
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let yd = y.data_mut();
    for ni in 0..n {
        let xrow = &xd[ni * d..(ni + 1) * d];
        let yrow = &mut yd[ni * out..(ni + 1) * out];
        for o in 0..out {
            let wrow = &wd[o * d..(o + 1) * d];
            let mut acc = bd[o];
            for i in 0..d {
                acc += wrow[i] * xrow[i];
            }
            yrow[o] = acc;
        }
    }
    Ok(y)
}

fn avg_pool(x: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> CoreResult<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = crate::tensor::conv2d_output_hw((h, w), kernel, stride, (0, 0))?;
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    let count = (kernel.0 * kernel.1) as f64;
    for ni in 0..n {
        for ci in 0..c {
            let in_base = (ni * c + ci) * h * w;
            let out_base = (ni * c + ci) * oh * ow;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = 0.0;
                    for kh in 0..kernel.0 {
                        let ih = ohi * stride.0 + kh;
                        for kw in 0..kernel.1 {
                            let iw = owi * stride.1 + kw;
                            acc += xd[in_base + ih * w + iw];
                        }
                    }
                    yd[out_base + ohi * ow + owi] = acc / count;
                }
            }
        }
    }
    Ok(y)
}

fn max_pool(
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> CoreResult<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = crate::tensor::conv2d_output_hw((h, w), kernel, stride, (0, 0))?;
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut chosen = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    let yd = y.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let in_base = (ni * c + ci) * h * w;
            let out_base = (ni * c + ci) * oh * ow;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    // Scan order visits flat indices in increasing order, and
                    // only a strictly greater value replaces the champion, so
                    // ties keep the lowest flat index.
                    for kh in 0..kernel.0 {
                        let ih = ohi * stride.0 + kh;
                        for kw in 0..kernel.1 {
                            let iw = owi * stride.1 + kw;
                            let idx = in_base + ih * w + iw;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    yd[out_base + ohi * ow + owi] = best;
                    chosen[out_base + ohi * ow + owi] = best_idx;
                }
            }
        }
    }
    Ok((y, chosen))
}

fn flatten(x: &Tensor) -> CoreResult<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    x.reshape(&[n, c * h * w])
}

/// Train-mode forward pass. Normalizer layers consume and update their state
/// (window records, running statistics, iteration counter), so one call is
/// one training iteration from the normalizers' point of view.
pub fn forward_train(graph: &mut NetworkGraph, batch: &Tensor) -> CoreResult<(Tensor, ForwardTrace)> {
    check_batch(graph, batch)?;
    let n_layers = graph.layers.len();
    let mut inputs: Vec<Tensor> = Vec::with_capacity(n_layers);
    let mut norm_caches: Vec<Option<NormCache>> = Vec::with_capacity(n_layers);
    let mut max_indices: Vec<Option<Vec<usize>>> = Vec::with_capacity(n_layers);
    let mut cur = batch.clone();
    for idx in 0..n_layers {
        inputs.push(cur);
        let x = &inputs[idx];
        let mut cache = None;
        let mut midx = None;
        cur = match graph.layers[idx] {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let LayerParams::Conv { weight } = &graph.params[idx] else {
                    return Err(CoreError::State(format!("layer {idx} lost its weights")));
                };
                conv2d_forward(x, weight, stride, padding)?
            }
            LayerSpec::FullyConnected { .. } => {
                let LayerParams::Fc { weight, bias } = &graph.params[idx] else {
                    return Err(CoreError::State(format!("layer {idx} lost its weights")));
                };
                fully_connected(x, weight, bias)?
            }
            LayerSpec::Relu => relu(x),
            LayerSpec::AvgPool { kernel, stride } => avg_pool(x, kernel, stride)?,
            LayerSpec::MaxPool { kernel, stride } => {
                let (y, chosen) = max_pool(x, kernel, stride)?;
                midx = Some(chosen);
                y
            }
            LayerSpec::Flatten => flatten(x)?,
            LayerSpec::Normalizer { kind, .. } => {
                let (y, c) = normalizer_train_step(graph, idx, kind, &inputs)?;
                cache = Some(c);
                y
            }
        };
        norm_caches.push(cache);
        max_indices.push(midx);
    }
    let trace = ForwardTrace {
        inputs,
        norm_caches,
        max_indices,
        output: cur.clone(),
    };
    Ok((cur, trace))
}

/// Runs one normalizer layer in train mode, routing the bound layer's weights
/// and input batch into the compensated variant.
fn normalizer_train_step(
    graph: &mut NetworkGraph,
    idx: usize,
    kind: NormalizerKind,
    inputs: &[Tensor],
) -> CoreResult<(Tensor, NormCache)> {
    let x = &inputs[idx];
    match kind {
        NormalizerKind::BatchNorm => {
            let LayerParams::Norm { state } = &mut graph.params[idx] else {
                return Err(CoreError::State(format!("layer {idx} lost its state")));
            };
            normalizers::bn_train_forward(x, state)
        }
        NormalizerKind::NaiveCbn => {
            let LayerParams::Norm { state } = &mut graph.params[idx] else {
                return Err(CoreError::State(format!("layer {idx} lost its state")));
            };
            normalizers::naive_cbn_train_forward(x, state)
        }
        NormalizerKind::Cbn => {
            let bound = graph.bindings[idx]
                .ok_or_else(|| CoreError::State(format!("layer {idx} has no binding")))?;
            let geom = graph.bound_geometry(idx)?;
            let y_prev = &inputs[bound];
            let (head, tail) = graph.params.split_at_mut(idx);
            let LayerParams::Norm { state } = &mut tail[0] else {
                return Err(CoreError::State(format!("layer {idx} lost its state")));
            };
            match &head[bound] {
                LayerParams::Conv { weight } => {
                    normalizers::cbn_train_forward(x, weight, y_prev, &geom, state)
                }
                LayerParams::Fc { weight, .. } => {
                    // The 1x1-kernel view of a fully-connected layer.
                    let (nb, d) = y_prev.dims2()?;
                    let theta4 =
                        weight.reshape(&[geom.out_channels, geom.in_channels, 1, 1])?;
                    let y_prev4 = y_prev.reshape(&[nb, d, 1, 1])?;
                    normalizers::cbn_train_forward(x, &theta4, &y_prev4, &geom, state)
                }
                _ => Err(CoreError::State(format!(
                    "layer {bound} bound to normalizer {idx} is not parameterized"
                ))),
            }
        }
    }
}

/// Eval-mode forward pass: normalizers use running statistics, nothing is
/// mutated, no trace is produced.
pub fn forward_eval(graph: &NetworkGraph, batch: &Tensor) -> CoreResult<Tensor> {
    check_batch(graph, batch)?;
    let mut cur = batch.clone();
    for idx in 0..graph.layers.len() {
        cur = eval_layer(graph, idx, &cur)?;
    }
    Ok(cur)
}

/// Mode-dispatching forward pass.
pub fn forward(
    graph: &mut NetworkGraph,
    batch: &Tensor,
    mode: Mode,
) -> CoreResult<(Tensor, Option<ForwardTrace>)> {
    match mode {
        Mode::Train => {
            let (y, trace) = forward_train(graph, batch)?;
            Ok((y, Some(trace)))
        }
        Mode::Eval => Ok((forward_eval(graph, batch)?, None)),
    }
}

/// Train-mode semantics without any state mutation: normalizers see the frozen
/// ring buffer and running statistics stay untouched. This is the map that
/// finite-difference probes differentiate.
pub fn forward_train_pure(graph: &NetworkGraph, batch: &Tensor) -> CoreResult<Tensor> {
    layer_output_pure(graph, batch, graph.layers.len() - 1, None)
}

/// Pure train-mode forward up to and including `upto`, optionally substituting
/// the weight tensor of one parameterized layer. Used by diagnostics that
/// probe how a layer's statistics respond to weights earlier in the network.
pub fn layer_output_pure(
    graph: &NetworkGraph,
    batch: &Tensor,
    upto: usize,
    override_weight: Option<(usize, &Tensor)>,
) -> CoreResult<Tensor> {
    check_batch(graph, batch)?;
    if upto >= graph.layers.len() {
        return Err(CoreError::Argument(format!(
            "layer {upto} out of range for a {}-layer network",
            graph.layers.len()
        )));
    }
    if let Some((oi, w)) = override_weight {
        let stored = match graph.params.get(oi) {
            Some(LayerParams::Conv { weight }) | Some(LayerParams::Fc { weight, .. }) => weight,
            _ => {
                return Err(CoreError::Argument(format!(
                    "layer {oi} has no weight tensor to override"
                )))
            }
        };
        if stored.shape() != w.shape() {
            return Err(CoreError::Shape(format!(
                "override weight shape {:?} does not match layer {oi} weight {:?}",
                w.shape(),
                stored.shape()
            )));
        }
    }
    let mut inputs: Vec<Tensor> = Vec::with_capacity(upto + 1);
    let mut cur = batch.clone();
    for idx in 0..=upto {
        inputs.push(cur);
        cur = pure_layer(graph, idx, &inputs, override_weight)?;
    }
    Ok(cur)
}

fn weight_of<'a>(
    graph: &'a NetworkGraph,
    idx: usize,
    override_weight: Option<(usize, &'a Tensor)>,
) -> CoreResult<&'a Tensor> {
    if let Some((oi, w)) = override_weight {
        if oi == idx {
            return Ok(w);
        }
    }
    match &graph.params[idx] {
        LayerParams::Conv { weight } | LayerParams::Fc { weight, .. } => Ok(weight),
        _ => Err(CoreError::State(format!("layer {idx} has no weights"))),
    }
}

/// One layer in pure train-mode semantics (normalizer state frozen).
fn pure_layer(
    graph: &NetworkGraph,
    idx: usize,
    inputs: &[Tensor],
    override_weight: Option<(usize, &Tensor)>,
) -> CoreResult<Tensor> {
    let x = &inputs[idx];
    match graph.layers[idx] {
        LayerSpec::Conv2d {
            stride, padding, ..
        } => conv2d_forward(x, weight_of(graph, idx, override_weight)?, stride, padding),
        LayerSpec::FullyConnected { .. } => {
            let LayerParams::Fc { bias, .. } = &graph.params[idx] else {
                return Err(CoreError::State(format!("layer {idx} lost its weights")));
            };
            fully_connected(x, weight_of(graph, idx, override_weight)?, bias)
        }
        LayerSpec::Relu => Ok(relu(x)),
        LayerSpec::AvgPool { kernel, stride } => avg_pool(x, kernel, stride),
        LayerSpec::MaxPool { kernel, stride } => Ok(max_pool(x, kernel, stride)?.0),
        LayerSpec::Flatten => flatten(x),
        LayerSpec::Normalizer { kind, .. } => {
            let LayerParams::Norm { state } = &graph.params[idx] else {
                return Err(CoreError::State(format!("layer {idx} lost its state")));
            };
            match kind {
                NormalizerKind::BatchNorm | NormalizerKind::NaiveCbn => {
                    normalizers::train_forward_pure(kind, x, None, state)
                }
                NormalizerKind::Cbn => {
                    let bound = graph.bindings[idx]
                        .ok_or_else(|| CoreError::State(format!("layer {idx} has no binding")))?;
                    let geom = graph.bound_geometry(idx)?;
                    let theta = weight_of(graph, bound, override_weight)?;
                    let y_prev = &inputs[bound];
                    if theta.rank() == 2 {
                        let (nb, d) = y_prev.dims2()?;
                        let theta4 =
                            theta.reshape(&[geom.out_channels, geom.in_channels, 1, 1])?;
                        let y_prev4 = y_prev.reshape(&[nb, d, 1, 1])?;
                        let bound_in = BoundLayerInputs {
                            theta_t: &theta4,
                            y_prev: &y_prev4,
                            geom: &geom,
                        };
                        normalizers::train_forward_pure(kind, x, Some(bound_in), state)
                    } else {
                        let bound_in = BoundLayerInputs {
                            theta_t: theta,
                            y_prev,
                            geom: &geom,
                        };
                        normalizers::train_forward_pure(kind, x, Some(bound_in), state)
                    }
                }
            }
        }
    }
}

/// One layer in eval-mode semantics.
fn eval_layer(graph: &NetworkGraph, idx: usize, x: &Tensor) -> CoreResult<Tensor> {
    match graph.layers[idx] {
        LayerSpec::Conv2d {
            stride, padding, ..
        } => {
            let LayerParams::Conv { weight } = &graph.params[idx] else {
                return Err(CoreError::State(format!("layer {idx} lost its weights")));
            };
            conv2d_forward(x, weight, stride, padding)
        }
        LayerSpec::FullyConnected { .. } => {
            let LayerParams::Fc { weight, bias } = &graph.params[idx] else {
                return Err(CoreError::State(format!("layer {idx} lost its weights")));
            };
            fully_connected(x, weight, bias)
        }
        LayerSpec::Relu => Ok(relu(x)),
        LayerSpec::AvgPool { kernel, stride } => avg_pool(x, kernel, stride),
        LayerSpec::MaxPool { kernel, stride } => Ok(max_pool(x, kernel, stride)?.0),
        LayerSpec::Flatten => flatten(x),
        LayerSpec::Normalizer { .. } => {
            let LayerParams::Norm { state } = &graph.params[idx] else {
                return Err(CoreError::State(format!("layer {idx} lost its state")));
            };
            normalizers::eval_forward(x, state)
        }
    }
}
