//! Small feed-forward network zoo: convolution, fully-connected, relu,
//! pooling, flatten, and normalizer layers, with hand-written backward passes
//! and SGD with momentum.
//!
//! Normalizer layers bind to the immediately preceding parameterized layer:
//! that layer's current weights and input batch feed the compensated
//! normalizer variant, and its weight gradient receives the compensation
//! term's contribution during backward.

mod backward;
mod forward;
mod sgd;


pub use backward::{backward, Gradients, LayerGrads};
pub use forward::{
    forward, forward_eval, forward_train, forward_train_pure, layer_output_pure, ForwardTrace,
    Mode,
};
pub use sgd::{sgd_step, LayerVelocity, OptState};

use crate::compensation::ConvGeometry;
use crate::error::{CoreError, CoreResult};
use crate::normalizers::{BnConfig, CbnState, NormalizerKind};
use crate::tensor::{conv2d_output_hw, Rng, Tensor};

/// One layer of the network.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    AvgPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Flatten,
    Normalizer {
        kind: NormalizerKind,
        cfg: BnConfig,
    },
}

/// Parameters owned by one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    /// Convolution weight, `C_out x C_in x K_h x K_w`. Convolutions preceding
    /// a normalizer carry no bias; for uniformity no convolution does.
    Conv { weight: Tensor },
    /// Fully-connected weight (`out x in`) and bias (`out`).
    Fc { weight: Tensor, bias: Tensor },
    /// Normalizer state, including its learned scale and shift.
    Norm { state: CbnState },
}

/// Shape of the data flowing between layers, excluding the batch axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataShape {
    Spatial { channels: usize, h: usize, w: usize },
    Flat { features: usize },
}

/// A validated network: layer specs, their parameters, inferred output shapes,
/// and normalizer-to-layer bindings.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub params: Vec<LayerParams>,
    /// Output shape of each layer.
    pub shapes: Vec<DataShape>,
    /// For each normalizer layer, the index of its bound parameterized layer.
    pub bindings: Vec<Option<usize>>,
}

impl NetworkGraph {
    /// Validates the layer stack against the input shape and initializes
    /// parameters from `rng` (He-style normal weights, identity affine).
    pub fn build(
        input_shape: (usize, usize, usize),
        layers: Vec<LayerSpec>,
        rng: &mut Rng,
    ) -> CoreResult<NetworkGraph> {
        if layers.is_empty() {
            return Err(CoreError::Graph("network has no layers".into()));
        }
        let (c0, h0, w0) = input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(CoreError::Graph(format!(
                "input shape {input_shape:?} has a zero extent"
            )));
        }
        let mut cur = DataShape::Spatial {
            channels: c0,
            h: h0,
            w: w0,
        };
        let mut params = Vec::with_capacity(layers.len());
        let mut shapes = Vec::with_capacity(layers.len());
        let mut bindings = Vec::with_capacity(layers.len());
        for (idx, layer) in layers.iter().enumerate() {
            let mut binding = None;
            cur = match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let DataShape::Spatial { channels, h, w } = cur else {
                        return Err(CoreError::Graph(format!(
                            "layer {idx}: convolution needs spatial input, got {cur:?}"
                        )));
                    };
                    if channels != in_channels {
                        return Err(CoreError::Graph(format!(
                            "layer {idx}: convolution expects {in_channels} channels, gets {channels}"
                        )));
                    }
                    if out_channels == 0 {
                        return Err(CoreError::Graph(format!(
                            "layer {idx}: convolution needs at least one output channel"
                        )));
                    }
                    let (oh, ow) = conv2d_output_hw((h, w), kernel, stride, padding)
                        .map_err(|e| CoreError::Graph(format!("layer {idx}: {e}")))?;
                    let fan_in = (in_channels * kernel.0 * kernel.1) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let weight = rng.normal_tensor(
                        &[out_channels, in_channels, kernel.0, kernel.1],
                        0.0,
                        std,
                    );
                    params.push(LayerParams::Conv { weight });
                    DataShape::Spatial {
                        channels: out_channels,
                        h: oh,
                        w: ow,
                    }
                }
                LayerSpec::FullyConnected {
                    in_features,
                    out_features,
                } => {
                    let DataShape::Flat { features } = cur else {
                        return Err(CoreError::Graph(format!(
                            "layer {idx}: fully-connected needs flattened input, got {cur:?}"
                        )));
                    };
                    if features != in_features {
                        return Err(CoreError::Graph(format!(
                            "layer {idx}: fully-connected expects {in_features} features, gets {features}"
                        )));
                    }
                    if out_features == 0 {
                        return Err(CoreError::Graph(format!(
                            "layer {idx}: fully-connected needs at least one output feature"
                        )));
                    }
                    let std = (2.0 / in_features as f64).sqrt();
                    let weight = rng.normal_tensor(&[out_features, in_features], 0.0, std);
                    params.push(LayerParams::Fc {
                        weight,
                        bias: Tensor::zeros(&[out_features]),
                    });
                    DataShape::Flat {
                        features: out_features,
                    }
                }
                LayerSpec::Relu => {
                    params.push(LayerParams::None);
                    cur
                }
                LayerSpec::AvgPool { kernel, stride } | LayerSpec::MaxPool { kernel, stride } => {
                    let DataShape::Spatial { channels, h, w } = cur else {
                        return Err(CoreError::Graph(format!(
                            "layer {idx}: pooling needs spatial input, got {cur:?}"
                        )));
                    };
                    let (oh, ow) = conv2d_output_hw((h, w), kernel, stride, (0, 0))
                        .map_err(|e| CoreError::Graph(format!("layer {idx}: {e}")))?;
                    params.push(LayerParams::None);
                    DataShape::Spatial {
                        channels,
                        h: oh,
                        w: ow,
                    }
                }
                LayerSpec::Flatten => {
                    let DataShape::Spatial { channels, h, w } = cur else {
                        return Err(CoreError::Graph(format!(
                            "layer {idx}: flatten needs spatial input, got {cur:?}"
                        )));
                    };
                    params.push(LayerParams::None);
                    DataShape::Flat {
                        features: channels * h * w,
                    }
                }
                LayerSpec::Normalizer { ref cfg, .. } => {
                    let channels = match cur {
                        DataShape::Spatial { channels, .. } => channels,
                        DataShape::Flat { features } => features,
                    };
                    let bound = idx.checked_sub(1).and_then(|prev| {
                        matches!(
                            layers[prev],
                            LayerSpec::Conv2d { .. } | LayerSpec::FullyConnected { .. }
                        )
                        .then_some(prev)
                    });
                    let Some(bound) = bound else {
                        return Err(CoreError::Graph(format!(
                            "layer {idx}: normalizer must directly follow a convolution or fully-connected layer"
                        )));
                    };
                    binding = Some(bound);
                    let state = CbnState::new(channels, cfg.clone())
                        .map_err(|e| CoreError::Graph(format!("layer {idx}: {e}")))?;
                    params.push(LayerParams::Norm { state });
                    cur
                }
            };
            shapes.push(cur);
            bindings.push(binding);
        }
        Ok(NetworkGraph {
            input_shape,
            layers,
            params,
            shapes,
            bindings,
        })
    }

    /// Convolution geometry a normalizer at `layer` is bound to. For a
    /// fully-connected bound layer this is the 1x1-kernel interpretation.
    pub fn bound_geometry(&self, layer: usize) -> CoreResult<ConvGeometry> {
        let bound = self.bindings[layer].ok_or_else(|| {
            CoreError::State(format!("layer {layer} is not a bound normalizer"))
        })?;
        match self.layers[bound] {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Ok(ConvGeometry {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            }),
            LayerSpec::FullyConnected {
                in_features,
                out_features,
            } => Ok(ConvGeometry {
                in_channels: in_features,
                out_channels: out_features,
                kernel: (1, 1),
                stride: (1, 1),
                padding: (0, 0),
            }),
            _ => Err(CoreError::State(format!(
                "layer {bound} is not parameterized"
            ))),
        }
    }

    /// Indices of layers that own trainable weights (convolution and
    /// fully-connected layers), in forward order.
    pub fn parameterized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| {
                matches!(
                    l,
                    LayerSpec::Conv2d { .. } | LayerSpec::FullyConnected { .. }
                )
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of normalizer layers, in forward order.
    pub fn normalizer_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Normalizer { .. }))
            .map(|(i, _)| i)
            .collect()
    }
}
