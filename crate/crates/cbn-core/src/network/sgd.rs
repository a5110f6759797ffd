//! Stochastic gradient descent with classical momentum and coupled weight
//! decay: `v <- momentum * v + g + weight_decay * theta`, then
//! `theta <- theta - lr * v`. Weight decay applies to every trainable
//! parameter, the normalizer scale and shift included.

use crate::error::{CoreError, CoreResult};
use crate::tensor::Tensor;

use super::{Gradients, LayerGrads, LayerParams, NetworkGraph};

/// Momentum buffers, parallel to the network's parameter structure.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocities: Vec<LayerVelocity>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerVelocity {
    None,
    Conv { weight: Tensor },
    Fc { weight: Tensor, bias: Tensor },
    Norm { gamma: Tensor, beta: Tensor },
}

impl OptState {
    /// Zero-initialized buffers matching `graph`'s parameters.
    pub fn new(graph: &NetworkGraph) -> OptState {
        let velocities = graph
            .params
            .iter()
            .map(|p| match p {
                LayerParams::None => LayerVelocity::None,
                LayerParams::Conv { weight } => LayerVelocity::Conv {
                    weight: Tensor::zeros(weight.shape()),
                },
                LayerParams::Fc { weight, bias } => LayerVelocity::Fc {
                    weight: Tensor::zeros(weight.shape()),
                    bias: Tensor::zeros(bias.shape()),
                },
                LayerParams::Norm { state } => LayerVelocity::Norm {
                    gamma: Tensor::zeros(state.affine.gamma.shape()),
                    beta: Tensor::zeros(state.affine.beta.shape()),
                },
            })
            .collect();
        OptState { velocities }
    }
}

fn update(
    theta: &mut Tensor,
    vel: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> CoreResult<()> {
    if theta.shape() != grad.shape() || theta.shape() != vel.shape() {
        return Err(CoreError::Shape(format!(
            "parameter {:?}, gradient {:?}, and velocity {:?} shapes disagree",
            theta.shape(),
            grad.shape(),
            vel.shape()
        )));
    }
    let td = theta.data_mut();
    let vd = vel.data_mut();
    let gd = grad.data();
    for i in 0..td.len() {
        vd[i] = momentum * vd[i] + gd[i] + weight_decay * td[i];
        td[i] -= lr * vd[i];
    }
    Ok(())
}

/// Applies one optimizer step to every trainable parameter.
pub fn sgd_step(
    graph: &mut NetworkGraph,
    grads: &Gradients,
    opt: &mut OptState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> CoreResult<()> {
    if grads.layers.len() != graph.params.len() || opt.velocities.len() != graph.params.len() {
        return Err(CoreError::State(
            "gradients or optimizer state do not match the network".into(),
        ));
    }
    for idx in 0..graph.params.len() {
        match (&mut graph.params[idx], &grads.layers[idx], &mut opt.velocities[idx]) {
            (LayerParams::None, LayerGrads::None, LayerVelocity::None) => {}
            (
                LayerParams::Conv { weight },
                LayerGrads::Conv { weight: gw },
                LayerVelocity::Conv { weight: vw },
            ) => update(weight, vw, gw, lr, momentum, weight_decay)?,
            (
                LayerParams::Fc { weight, bias },
                LayerGrads::Fc {
                    weight: gw,
                    bias: gb,
                },
                LayerVelocity::Fc {
                    weight: vw,
                    bias: vb,
                },
            ) => {
                update(weight, vw, gw, lr, momentum, weight_decay)?;
                update(bias, vb, gb, lr, momentum, weight_decay)?;
            }
            (
                LayerParams::Norm { state },
                LayerGrads::Norm {
                    gamma: gg,
                    beta: gb,
                },
                LayerVelocity::Norm {
                    gamma: vg,
                    beta: vb,
                },
            ) => {
                update(&mut state.affine.gamma, vg, gg, lr, momentum, weight_decay)?;
                update(&mut state.affine.beta, vb, gb, lr, momentum, weight_decay)?;
            }
            _ => {
                return Err(CoreError::State(format!(
                    "layer {idx}: parameter, gradient, and velocity kinds disagree"
                )))
            }
        }
    }
    Ok(())
}
