//! Batch normalization and its cross-iteration variants.
//!
//! Three train-time normalizers share one state type and one eval path:
//!
//! * plain batch normalization: current mini-batch statistics only
//! * naive cross-iteration: aggregates stored statistics from recent
//!   iterations as-is, ignoring that the weights have moved since
//! * compensated cross-iteration: aggregates stored statistics after
//!   first-order compensation to the current weights of the bound layer
//!
//! All statistics are per channel over the batch and spatial axes. Backward
//! treats stored records as constants; gradients flow through the current
//! batch's contribution and, optionally, through the compensation terms into
//! the bound layer's weights.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::compensation::{
    aggregate, compensate, effective_window, stat_grad_mu, stat_grad_nu, ConvGeometry,
    IterationRecord, TaylorGrads,
};
use crate::error::{CoreError, CoreResult};
use crate::tensor::Tensor;

/// Which normalizer variant a layer runs in train mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizerKind {
    BatchNorm,
    NaiveCbn,
    Cbn,
}

/// Normalizer configuration shared by all variants.
#[derive(Debug, Clone, PartialEq)]
pub struct BnConfig {
    /// Variance floor added before the square root.
    pub epsilon: f64,
    /// Decay of the running-statistics exponential moving average.
    pub running_decay: f64,
    /// Window size: how many iterations contribute statistics (>= 1).
    pub window: usize,
    /// Iterations during which the window is forced to 1.
    pub burn_in_iters: u64,
    /// Whether backward sends gradients through the compensation terms into
    /// the bound layer's weights.
    pub taylor_backprop: bool,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            epsilon: 1e-5,
            running_decay: 0.9,
            window: 1,
            burn_in_iters: 0,
            taylor_backprop: true,
        }
    }
}

impl BnConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if !(self.epsilon > 0.0) {
            return Err(CoreError::Argument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.running_decay > 0.0 && self.running_decay < 1.0) {
            return Err(CoreError::Argument(format!(
                "running decay must lie strictly between 0 and 1, got {}",
                self.running_decay
            )));
        }
        if self.window < 1 {
            return Err(CoreError::Argument("window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learned per-channel scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Full mutable state of one normalizer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CbnState {
    pub cfg: BnConfig,
    pub affine: AffineParams,
    /// Running mean, updated from the statistics actually used to normalize.
    pub running_mean: Tensor,
    /// Running variance, same source.
    pub running_var: Tensor,
    /// Iteration counter; advances once per train-mode forward.
    pub t: u64,
    /// Past-iteration records, most recent first. Never longer than window - 1.
    pub records: VecDeque<IterationRecord>,
    pub channels: usize,
}

impl CbnState {
    pub fn new(channels: usize, cfg: BnConfig) -> CoreResult<CbnState> {
        cfg.validate()?;
        if channels == 0 {
            return Err(CoreError::Argument("channel count must be positive".into()));
        }
        Ok(CbnState {
            cfg,
            affine: AffineParams {
                gamma: Tensor::full(&[channels], 1.0),
                beta: Tensor::zeros(&[channels]),
            },
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            t: 0,
            records: VecDeque::new(),
            channels,
        })
    }

    /// Window usable right now given burn-in and stored history.
    pub fn current_effective_window(&self) -> usize {
        effective_window(
            self.t,
            self.cfg.burn_in_iters,
            self.cfg.window,
            self.records.len(),
        )
    }
}

/// Inputs the compensated variant needs from its bound layer.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayerInputs<'a> {
    /// Current weights of the bound layer.
    pub theta_t: &'a Tensor,
    /// The bound layer's input batch this iteration.
    pub y_prev: &'a Tensor,
    pub geom: &'a ConvGeometry,
}

/// Everything backward needs from one train-mode forward.
#[derive(Debug, Clone)]
pub struct NormCache {
    m: f64,
    x: Tensor,
    xhat: Tensor,
    inv_std: Tensor,
    s: Tensor,
    rank2: bool,
    path: CachePath,
}

#[derive(Debug, Clone)]
enum CachePath {
    /// Single-term window: backward is exactly plain batch normalization.
    PlainBn,
    Window(WindowCache),
}

#[derive(Debug, Clone)]
struct WindowCache {
    k_eff: usize,
    mu_bar: Tensor,
    mu_t: Tensor,
    current_clamped: Vec<bool>,
    terms: Vec<TermCache>,
    taylor_backprop: bool,
}

#[derive(Debug, Clone)]
struct TermCache {
    mu_comp: Tensor,
    clamped: Vec<bool>,
    grads: Option<Arc<TaylorGrads>>,
}

/// Gradients produced by a normalizer backward pass.
#[derive(Debug, Clone)]
pub struct NormBackward {
    pub grad_x: Tensor,
    pub grad_gamma: Tensor,
    pub grad_beta: Tensor,
    /// Gradient contribution to the bound layer's weights from the
    /// compensation terms; present only for the compensated variant with
    /// history and `taylor_backprop` enabled.
    pub grad_theta_extra: Option<Tensor>,
}

fn to_nchw(x: &Tensor) -> CoreResult<(Tensor, bool)> {
    match x.rank() {
        4 => Ok((x.clone(), false)),
        2 => {
            let (n, c) = x.dims2()?;
            Ok((x.reshape(&[n, c, 1, 1])?, true))
        }
        _ => Err(CoreError::Shape(format!(
            "normalizer input must be rank 2 or 4, got shape {:?}",
            x.shape()
        ))),
    }
}

fn check_channels(state: &CbnState, c: usize) -> CoreResult<()> {
    if c != state.channels {
        return Err(CoreError::Shape(format!(
            "input has {c} channels but normalizer was built for {}",
            state.channels
        )));
    }
    Ok(())
}

/// Per-channel mean and mean square over batch and spatial axes, one pass.
fn batch_moments(x: &Tensor) -> (Tensor, Tensor, f64) {
    let (n, c, h, w) = x.dims4().expect("moments need a rank-4 tensor");
    let m = (n * h * w) as f64;
    let mut mu = Tensor::zeros(&[c]);
    let mut nu = Tensor::zeros(&[c]);
    let plane = h * w;
    let data = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for &v in &data[base..base + plane] {
                sum += v;
                sum_sq += v * v;
            }
            mu.data_mut()[ci] += sum;
            nu.data_mut()[ci] += sum_sq;
        }
    }
    for v in mu.data_mut() {
        *v /= m;
    }
    for v in nu.data_mut() {
        *v /= m;
    }
    (mu, nu, m)
}

/// Variance as mean square minus squared mean, channelwise, unclamped.
fn variance_of(mu: &Tensor, nu: &Tensor) -> Tensor {
    let mut var = nu.clone();
    for (v, &m) in var.data_mut().iter_mut().zip(mu.data()) {
        *v -= m * m;
    }
    var
}

/// Normalizes with the given statistics and applies the affine transform.
/// Returns `(y, xhat, inv_std, s)` where `s = var + epsilon`.
fn normalize_affine(
    x: &Tensor,
    mu: &Tensor,
    var: &Tensor,
    epsilon: f64,
    affine: &AffineParams,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let (n, c, h, w) = x.dims4().expect("normalize needs a rank-4 tensor");
    let plane = h * w;
    let mut s = Tensor::zeros(&[c]);
    let mut inv_std = Tensor::zeros(&[c]);
    for ci in 0..c {
        let si = var.data()[ci] + epsilon;
        s.data_mut()[ci] = si;
        inv_std.data_mut()[ci] = 1.0 / si.sqrt();
    }
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let xh = xhat.data_mut();
    let yd = y.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mean = mu.data()[ci];
            let inv = inv_std.data()[ci];
            let gamma = affine.gamma.data()[ci];
            let beta = affine.beta.data()[ci];
            for off in base..base + plane {
                let h_val = (xd[off] - mean) * inv;
                xh[off] = h_val;
                yd[off] = gamma * h_val + beta;
            }
        }
    }
    (y, xhat, inv_std, s)
}

/// State changes a train forward wants to apply once its output is final.
struct StateDelta {
    used_mean: Tensor,
    used_var: Tensor,
    record: Option<IterationRecord>,
}

fn plan_train_forward(
    kind: NormalizerKind,
    x: &Tensor,
    bound: Option<BoundLayerInputs<'_>>,
    state: &CbnState,
    with_record: bool,
) -> CoreResult<(Tensor, NormCache, StateDelta)> {
    let (x4, rank2) = to_nchw(x)?;
    let (_, c, _, _) = x4.dims4()?;
    check_channels(state, c)?;
    if kind == NormalizerKind::Cbn {
        let bound = bound.ok_or_else(|| {
            CoreError::Argument("compensated normalizer needs its bound layer inputs".into())
        })?;
        bound.geom.check_weight(bound.theta_t)?;
        if bound.geom.out_channels != c {
            return Err(CoreError::Shape(format!(
                "bound layer produces {} channels but input has {c}",
                bound.geom.out_channels
            )));
        }
    }
    let (mu_t, nu_t, m) = batch_moments(&x4);
    let k_eff = state.current_effective_window();
    let in_burn_in = state.t < state.cfg.burn_in_iters;

    let (y, xhat, inv_std, s, path, used_mean, used_var) = if k_eff == 1
        || kind == NormalizerKind::BatchNorm
    {
        // Single-term window degenerates to plain batch normalization.
        let var = variance_of(&mu_t, &nu_t);
        let (y, xhat, inv_std, s) =
            normalize_affine(&x4, &mu_t, &var, state.cfg.epsilon, &state.affine);
        (y, xhat, inv_std, s, CachePath::PlainBn, mu_t.clone(), var)
    } else {
        let used = state.records.iter().take(k_eff - 1);
        let mut terms = Vec::with_capacity(k_eff - 1);
        let mut past = Vec::with_capacity(k_eff - 1);
        for record in used {
            let (mu_c, nu_c) = match kind {
                NormalizerKind::Cbn => {
                    let bound = bound.expect("checked above");
                    compensate(record, bound.theta_t)?
                }
                NormalizerKind::NaiveCbn => (record.mu.clone(), record.nu.clone()),
                NormalizerKind::BatchNorm => unreachable!(),
            };
            let clamped = nu_c
                .data()
                .iter()
                .zip(mu_c.data())
                .map(|(&nu, &mu)| nu < mu * mu)
                .collect();
            terms.push(TermCache {
                mu_comp: mu_c.clone(),
                clamped,
                grads: record.grads.clone(),
            });
            past.push((mu_c, nu_c));
        }
        let agg = aggregate((&mu_t, &nu_t), &past)?;
        let current_clamped = nu_t
            .data()
            .iter()
            .zip(mu_t.data())
            .map(|(&nu, &mu)| nu < mu * mu)
            .collect();
        let var = agg.variance();
        let (y, xhat, inv_std, s) =
            normalize_affine(&x4, &agg.mu_bar, &var, state.cfg.epsilon, &state.affine);
        let window = WindowCache {
            k_eff,
            mu_bar: agg.mu_bar.clone(),
            mu_t: mu_t.clone(),
            current_clamped,
            terms,
            taylor_backprop: state.cfg.taylor_backprop,
        };
        (y, xhat, inv_std, s, CachePath::Window(window), agg.mu_bar, var)
    };

    let record = if with_record
        && kind != NormalizerKind::BatchNorm
        && state.cfg.window > 1
        && !in_burn_in
    {
        let grads = match kind {
            NormalizerKind::Cbn => {
                let bound = bound.expect("checked above");
                let g_mu = stat_grad_mu(bound.y_prev, bound.geom)?;
                let g_nu = stat_grad_nu(&x4, bound.y_prev, bound.geom)?;
                Some(Arc::new(TaylorGrads {
                    g_mu,
                    g_nu,
                    theta: bound.theta_t.clone(),
                }))
            }
            _ => None,
        };
        Some(IterationRecord {
            iteration: state.t,
            mu: mu_t.clone(),
            nu: nu_t.clone(),
            grads,
        })
    } else {
        None
    };

    let y_out = if rank2 {
        let (n, ch) = (y.shape()[0], y.shape()[1]);
        y.reshape(&[n, ch])?
    } else {
        y
    };
    Ok((
        y_out,
        NormCache {
            m,
            x: x4,
            xhat,
            inv_std,
            s,
            rank2,
            path,
        },
        StateDelta {
            used_mean,
            used_var,
            record,
        },
    ))
}

fn commit(state: &mut CbnState, delta: StateDelta) {
    let rho = state.cfg.running_decay;
    for (r, &v) in state
        .running_mean
        .data_mut()
        .iter_mut()
        .zip(delta.used_mean.data())
    {
        *r = rho * *r + (1.0 - rho) * v;
    }
    for (r, &v) in state
        .running_var
        .data_mut()
        .iter_mut()
        .zip(delta.used_var.data())
    {
        *r = rho * *r + (1.0 - rho) * v;
    }
    if let Some(record) = delta.record {
        state.records.push_front(record);
        state.records.truncate(state.cfg.window.saturating_sub(1));
    }
    state.t += 1;
}

/// Train-mode forward with current-batch statistics only.
pub fn bn_train_forward(x: &Tensor, state: &mut CbnState) -> CoreResult<(Tensor, NormCache)> {
    let (y, cache, delta) = plan_train_forward(NormalizerKind::BatchNorm, x, None, state, true)?;
    commit(state, delta);
    Ok((y, cache))
}

/// Train-mode forward aggregating stored statistics without compensation.
pub fn naive_cbn_train_forward(
    x: &Tensor,
    state: &mut CbnState,
) -> CoreResult<(Tensor, NormCache)> {
    let (y, cache, delta) = plan_train_forward(NormalizerKind::NaiveCbn, x, None, state, true)?;
    commit(state, delta);
    Ok((y, cache))
}

/// Train-mode forward aggregating compensated statistics from the window.
/// Also captures this iteration's statistics and statistic gradients for
/// future compensation.
pub fn cbn_train_forward(
    x: &Tensor,
    theta_t: &Tensor,
    y_prev: &Tensor,
    geom: &ConvGeometry,
    state: &mut CbnState,
) -> CoreResult<(Tensor, NormCache)> {
    let bound = BoundLayerInputs {
        theta_t,
        y_prev,
        geom,
    };
    let (y, cache, delta) = plan_train_forward(NormalizerKind::Cbn, x, Some(bound), state, true)?;
    commit(state, delta);
    Ok((y, cache))
}

/// Train-mode output without any state mutation: no record capture, no
/// running-statistics update, no iteration advance. Used by finite-difference
/// probes and diagnostics, which must evaluate the forward map with the ring
/// buffer frozen.
pub fn train_forward_pure(
    kind: NormalizerKind,
    x: &Tensor,
    bound: Option<BoundLayerInputs<'_>>,
    state: &CbnState,
) -> CoreResult<Tensor> {
    let (y, _, _) = plan_train_forward(kind, x, bound, state, false)?;
    Ok(y)
}

/// Eval-mode forward: normalizes with running statistics. Never mutates state.
pub fn eval_forward(x: &Tensor, state: &CbnState) -> CoreResult<Tensor> {
    if state.t == 0 {
        return Err(CoreError::State(
            "eval requested before any training iteration populated the running statistics".into(),
        ));
    }
    let (x4, rank2) = to_nchw(x)?;
    let (n, c, h, w) = x4.dims4()?;
    check_channels(state, c)?;
    let plane = h * w;
    let mut y = Tensor::zeros(x4.shape());
    let xd = x4.data();
    let yd = y.data_mut();
    for ci in 0..c {
        let mean = state.running_mean.data()[ci];
        let inv = 1.0 / (state.running_var.data()[ci] + state.cfg.epsilon).sqrt();
        let gamma = state.affine.gamma.data()[ci];
        let beta = state.affine.beta.data()[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for off in base..base + plane {
                yd[off] = gamma * (xd[off] - mean) * inv + beta;
            }
        }
    }
    if rank2 {
        y.reshape(&[n, c])
    } else {
        Ok(y)
    }
}

/// Backward for the plain batch-normalization path.
pub fn bn_backward(
    grad_y: &Tensor,
    cache: &NormCache,
    state: &CbnState,
) -> CoreResult<NormBackward> {
    if !matches!(cache.path, CachePath::PlainBn) {
        return Err(CoreError::State(
            "cache came from a windowed forward; use the cross-iteration backward".into(),
        ));
    }
    let (g4, _) = to_nchw(grad_y)?;
    if g4.shape() != cache.x.shape() {
        return Err(CoreError::Shape(format!(
            "upstream gradient shape {:?} does not match activations {:?}",
            g4.shape(),
            cache.x.shape()
        )));
    }
    let (n, c, h, w) = cache.x.dims4()?;
    let plane = h * w;
    let m = cache.m;
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    let gd = g4.data();
    let xh = cache.xhat.data();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut a = 0.0;
            let mut b = 0.0;
            for off in base..base + plane {
                a += gd[off];
                b += gd[off] * xh[off];
            }
            grad_beta.data_mut()[ci] += a;
            grad_gamma.data_mut()[ci] += b;
        }
    }
    let mut grad_x = Tensor::zeros(cache.x.shape());
    let gx = grad_x.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let gamma = state.affine.gamma.data()[ci];
            let inv = cache.inv_std.data()[ci];
            let a_over_m = grad_beta.data()[ci] / m;
            let b_over_m = grad_gamma.data()[ci] / m;
            let scale = gamma * inv;
            for off in base..base + plane {
                gx[off] = scale * (gd[off] - a_over_m - xh[off] * b_over_m);
            }
        }
    }
    let grad_x = if cache.rank2 {
        grad_x.reshape(&[n, c])?
    } else {
        grad_x
    };
    Ok(NormBackward {
        grad_x,
        grad_gamma,
        grad_beta,
        grad_theta_extra: None,
    })
}

/// Backward for the cross-iteration paths (compensated or naive). Falls back
/// to the plain path when the forward degenerated to a single-term window.
pub fn cbn_backward(
    grad_y: &Tensor,
    cache: &NormCache,
    state: &CbnState,
) -> CoreResult<NormBackward> {
    let window = match &cache.path {
        CachePath::PlainBn => return bn_backward(grad_y, cache, state),
        CachePath::Window(window) => window,
    };
    let (g4, _) = to_nchw(grad_y)?;
    if g4.shape() != cache.x.shape() {
        return Err(CoreError::Shape(format!(
            "upstream gradient shape {:?} does not match activations {:?}",
            g4.shape(),
            cache.x.shape()
        )));
    }
    let (n, c, h, w) = cache.x.dims4()?;
    let plane = h * w;
    let m = cache.m;
    let weight = 1.0 / window.k_eff as f64;

    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    let gd = g4.data();
    let xh = cache.xhat.data();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut a = 0.0;
            let mut b = 0.0;
            for off in base..base + plane {
                a += gd[off];
                b += gd[off] * xh[off];
            }
            grad_beta.data_mut()[ci] += a;
            grad_gamma.data_mut()[ci] += b;
        }
    }

    // Sensitivities of the loss to the aggregated statistics, per channel.
    let mut d_mu_bar = vec![0.0; c];
    let mut d_nu_bar = vec![0.0; c];
    for ci in 0..c {
        let gamma = state.affine.gamma.data()[ci];
        let inv = cache.inv_std.data()[ci];
        let s = cache.s.data()[ci];
        let a_hat = gamma * grad_beta.data()[ci];
        let b_hat = gamma * grad_gamma.data()[ci];
        d_mu_bar[ci] = -a_hat * inv + window.mu_bar.data()[ci] * b_hat / s;
        d_nu_bar[ci] = -b_hat / (2.0 * s);
    }

    // Chain into the current batch's statistics, honoring the clamp branch.
    let mut d_mu_t = vec![0.0; c];
    let mut d_nu_t = vec![0.0; c];
    for ci in 0..c {
        d_mu_t[ci] = weight * d_mu_bar[ci];
        if window.current_clamped[ci] {
            d_mu_t[ci] += weight * d_nu_bar[ci] * 2.0 * window.mu_t.data()[ci];
        } else {
            d_nu_t[ci] = weight * d_nu_bar[ci];
        }
    }

    let mut grad_x = Tensor::zeros(cache.x.shape());
    let gx = grad_x.data_mut();
    let xd = cache.x.data();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let gamma = state.affine.gamma.data()[ci];
            let inv = cache.inv_std.data()[ci];
            let mu_term = d_mu_t[ci] / m;
            let nu_scale = d_nu_t[ci] * 2.0 / m;
            for off in base..base + plane {
                gx[off] = gamma * gd[off] * inv + mu_term + nu_scale * xd[off];
            }
        }
    }

    // Optional gradient through the compensation terms into the bound layer.
    let mut grad_theta_extra: Option<Tensor> = None;
    if window.taylor_backprop {
        for term in &window.terms {
            let Some(grads) = &term.grads else { continue };
            let theta_shape = grads.theta.shape().to_vec();
            let extra =
                grad_theta_extra.get_or_insert_with(|| Tensor::zeros(&theta_shape));
            let per_channel = grads.g_mu.numel();
            let g_mu = grads.g_mu.data();
            let g_nu = grads.g_nu.data();
            let ex = extra.data_mut();
            for ci in 0..c {
                let mut mu_coeff = weight * d_mu_bar[ci];
                let mut nu_coeff = 0.0;
                if term.clamped[ci] {
                    mu_coeff += weight * d_nu_bar[ci] * 2.0 * term.mu_comp.data()[ci];
                } else {
                    nu_coeff = weight * d_nu_bar[ci];
                }
                let base = ci * per_channel;
                for e in 0..per_channel {
                    ex[base + e] += mu_coeff * g_mu[e] + nu_coeff * g_nu[base + e];
                }
            }
        }
    }

    let grad_x = if cache.rank2 {
        grad_x.reshape(&[n, c])?
    } else {
        grad_x
    };
    Ok(NormBackward {
        grad_x,
        grad_gamma,
        grad_beta,
        grad_theta_extra,
    })
}

#[cfg(test)]
mod tests;
