//! Compensation of past mini-batch statistics to the current weights.
//!
//! A normalizer that aggregates statistics across iterations cannot use stored
//! (mean, mean-square) values directly: the weights of the layer that produced
//! them have moved since. This module compensates stored statistics with a
//! first-order polynomial in the weight delta of the producing layer, using
//! closed-form statistic gradients that never materialize the full Jacobian.
//!
//! For a convolution `x[i,j] = sum_{p,eta} theta[j,p,eta] * y[i+off(eta),p]`
//! with per-channel statistics over `m = N * H_out * W_out` samples:
//!
//! * `d mu_j / d theta[q,p,eta]` is zero unless `j == q`, and on the diagonal
//!   equals `(1/m) * sum_i y[i+off(eta),p]`, which is independent of the
//!   output channel. One `C_in x K_h x K_w` tensor therefore covers every
//!   output channel.
//! * `d nu_j / d theta[q,p,eta]` is zero unless `j == q`, and on the diagonal
//!   equals `(2/m) * sum_i x[i,j] * y[i+off(eta),p]`, stored densely as
//!   `C_out x C_in x K_h x K_w`.
//!
//! Building the dense Jacobian instead would cost a factor `C_out` more; that
//! construction lives in the oracles module purely for verification.

use std::sync::Arc;

use crate::error::{CoreError, CoreResult};
use crate::tensor::{conv2d_output_hw, Tensor};

/// Geometry of the convolution layer a normalizer is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn check_weight(&self, weight: &Tensor) -> CoreResult<()> {
        if weight.shape() != self.weight_shape() {
            return Err(CoreError::Shape(format!(
                "weight shape {:?} does not match geometry {:?}",
                weight.shape(),
                self.weight_shape()
            )));
        }
        Ok(())
    }

    pub fn output_hw(&self, input_hw: (usize, usize)) -> CoreResult<(usize, usize)> {
        conv2d_output_hw(input_hw, self.kernel, self.stride, self.padding)
    }
}

/// Gradient of the per-channel mean of a convolution output with respect to
/// the convolution weights, reduced to its channel-independent diagonal.
/// Returns a `C_in x K_h x K_w` tensor.
pub fn stat_grad_mu(y_prev: &Tensor, geom: &ConvGeometry) -> CoreResult<Tensor> {
    let (n, c_in, h, w) = y_prev.dims4()?;
    if c_in != geom.in_channels {
        return Err(CoreError::Shape(format!(
            "input has {c_in} channels but geometry expects {}",
            geom.in_channels
        )));
    }
    let (kh, kw) = geom.kernel;
    let (h_out, w_out) = geom.output_hw((h, w))?;
    let m = (n * h_out * w_out) as f64;
    let mut g = Tensor::zeros(&[c_in, kh, kw]);
    let y = y_prev.data();
    let gd = g.data_mut();
    for ni in 0..n {
        for ci in 0..c_in {
            let plane = (ni * c_in + ci) * h * w;
            for ki in 0..kh {
                for kj in 0..kw {
                    let mut acc = 0.0;
                    for oh in 0..h_out {
                        let ih = (oh * geom.stride.0 + ki) as isize - geom.padding.0 as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let row = plane + ih as usize * w;
                        for ow in 0..w_out {
                            let iw =
                                (ow * geom.stride.1 + kj) as isize - geom.padding.1 as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            acc += y[row + iw as usize];
                        }
                    }
                    gd[(ci * kh + ki) * kw + kj] += acc;
                }
            }
        }
    }
    for v in g.data_mut() {
        *v /= m;
    }
    Ok(g)
}

/// Gradient of the per-channel mean square of a convolution output with
/// respect to the convolution weights, reduced to its diagonal. `x` is the
/// convolution output the statistics were taken from. Returns a
/// `C_out x C_in x K_h x K_w` tensor.
///
/// This runs once per training iteration of every window-enabled layer, so it
/// is written for throughput: the input is first unrolled into a patch matrix
/// (one row per weight coordinate, one column per output position, zeros where
/// the window overhangs the padding), after which every gradient entry is a
/// plain dot product between contiguous rows.
pub fn stat_grad_nu(x: &Tensor, y_prev: &Tensor, geom: &ConvGeometry) -> CoreResult<Tensor> {
    let (n, c_in, h, w) = y_prev.dims4()?;
    let (xn, c_out, h_out, w_out) = x.dims4()?;
    if c_in != geom.in_channels || c_out != geom.out_channels {
        return Err(CoreError::Shape(format!(
            "channels ({c_in} in, {c_out} out) do not match geometry ({}, {})",
            geom.in_channels, geom.out_channels
        )));
    }
    if xn != n {
        return Err(CoreError::Shape(format!(
            "batch mismatch: activations {xn}, layer input {n}"
        )));
    }
    let expect_hw = geom.output_hw((h, w))?;
    if expect_hw != (h_out, w_out) {
        return Err(CoreError::Shape(format!(
            "activation extent ({h_out}, {w_out}) does not match geometry output {expect_hw:?}"
        )));
    }
    let (kh, kw) = geom.kernel;
    let per_channel = c_in * kh * kw;
    let win = h_out * w_out;
    let cols = n * win;
    let m = cols as f64;

    let mut patches = vec![0.0; per_channel * cols];
    let yd = y_prev.data();
    for ni in 0..n {
        for ci in 0..c_in {
            let y_plane = (ni * c_in + ci) * h * w;
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((ci * kh + ki) * kw + kj) * cols + ni * win;
                    for oh in 0..h_out {
                        let ih = (oh * geom.stride.0 + ki) as isize - geom.padding.0 as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let y_row = y_plane + ih as usize * w;
                        let dst = row + oh * w_out;
                        for ow in 0..w_out {
                            let iw =
                                (ow * geom.stride.1 + kj) as isize - geom.padding.1 as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            patches[dst + ow] = yd[y_row + iw as usize];
                        }
                    }
                }
            }
        }
    }

    // The activations with the channel axis outermost, columns ordered like
    // the patch matrix.
    let xd = x.data();
    let mut x_rows = vec![0.0; c_out * cols];
    for ni in 0..n {
        for j in 0..c_out {
            let src = (ni * c_out + j) * win;
            let dst = j * cols + ni * win;
            x_rows[dst..dst + win].copy_from_slice(&xd[src..src + win]);
        }
    }

    let mut g = Tensor::zeros(&[c_out, c_in, kh, kw]);
    let gd = g.data_mut();
    let scale = 2.0 / m;
    for j in 0..c_out {
        let xr = &x_rows[j * cols..(j + 1) * cols];
        let out = &mut gd[j * per_channel..(j + 1) * per_channel];
        for (e, slot) in out.iter_mut().enumerate() {
            *slot = scale * dot(xr, &patches[e * cols..(e + 1) * cols]);
        }
    }
    Ok(g)
}

/// Dot product with four independent accumulators, so the additions form four
/// short dependency chains instead of one long one.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (pa, pb) in ca.by_ref().zip(cb.by_ref()) {
        acc[0] += pa[0] * pb[0];
        acc[1] += pa[1] * pb[1];
        acc[2] += pa[2] * pb[2];
        acc[3] += pa[3] * pb[3];
    }
    let mut tail = 0.0;
    for (va, vb) in ca.remainder().iter().zip(cb.remainder()) {
        tail += va * vb;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Statistic gradients and the weight snapshot they were evaluated at.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorGrads {
    /// `C_in x K_h x K_w`, shared by every output channel.
    pub g_mu: Tensor,
    /// `C_out x C_in x K_h x K_w`.
    pub g_nu: Tensor,
    /// Weights of the bound layer at the iteration the record was taken.
    pub theta: Tensor,
}

/// Statistics captured at one past iteration of a normalizer's bound layer.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Iteration counter value at capture time; newer records have larger values.
    pub iteration: u64,
    /// Per-channel mean, length `C_out`.
    pub mu: Tensor,
    /// Per-channel mean square, length `C_out`.
    pub nu: Tensor,
    /// Present when the record supports compensation; absent for the variant
    /// that aggregates stale statistics directly.
    pub grads: Option<Arc<TaylorGrads>>,
}

/// Compensates a record's statistics to the current weights `theta_t` via the
/// first-order polynomial `stat + <grad, theta_t - theta_snapshot>`, truncated
/// to the bound layer's own weights. Returns `(mu_comp, nu_comp)`.
pub fn compensate(record: &IterationRecord, theta_t: &Tensor) -> CoreResult<(Tensor, Tensor)> {
    let grads = record.grads.as_ref().ok_or_else(|| {
        CoreError::State("record carries no statistic gradients to compensate with".into())
    })?;
    if theta_t.shape() != grads.theta.shape() {
        return Err(CoreError::Shape(format!(
            "current weights {:?} do not match snapshot {:?}",
            theta_t.shape(),
            grads.theta.shape()
        )));
    }
    let (c_out, c_in, kh, kw) = grads.g_nu.dims4()?;
    let per_channel = c_in * kh * kw;
    if grads.g_mu.numel() != per_channel {
        return Err(CoreError::Shape(format!(
            "mean gradient holds {} values, expected {per_channel}",
            grads.g_mu.numel()
        )));
    }
    if record.mu.numel() != c_out || record.nu.numel() != c_out {
        return Err(CoreError::Shape(format!(
            "statistics length {} does not match {c_out} output channels",
            record.mu.numel()
        )));
    }
    let g_mu = grads.g_mu.data();
    let g_nu = grads.g_nu.data();
    let theta_new = theta_t.data();
    let theta_old = grads.theta.data();
    let mut mu_comp = record.mu.clone();
    let mut nu_comp = record.nu.clone();
    for j in 0..c_out {
        let base = j * per_channel;
        let (dmu, dnu) = taylor_deltas(
            g_mu,
            &g_nu[base..base + per_channel],
            &theta_new[base..base + per_channel],
            &theta_old[base..base + per_channel],
        );
        mu_comp.data_mut()[j] += dmu;
        nu_comp.data_mut()[j] += dnu;
    }
    Ok((mu_comp, nu_comp))
}

/// First-order corrections `<g_mu, now - then>` and `<g_nu, now - then>` in
/// one pass, with unrolled accumulators to keep the dependency chains short.
/// This sits on the per-record, per-iteration hot path of the compensated
/// normalizer.
fn taylor_deltas(g_mu: &[f64], g_nu: &[f64], now: &[f64], then: &[f64]) -> (f64, f64) {
    let len = g_mu.len().min(g_nu.len()).min(now.len()).min(then.len());
    let chunks = len / 4;
    let mut mu_acc = [0.0f64; 4];
    let mut nu_acc = [0.0f64; 4];
    for t in 0..chunks {
        let k = t * 4;
        let gm: &[f64; 4] = g_mu[k..k + 4].try_into().expect("chunk of four");
        let gn: &[f64; 4] = g_nu[k..k + 4].try_into().expect("chunk of four");
        let a: &[f64; 4] = now[k..k + 4].try_into().expect("chunk of four");
        let b: &[f64; 4] = then[k..k + 4].try_into().expect("chunk of four");
        for q in 0..4 {
            let d = a[q] - b[q];
            mu_acc[q] += gm[q] * d;
            nu_acc[q] += gn[q] * d;
        }
    }
    let mut mu_tail = 0.0;
    let mut nu_tail = 0.0;
    for k in chunks * 4..len {
        let d = now[k] - then[k];
        mu_tail += g_mu[k] * d;
        nu_tail += g_nu[k] * d;
    }
    (
        (mu_acc[0] + mu_acc[1]) + (mu_acc[2] + mu_acc[3]) + mu_tail,
        (nu_acc[0] + nu_acc[1]) + (nu_acc[2] + nu_acc[3]) + nu_tail,
    )
}

/// Aggregated window statistics ready for normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedStats {
    /// Per-channel aggregated mean.
    pub mu_bar: Tensor,
    /// Per-channel aggregated mean square, clamped so `nu_bar >= mu_bar^2`.
    pub nu_bar: Tensor,
    /// Per-channel standard deviation `sqrt(nu_bar - mu_bar^2)`.
    pub sigma_bar: Tensor,
}

impl AggregatedStats {
    /// Per-channel variance `nu_bar - mu_bar^2` (non-negative by construction).
    pub fn variance(&self) -> Tensor {
        let mut v = self.nu_bar.clone();
        for (v, &m) in v.data_mut().iter_mut().zip(self.mu_bar.data()) {
            *v = (*v - m * m).max(0.0);
        }
        v
    }
}

/// Per-term validity clamp: a mean square below the squared mean cannot come
/// from any real sample set, so the squared mean is used instead.
pub fn clamp_nu(nu: f64, mu: f64) -> f64 {
    let mu_sq = mu * mu;
    if nu >= mu_sq {
        nu
    } else {
        mu_sq
    }
}

/// Averages the current statistics with compensated past statistics under the
/// per-term validity clamp. Every term, the current one included, contributes
/// `max(nu, mu^2)` to the mean square. A final elementwise floor keeps
/// `nu_bar >= mu_bar^2` exactly even under floating-point rounding.
pub fn aggregate(
    current: (&Tensor, &Tensor),
    compensated: &[(Tensor, Tensor)],
) -> CoreResult<AggregatedStats> {
    let (mu_t, nu_t) = current;
    let channels = mu_t.numel();
    if nu_t.numel() != channels {
        return Err(CoreError::Shape(format!(
            "mean has {channels} channels but mean square has {}",
            nu_t.numel()
        )));
    }
    for (i, (mu, nu)) in compensated.iter().enumerate() {
        if mu.numel() != channels || nu.numel() != channels {
            return Err(CoreError::Shape(format!(
                "term {i} has {}/{} channels, expected {channels}",
                mu.numel(),
                nu.numel()
            )));
        }
    }
    let k = (1 + compensated.len()) as f64;
    let mut mu_bar = Tensor::zeros(&[channels]);
    let mut nu_bar = Tensor::zeros(&[channels]);
    for c in 0..channels {
        let mut mu_acc = mu_t.data()[c];
        let mut nu_acc = clamp_nu(nu_t.data()[c], mu_t.data()[c]);
        for (mu, nu) in compensated {
            mu_acc += mu.data()[c];
            nu_acc += clamp_nu(nu.data()[c], mu.data()[c]);
        }
        let mu_mean = mu_acc / k;
        let nu_mean = (nu_acc / k).max(mu_mean * mu_mean);
        mu_bar.data_mut()[c] = mu_mean;
        nu_bar.data_mut()[c] = nu_mean;
    }
    let mut sigma_bar = Tensor::zeros(&[channels]);
    for c in 0..channels {
        let v = (nu_bar.data()[c] - mu_bar.data()[c] * mu_bar.data()[c]).max(0.0);
        sigma_bar.data_mut()[c] = v.sqrt();
    }
    Ok(AggregatedStats {
        mu_bar,
        nu_bar,
        sigma_bar,
    })
}

/// Window size actually usable at iteration `t`: 1 during the burn-in period,
/// afterwards capped by the configured window and by how much history exists.
pub fn effective_window(t: u64, burn_in_iters: u64, window: usize, stored_records: usize) -> usize {
    if t < burn_in_iters {
        1
    } else {
        window.max(1).min(1 + stored_records)
    }
}

/// Window size rule by batch size: ceil(16 / batch_size), capped at 8.
pub fn suggested_window(batch_size: usize) -> CoreResult<usize> {
    if batch_size < 1 {
        return Err(CoreError::Argument("batch size must be at least 1".into()));
    }
    let w = (16 + batch_size - 1) / batch_size;
    Ok(w.min(8))
}
