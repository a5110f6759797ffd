//! Independent brute-force verification machinery.
//!
//! Everything here deliberately re-derives its answers with plain nested
//! loops, sharing no kernels with the optimized code paths it checks: exact
//! replay of past statistics under new weights, dense statistic Jacobians,
//! central finite differences, and a diagnostic that measures how much a
//! layer's statistics respond to weights further down the network.

use crate::compensation::ConvGeometry;
use crate::error::{CoreError, CoreResult};
use crate::network::{layer_output_pure, LayerParams, LayerSpec, NetworkGraph};
use crate::tensor::Tensor;

/// Largest dense Jacobian (entry count) the naive construction will build.
const JACOBIAN_ENTRY_LIMIT: usize = 1_000_000;

/// Brute-force convolution used only inside this module. Accumulates each
/// output element over (channel, kernel row, kernel column) in the
/// conventional order so that replayed statistics are bit-reproducible.
fn conv_loops(y: &Tensor, theta: &Tensor, geom: &ConvGeometry) -> CoreResult<Tensor> {
    geom.check_weight(theta)?;
    let (n, c_in, h, w) = y.dims4()?;
    if c_in != geom.in_channels {
        return Err(CoreError::Shape(format!(
            "input has {c_in} channels but geometry expects {}",
            geom.in_channels
        )));
    }
    let (oh, ow) = geom.output_hw((h, w))?;
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let c_out = geom.out_channels;
    let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
    for ni in 0..n {
        for co in 0..c_out {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ki in 0..kh {
                            let ih = (ohi * sh + ki) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let iw = (owi * sw + kj) as isize - pw as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += y.at(&[ni, ci, ih as usize, iw as usize])
                                    * theta.at(&[co, ci, ki, kj]);
                            }
                        }
                    }
                    *out.at_mut(&[ni, co, ohi, owi]) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel mean and mean square, accumulated per sample plane and then
/// across samples, matching the conventional accumulation order.
fn channel_moments(x: &Tensor) -> CoreResult<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let m = (n * h * w) as f64;
    let mut mu = Tensor::zeros(&[c]);
    let mut nu = Tensor::zeros(&[c]);
    for ni in 0..n {
        for ci in 0..c {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    let v = x.at(&[ni, ci, hi, wi]);
                    sum += v;
                    sum_sq += v * v;
                }
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
    Ok((mu, nu))
}

fn fnv1a_words(hash: &mut u64, words: impl IntoIterator<Item = u64>) {
    for word in words {
        *hash ^= word;
        *hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
}

fn bundle_hash(y_prev: &Tensor, geom: &ConvGeometry, theta_snapshot: &Tensor) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    fnv1a_words(&mut hash, y_prev.shape().iter().map(|&d| d as u64));
    fnv1a_words(&mut hash, y_prev.data().iter().map(|v| v.to_bits()));
    fnv1a_words(
        &mut hash,
        [
            geom.in_channels as u64,
            geom.out_channels as u64,
            geom.kernel.0 as u64,
            geom.kernel.1 as u64,
            geom.stride.0 as u64,
            geom.stride.1 as u64,
            geom.padding.0 as u64,
            geom.padding.1 as u64,
        ],
    );
    fnv1a_words(&mut hash, theta_snapshot.shape().iter().map(|&d| d as u64));
    fnv1a_words(&mut hash, theta_snapshot.data().iter().map(|v| v.to_bits()));
    hash
}

/// A retained past input batch plus the geometry and weight snapshot needed
/// to recompute that iteration's statistics under any later weights. Holding
/// these for every iteration would defeat the point of compensation, so they
/// exist only as validation probes.
#[derive(Debug, Clone)]
pub struct ReplayBundle {
    pub y_prev: Tensor,
    pub geom: ConvGeometry,
    pub theta_snapshot: Tensor,
    /// Content hash over batch, geometry, and snapshot, taken at capture.
    hash: u64,
}

impl ReplayBundle {
    pub fn new(y_prev: Tensor, geom: ConvGeometry, theta_snapshot: Tensor) -> CoreResult<ReplayBundle> {
        geom.check_weight(&theta_snapshot)?;
        let (_, c_in, h, w) = y_prev.dims4()?;
        if c_in != geom.in_channels {
            return Err(CoreError::Shape(format!(
                "batch has {c_in} channels but geometry expects {}",
                geom.in_channels
            )));
        }
        geom.output_hw((h, w))?;
        let hash = bundle_hash(&y_prev, &geom, &theta_snapshot);
        Ok(ReplayBundle {
            y_prev,
            geom,
            theta_snapshot,
            hash,
        })
    }

    pub fn content_hash(&self) -> u64 {
        self.hash
    }
}

/// Recomputes the statistics of the bundled batch under weights `theta_t`:
/// the exact value the Taylor compensation approximates. At
/// `theta_t = theta_snapshot` this reproduces the originally captured
/// statistics bit for bit.
pub fn replay_exact_stats(bundle: &ReplayBundle, theta_t: &Tensor) -> CoreResult<(Tensor, Tensor)> {
    let fresh = bundle_hash(&bundle.y_prev, &bundle.geom, &bundle.theta_snapshot);
    if fresh != bundle.hash {
        return Err(CoreError::Integrity(format!(
            "replay bundle content hash {fresh:#018x} does not match recorded {:#018x}",
            bundle.hash
        )));
    }
    let x = conv_loops(&bundle.y_prev, theta_t, &bundle.geom)?;
    channel_moments(&x)
}

/// Dense statistic Jacobians built by direct differentiation: entry
/// `[j, q, p, ki, kj]` is the derivative of channel `j`'s statistic with
/// respect to weight `theta[q, p, ki, kj]`. Output channel `j` of the
/// convolution only involves the weights of channel `q = j`, so every
/// off-diagonal block is written as an exact zero; the expensive
/// `C_out x C_out` layout exists precisely to demonstrate that.
pub fn naive_stat_jacobian(
    y_prev: &Tensor,
    theta: &Tensor,
    x_l: &Tensor,
    geom: &ConvGeometry,
) -> CoreResult<(Tensor, Tensor)> {
    geom.check_weight(theta)?;
    let (n, c_in, h, w) = y_prev.dims4()?;
    if c_in != geom.in_channels {
        return Err(CoreError::Shape(format!(
            "input has {c_in} channels but geometry expects {}",
            geom.in_channels
        )));
    }
    let (oh, ow) = geom.output_hw((h, w))?;
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let c_out = geom.out_channels;
    if x_l.shape() != [n, c_out, oh, ow] {
        return Err(CoreError::Shape(format!(
            "activations shape {:?} does not match the {:?} convolution output",
            x_l.shape(),
            [n, c_out, oh, ow]
        )));
    }
    let entries = c_out * c_out * c_in * kh * kw;
    if entries > JACOBIAN_ENTRY_LIMIT {
        return Err(CoreError::Argument(format!(
            "dense Jacobian would hold {entries} entries, over the {JACOBIAN_ENTRY_LIMIT} limit"
        )));
    }
    let m = (n * oh * ow) as f64;
    let shape = [c_out, c_out, c_in, kh, kw];
    let mut j_mu = Tensor::zeros(&shape);
    let mut j_nu = Tensor::zeros(&shape);
    for j in 0..c_out {
        for q in 0..c_out {
            if j != q {
                // d x[:, j] / d theta[q, ..] vanishes identically: channel j
                // of the output never touches channel q's weights.
                continue;
            }
            for p in 0..c_in {
                for ki in 0..kh {
                    for kj in 0..kw {
                        // d x[ni, j, ohi, owi] / d theta[j, p, ki, kj] is the
                        // padded input element under that kernel position.
                        let mut dmu = 0.0;
                        let mut dnu = 0.0;
                        for ni in 0..n {
                            for ohi in 0..oh {
                                for owi in 0..ow {
                                    let ih = (ohi * sh + ki) as isize - ph as isize;
                                    let iw = (owi * sw + kj) as isize - pw as isize;
                                    if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let yv = y_prev.at(&[ni, p, ih as usize, iw as usize]);
                                    dmu += yv;
                                    dnu += 2.0 * x_l.at(&[ni, j, ohi, owi]) * yv;
                                }
                            }
                        }
                        *j_mu.at_mut(&[j, q, p, ki, kj]) = dmu / m;
                        *j_nu.at_mut(&[j, q, p, ki, kj]) = dnu / m;
                    }
                }
            }
        }
    }
    Ok((j_mu, j_nu))
}

/// Numeric Jacobian of `f` at `at` by central differences with step `h`.
/// Row `o`, column `p` holds d out[o] / d at[p]; the output is flattened to
/// `out_numel x in_numel` regardless of the shapes involved.
pub fn finite_diff<F>(mut f: F, at: &Tensor, h: f64) -> CoreResult<Tensor>
where
    F: FnMut(&Tensor) -> CoreResult<Tensor>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(CoreError::Argument(format!(
            "step must be positive and finite, got {h}"
        )));
    }
    let base = f(at)?;
    let out_n = base.numel();
    let in_n = at.numel();
    let mut jac = Tensor::zeros(&[out_n, in_n]);
    let mut work = at.clone();
    for p in 0..in_n {
        let orig = work.data()[p];
        work.data_mut()[p] = orig + h;
        let plus = f(&work)?;
        work.data_mut()[p] = orig - h;
        let minus = f(&work)?;
        work.data_mut()[p] = orig;
        if plus.shape() != base.shape() || minus.shape() != base.shape() {
            return Err(CoreError::State(
                "probed function changed its output shape between evaluations".into(),
            ));
        }
        for o in 0..out_n {
            jac.data_mut()[o * in_n + p] = (plus.data()[o] - minus.data()[o]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// How strongly one source layer's weights move a normalizer's statistics,
/// relative to the bound layer's own weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRatioEntry {
    /// Parameterized layer whose weights were probed.
    pub source_layer: usize,
    /// How many parameterized layers below the bound layer the source sits.
    pub offset: usize,
    /// Frobenius norm of the mean's sensitivity to the source weights,
    /// measured by finite differences through the network prefix.
    pub cross_mu: f64,
    pub cross_nu: f64,
    /// Closed-form Frobenius norm of the mean's sensitivity to the bound
    /// layer's own weights.
    pub within_mu: f64,
    pub within_nu: f64,
    pub ratio_mu: f64,
    pub ratio_nu: f64,
}

/// One normalizer layer's cross-layer sensitivity measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRatioRow {
    pub norm_layer: usize,
    pub bound_layer: usize,
    pub entries: Vec<GradRatioEntry>,
}

/// Rows for every normalizer layer that is deep enough to measure.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradRatioReport {
    pub rows: Vec<GradRatioRow>,
}

fn as_nchw(t: &Tensor) -> CoreResult<Tensor> {
    match t.rank() {
        4 => Ok(t.clone()),
        2 => {
            let (n, c) = t.dims2()?;
            t.reshape(&[n, c, 1, 1])
        }
        _ => Err(CoreError::Shape(format!(
            "expected rank 4 or rank 2, got shape {:?}",
            t.shape()
        ))),
    }
}

/// Measures, for the normalizer at `norm_layer`, how much the statistics of
/// its bound layer's output respond to the weights one and two parameterized
/// layers earlier, versus the closed-form response to the bound layer's own
/// weights. Truncating compensation to the bound layer is justified exactly
/// when these ratios stay small.
///
/// Cost: two pure prefix forwards per probed weight entry; intended for small
/// probe batches.
pub fn grad_ratio_diagnostic(
    graph: &NetworkGraph,
    batch: &Tensor,
    norm_layer: usize,
    h: f64,
) -> CoreResult<GradRatioRow> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(CoreError::Argument(format!(
            "step must be positive and finite, got {h}"
        )));
    }
    if norm_layer >= graph.layers.len()
        || !matches!(graph.layers[norm_layer], LayerSpec::Normalizer { .. })
    {
        return Err(CoreError::Argument(format!(
            "layer {norm_layer} is not a normalizer"
        )));
    }
    let bound = graph.bindings[norm_layer]
        .ok_or_else(|| CoreError::State(format!("layer {norm_layer} has no binding")))?;
    let geom = graph.bound_geometry(norm_layer)?;
    let plist = graph.parameterized_layers();
    let pos = plist
        .iter()
        .position(|&p| p == bound)
        .ok_or_else(|| CoreError::State(format!("layer {bound} is not parameterized")))?;
    if pos == 0 {
        return Err(CoreError::Argument(format!(
            "normalizer at layer {norm_layer} has no parameterized layer below its bound layer"
        )));
    }

    let x_l = as_nchw(&layer_output_pure(graph, batch, bound, None)?)?;
    let y_prev = if bound == 0 {
        batch.clone()
    } else {
        as_nchw(&layer_output_pure(graph, batch, bound - 1, None)?)?
    };
    let g_mu = crate::compensation::stat_grad_mu(&y_prev, &geom)?;
    let g_nu = crate::compensation::stat_grad_nu(&x_l, &y_prev, &geom)?;
    let within_mu = (geom.out_channels as f64).sqrt() * g_mu.frobenius_norm();
    let within_nu = g_nu.frobenius_norm();

    let mut entries = Vec::new();
    for offset in [1usize, 2] {
        if offset > pos {
            break;
        }
        let source = plist[pos - offset];
        let stored = match &graph.params[source] {
            LayerParams::Conv { weight } | LayerParams::Fc { weight, .. } => weight,
            _ => {
                return Err(CoreError::State(format!(
                    "layer {source} has no weight tensor"
                )))
            }
        };
        let mut work = stored.clone();
        let mut acc_mu = 0.0;
        let mut acc_nu = 0.0;
        for e in 0..work.numel() {
            let orig = work.data()[e];
            work.data_mut()[e] = orig + h;
            let xp = as_nchw(&layer_output_pure(graph, batch, bound, Some((source, &work)))?)?;
            work.data_mut()[e] = orig - h;
            let xm = as_nchw(&layer_output_pure(graph, batch, bound, Some((source, &work)))?)?;
            work.data_mut()[e] = orig;
            let (mu_p, nu_p) = channel_moments(&xp)?;
            let (mu_m, nu_m) = channel_moments(&xm)?;
            for j in 0..geom.out_channels {
                let dmu = (mu_p.data()[j] - mu_m.data()[j]) / (2.0 * h);
                let dnu = (nu_p.data()[j] - nu_m.data()[j]) / (2.0 * h);
                acc_mu += dmu * dmu;
                acc_nu += dnu * dnu;
            }
        }
        let cross_mu = acc_mu.sqrt();
        let cross_nu = acc_nu.sqrt();
        entries.push(GradRatioEntry {
            source_layer: source,
            offset,
            cross_mu,
            cross_nu,
            within_mu,
            within_nu,
            ratio_mu: cross_mu / within_mu,
            ratio_nu: cross_nu / within_nu,
        });
    }
    Ok(GradRatioRow {
        norm_layer,
        bound_layer: bound,
        entries,
    })
}
