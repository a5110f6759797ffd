use super::*;
use crate::network::{
    backward, forward_train, sgd_step, LayerParams, LayerSpec, NetworkGraph, OptState,
};
use crate::oracles::{finite_diff, replay_exact_stats, ReplayBundle};
use crate::tensor::{conv2d_forward, Rng, Tensor};

fn state_with(channels: usize, cfg: BnConfig) -> CbnState {
    CbnState::new(channels, cfg).expect("test config must validate")
}

fn channel_mean(x: &Tensor, channel: usize) -> f64 {
    let (n, c, h, w) = x.dims4().unwrap();
    let _ = c;
    let mut sum = 0.0;
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                sum += x.at(&[ni, channel, hi, wi]);
            }
        }
    }
    sum / (n * h * w) as f64
}

fn channel_mean_sq(x: &Tensor, channel: usize) -> f64 {
    let (n, c, h, w) = x.dims4().unwrap();
    let _ = c;
    let mut sum = 0.0;
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let v = x.at(&[ni, channel, hi, wi]);
                sum += v * v;
            }
        }
    }
    sum / (n * h * w) as f64
}

/// Pulls the statistics a commit folded into the running averages back out of
/// the EMA update.
fn recover_used_stats(before: &CbnState, after: &CbnState) -> (Vec<f64>, Vec<f64>) {
    let rho = before.cfg.running_decay;
    let mean = before
        .running_mean
        .data()
        .iter()
        .zip(after.running_mean.data())
        .map(|(&old, &new)| (new - rho * old) / (1.0 - rho))
        .collect();
    let var = before
        .running_var
        .data()
        .iter()
        .zip(after.running_var.data())
        .map(|(&old, &new)| (new - rho * old) / (1.0 - rho))
        .collect();
    (mean, var)
}

#[test]
fn bn_normalizes_a_three_point_channel() {
    // Channel values 1, 2, 3: mean 2, population variance 2/3. With a
    // negligible epsilon the normalized values are +-sqrt(3/2) and 0.
    let x = Tensor::from_vec(&[3, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let mut state = state_with(
        1,
        BnConfig {
            epsilon: 1e-12,
            ..BnConfig::default()
        },
    );
    let (y, _) = bn_train_forward(&x, &mut state).unwrap();
    let want = 1.224744871391589;
    assert!(
        (y.data()[0] + want).abs() < 1e-9,
        "first value {} should be -{want}",
        y.data()[0]
    );
    assert!(
        y.data()[1].abs() < 1e-12,
        "middle value {} should be zero",
        y.data()[1]
    );
    assert!(
        (y.data()[2] - want).abs() < 1e-9,
        "last value {} should be {want}",
        y.data()[2]
    );
}

#[test]
fn bn_updates_running_statistics_with_the_configured_decay() {
    let x = Tensor::from_vec(&[3, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let mut state = state_with(1, BnConfig::default());
    bn_train_forward(&x, &mut state).unwrap();
    let want_mean = 0.9 * 0.0 + 0.1 * 2.0;
    let want_var = 0.9 * 1.0 + 0.1 * (2.0 / 3.0);
    assert!(
        (state.running_mean.data()[0] - want_mean).abs() < 1e-15,
        "running mean {} should be {want_mean}",
        state.running_mean.data()[0]
    );
    assert!(
        (state.running_var.data()[0] - want_var).abs() < 1e-15,
        "running variance {} should be {want_var}",
        state.running_var.data()[0]
    );
}

#[test]
fn bn_maps_a_constant_channel_to_beta() {
    let x = Tensor::full(&[2, 1, 2, 2], 5.0);
    let mut state = state_with(1, BnConfig::default());
    state.affine.gamma.data_mut()[0] = 2.0;
    state.affine.beta.data_mut()[0] = 0.3;
    let (y, _) = bn_train_forward(&x, &mut state).unwrap();
    for &v in y.data() {
        assert_eq!(v, 0.3, "constant input has zero deviation, so y must be exactly beta");
    }
}

#[test]
fn bn_output_has_zero_mean_and_unit_variance() {
    // The output variance is sigma^2 / (sigma^2 + epsilon), so meeting a 1e-6
    // tolerance needs an epsilon far below the data variance.
    let mut rng = Rng::new(2);
    let x = rng.normal_tensor(&[4, 3, 5, 5], 1.5, 2.0);
    let mut state = state_with(
        3,
        BnConfig {
            epsilon: 1e-12,
            ..BnConfig::default()
        },
    );
    let (y, _) = bn_train_forward(&x, &mut state).unwrap();
    for ci in 0..3 {
        let mean = channel_mean(&y, ci);
        let var = channel_mean_sq(&y, ci) - mean * mean;
        assert!(mean.abs() < 1e-12, "channel {ci} mean {mean} should vanish");
        assert!(
            (var - 1.0).abs() < 1e-6,
            "channel {ci} variance {var} should be 1"
        );
    }
}

#[test]
fn bn_rejects_a_channel_mismatch() {
    let x = Tensor::zeros(&[2, 2, 2, 2]);
    let mut state = state_with(3, BnConfig::default());
    assert!(matches!(
        bn_train_forward(&x, &mut state),
        Err(CoreError::Shape(_))
    ));
}

#[test]
fn config_validation_rejects_bad_values() {
    for cfg in [
        BnConfig {
            epsilon: 0.0,
            ..BnConfig::default()
        },
        BnConfig {
            epsilon: -1.0,
            ..BnConfig::default()
        },
        BnConfig {
            running_decay: 0.0,
            ..BnConfig::default()
        },
        BnConfig {
            running_decay: 1.0,
            ..BnConfig::default()
        },
        BnConfig {
            window: 0,
            ..BnConfig::default()
        },
    ] {
        assert!(cfg.validate().is_err(), "config {cfg:?} should fail validation");
    }
}

#[test]
fn bn_backward_of_zero_upstream_is_zero() {
    let mut rng = Rng::new(3);
    let x = rng.normal_tensor(&[2, 2, 3, 3], 0.0, 1.0);
    let mut state = state_with(2, BnConfig::default());
    let (_, cache) = bn_train_forward(&x, &mut state).unwrap();
    let grad = bn_backward(&Tensor::zeros(x.shape()), &cache, &state).unwrap();
    assert!(grad.grad_x.data().iter().all(|&v| v == 0.0));
    assert!(grad.grad_gamma.data().iter().all(|&v| v == 0.0));
    assert!(grad.grad_beta.data().iter().all(|&v| v == 0.0));
}

#[test]
fn bn_backward_shift_gradient_is_the_upstream_sum() {
    let mut rng = Rng::new(4);
    let x = rng.normal_tensor(&[2, 2, 3, 3], 0.0, 1.0);
    let g = rng.normal_tensor(&[2, 2, 3, 3], 0.0, 1.0);
    let mut state = state_with(2, BnConfig::default());
    let (_, cache) = bn_train_forward(&x, &mut state).unwrap();
    let grad = bn_backward(&g, &cache, &state).unwrap();
    for ci in 0..2 {
        let mut want = 0.0;
        for ni in 0..2 {
            for hi in 0..3 {
                for wi in 0..3 {
                    want += g.at(&[ni, ci, hi, wi]);
                }
            }
        }
        let got = grad.grad_beta.data()[ci];
        assert!(
            (got - want).abs() < 1e-12,
            "channel {ci}: shift gradient {got} should be the upstream sum {want}"
        );
    }
}

#[test]
fn bn_backward_matches_finite_differences() {
    let mut rng = Rng::new(5);
    let x = rng.normal_tensor(&[2, 2, 3, 3], 0.5, 1.0);
    let w = rng.normal_tensor(&[2, 2, 3, 3], 0.0, 1.0);
    let mut state = state_with(2, BnConfig::default());
    state.affine.gamma = rng.normal_tensor(&[2], 1.0, 0.2);
    state.affine.beta = rng.normal_tensor(&[2], 0.0, 0.2);
    let base_state = state.clone();
    let (_, cache) = bn_train_forward(&x, &mut state).unwrap();
    let grad = bn_backward(&w, &cache, &state).unwrap();

    let loss_of = |y: &Tensor| {
        let mut acc = 0.0;
        for (a, b) in y.data().iter().zip(w.data()) {
            acc += a * b;
        }
        Tensor::scalar(acc)
    };
    let fd_x = finite_diff(
        |xp| {
            let y = train_forward_pure(NormalizerKind::BatchNorm, xp, None, &base_state)?;
            Ok(loss_of(&y))
        },
        &x,
        1e-6,
    )
    .unwrap();
    for (i, (&got, &want)) in grad.grad_x.data().iter().zip(fd_x.data()).enumerate() {
        let denom = got.abs().max(want.abs()).max(1e-2);
        assert!(
            ((got - want) / denom).abs() < 1e-5,
            "input gradient {i}: analytic {got} vs finite difference {want}"
        );
    }

    let fd_gamma = finite_diff(
        |gp| {
            let mut s = base_state.clone();
            s.affine.gamma = gp.clone();
            let y = train_forward_pure(NormalizerKind::BatchNorm, &x, None, &s)?;
            Ok(loss_of(&y))
        },
        &base_state.affine.gamma,
        1e-6,
    )
    .unwrap();
    let fd_beta = finite_diff(
        |bp| {
            let mut s = base_state.clone();
            s.affine.beta = bp.clone();
            let y = train_forward_pure(NormalizerKind::BatchNorm, &x, None, &s)?;
            Ok(loss_of(&y))
        },
        &base_state.affine.beta,
        1e-6,
    )
    .unwrap();
    for ci in 0..2 {
        let got = grad.grad_gamma.data()[ci];
        let want = fd_gamma.data()[ci];
        assert!(
            ((got - want) / want.abs().max(1e-2)).abs() < 1e-5,
            "scale gradient {ci}: analytic {got} vs finite difference {want}"
        );
        let got = grad.grad_beta.data()[ci];
        let want = fd_beta.data()[ci];
        assert!(
            ((got - want) / want.abs().max(1e-2)).abs() < 1e-5,
            "shift gradient {ci}: analytic {got} vs finite difference {want}"
        );
    }
}

fn small_conv_setup(rng: &mut Rng) -> (ConvGeometry, Tensor, Tensor, Tensor) {
    let geom = ConvGeometry {
        in_channels: 2,
        out_channels: 2,
        kernel: (2, 2),
        stride: (1, 1),
        padding: (1, 1),
    };
    let y_prev = rng.normal_tensor(&[2, 2, 4, 4], 0.0, 1.0);
    let theta = rng.normal_tensor(&geom.weight_shape(), 0.0, 0.5);
    let x = conv2d_forward(&y_prev, &theta, geom.stride, geom.padding).unwrap();
    (geom, y_prev, theta, x)
}

#[test]
fn cbn_with_unit_window_equals_bn_exactly() {
    let mut rng = Rng::new(6);
    let (geom, y_prev, theta, x) = small_conv_setup(&mut rng);
    let g = rng.normal_tensor(x.shape(), 0.0, 1.0);

    let mut bn_state = state_with(2, BnConfig::default());
    let mut cbn_state = state_with(2, BnConfig::default());
    let (y_bn, cache_bn) = bn_train_forward(&x, &mut bn_state).unwrap();
    let (y_cbn, cache_cbn) = cbn_train_forward(&x, &theta, &y_prev, &geom, &mut cbn_state).unwrap();
    assert_eq!(
        y_bn.data(),
        y_cbn.data(),
        "unit window must take the plain path bit for bit"
    );
    assert_eq!(bn_state.running_mean.data(), cbn_state.running_mean.data());
    assert_eq!(bn_state.running_var.data(), cbn_state.running_var.data());
    assert!(cbn_state.records.is_empty(), "unit window stores no records");

    let back_bn = bn_backward(&g, &cache_bn, &bn_state).unwrap();
    let back_cbn = cbn_backward(&g, &cache_cbn, &cbn_state).unwrap();
    assert_eq!(back_bn.grad_x.data(), back_cbn.grad_x.data());
    assert_eq!(back_bn.grad_gamma.data(), back_cbn.grad_gamma.data());
    assert_eq!(back_bn.grad_beta.data(), back_cbn.grad_beta.data());
    assert!(back_cbn.grad_theta_extra.is_none());
}

#[test]
fn cbn_first_iteration_of_a_wide_window_is_plain_bn() {
    let mut rng = Rng::new(7);
    let (geom, y_prev, theta, x) = small_conv_setup(&mut rng);
    let mut bn_state = state_with(2, BnConfig::default());
    let mut cbn_state = state_with(
        2,
        BnConfig {
            window: 4,
            ..BnConfig::default()
        },
    );
    let (y_bn, _) = bn_train_forward(&x, &mut bn_state).unwrap();
    let (y_cbn, _) = cbn_train_forward(&x, &theta, &y_prev, &geom, &mut cbn_state).unwrap();
    assert_eq!(
        y_bn.data(),
        y_cbn.data(),
        "an empty ring buffer degenerates to plain batch normalization"
    );
    assert_eq!(
        cbn_state.records.len(),
        1,
        "the first iteration must still capture a record for later windows"
    );
}

#[test]
fn cbn_requires_bound_layer_inputs_matching_the_geometry() {
    let mut rng = Rng::new(8);
    let (geom, y_prev, _, x) = small_conv_setup(&mut rng);
    let mut state = state_with(
        2,
        BnConfig {
            window: 2,
            ..BnConfig::default()
        },
    );
    let bad_theta = Tensor::zeros(&[3, 2, 2, 2]);
    assert!(
        cbn_train_forward(&x, &bad_theta, &y_prev, &geom, &mut state).is_err(),
        "a weight tensor that does not match the bound geometry must be rejected"
    );
}

#[test]
fn frozen_weights_make_the_window_a_plain_average_and_match_naive() {
    let mut rng = Rng::new(9);
    let geom = ConvGeometry {
        in_channels: 2,
        out_channels: 3,
        kernel: (3, 3),
        stride: (1, 1),
        padding: (1, 1),
    };
    let theta = rng.normal_tensor(&geom.weight_shape(), 0.0, 0.5);
    let cfg = BnConfig {
        window: 3,
        ..BnConfig::default()
    };
    let mut cbn_state = state_with(3, cfg.clone());
    let mut naive_state = state_with(3, cfg);

    let mut mus: Vec<Vec<f64>> = Vec::new();
    let mut nus: Vec<Vec<f64>> = Vec::new();
    let mut last_y = None;
    for step in 0..3 {
        let y_prev = rng.normal_tensor(&[2, 2, 5, 5], 0.0, 1.0);
        let x = conv2d_forward(&y_prev, &theta, geom.stride, geom.padding).unwrap();
        mus.push((0..3).map(|c| channel_mean(&x, c)).collect());
        nus.push((0..3).map(|c| channel_mean_sq(&x, c)).collect());

        let before = cbn_state.clone();
        let (y_cbn, _) = cbn_train_forward(&x, &theta, &y_prev, &geom, &mut cbn_state).unwrap();
        let (y_naive, _) = naive_cbn_train_forward(&x, &mut naive_state).unwrap();
        assert_eq!(
            y_cbn.data(),
            y_naive.data(),
            "step {step}: frozen weights zero the compensation, so both variants agree bit for bit"
        );
        if step == 2 {
            let (used_mean, used_var) = recover_used_stats(&before, &cbn_state);
            for ci in 0..3 {
                let want_mu = (mus[0][ci] + mus[1][ci] + mus[2][ci]) / 3.0;
                let nu_bar =
                    (nus[0][ci].max(mus[0][ci].powi(2))
                        + nus[1][ci].max(mus[1][ci].powi(2))
                        + nus[2][ci].max(mus[2][ci].powi(2)))
                        / 3.0;
                let want_var = nu_bar - want_mu * want_mu;
                assert!(
                    (used_mean[ci] - want_mu).abs() < 1e-9,
                    "channel {ci}: aggregated mean {} should be the plain average {want_mu}",
                    used_mean[ci]
                );
                assert!(
                    (used_var[ci] - want_var).abs() < 1e-9,
                    "channel {ci}: aggregated variance {} should come from the plain averages, want {want_var}",
                    used_var[ci]
                );
            }
            last_y = Some((x, y_cbn, used_mean, used_var));
        }
    }

    // Self-consistency: undoing the normalization with the aggregated
    // statistics recovers the input exactly.
    let (x, y, used_mean, used_var) = last_y.unwrap();
    for ci in 0..3 {
        let scale = (used_var[ci] + 1e-5).sqrt();
        for ni in 0..2 {
            for hi in 0..5 {
                for wi in 0..5 {
                    let rebuilt = y.at(&[ni, ci, hi, wi]) * scale + used_mean[ci];
                    let orig = x.at(&[ni, ci, hi, wi]);
                    assert!(
                        (rebuilt - orig).abs() < 1e-9,
                        "undoing the normalization should reproduce x: {rebuilt} vs {orig}"
                    );
                }
            }
        }
    }
}

#[test]
fn burn_in_forces_single_term_windows_and_stores_nothing() {
    let mut rng = Rng::new(10);
    let geom = ConvGeometry {
        in_channels: 1,
        out_channels: 2,
        kernel: (1, 1),
        stride: (1, 1),
        padding: (0, 0),
    };
    let theta = rng.normal_tensor(&geom.weight_shape(), 0.0, 1.0);
    let mut state = state_with(
        2,
        BnConfig {
            window: 4,
            burn_in_iters: 3,
            ..BnConfig::default()
        },
    );
    let mut seen = Vec::new();
    for _ in 0..8 {
        seen.push(state.current_effective_window());
        let y_prev = rng.normal_tensor(&[2, 1, 3, 3], 0.0, 1.0);
        let x = conv2d_forward(&y_prev, &theta, (1, 1), (0, 0)).unwrap();
        cbn_train_forward(&x, &theta, &y_prev, &geom, &mut state).unwrap();
        if state.t <= 3 {
            assert!(
                state.records.is_empty(),
                "burn-in iterations must not store records, found {} at t={}",
                state.records.len(),
                state.t
            );
        }
        assert!(
            state.records.len() <= 3,
            "ring buffer may never exceed window - 1"
        );
    }
    assert_eq!(
        seen,
        vec![1, 1, 1, 1, 2, 3, 4, 4],
        "effective window should stay 1 through burn-in, then ramp to the cap"
    );
    let iterations: Vec<u64> = state.records.iter().map(|r| r.iteration).collect();
    assert_eq!(
        iterations,
        vec![7, 6, 5],
        "records must be ordered most recent first"
    );
}

#[test]
fn window_average_tracks_one_sgd_step_in_a_two_layer_net() {
    // A conv stack with a compensated normalizer on the second convolution.
    // After one optimizer step the aggregated mean must match the exact
    // replay of the stored batch under the new weights: the mean is linear in
    // the weights, so first-order compensation reproduces it exactly. The
    // mean square keeps a quadratic remainder, which must beat the stale
    // statistics the plain cross-iteration variant uses.
    let mut rng = Rng::new(11);
    let layers = vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 2,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
        },
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
        },
        LayerSpec::Normalizer {
            kind: NormalizerKind::Cbn,
            cfg: BnConfig {
                window: 2,
                ..BnConfig::default()
            },
        },
    ];
    let mut graph = NetworkGraph::build((1, 6, 6), layers, &mut rng).unwrap();
    let mut opt = OptState::new(&graph);
    let geom = graph.bound_geometry(3).unwrap();

    let batch0 = rng.normal_tensor(&[4, 1, 6, 6], 0.0, 1.0);
    let (_, trace0) = forward_train(&mut graph, &batch0).unwrap();
    let y_prev0 = trace0.inputs[2].clone();
    let theta0 = match &graph.params[2] {
        LayerParams::Conv { weight } => weight.clone(),
        _ => panic!("layer 2 should be a convolution"),
    };
    let (mu0, nu0) = {
        let state = match &graph.params[3] {
            LayerParams::Norm { state } => state,
            _ => panic!("layer 3 should be a normalizer"),
        };
        let rec = state.records.front().expect("first iteration should store a record");
        (rec.mu.clone(), rec.nu.clone())
    };

    let upstream = rng.normal_tensor(trace0.output.shape(), 0.0, 1.0);
    let grads = backward(&graph, &trace0, &upstream).unwrap();
    // The step must stay small against the weight norm: compensation carries a
    // quadratic remainder in the step, and the comparison against stale
    // statistics is only meaningful inside the first-order regime.
    sgd_step(&mut graph, &grads, &mut opt, 0.002, 0.0, 0.0).unwrap();
    let theta1 = match &graph.params[2] {
        LayerParams::Conv { weight } => weight.clone(),
        _ => unreachable!(),
    };
    let step_norm = {
        let mut d = theta1.clone();
        d.axpy(-1.0, &theta0).unwrap();
        d.frobenius_norm()
    };
    assert!(step_norm > 1e-4, "the optimizer step should move the weights");

    let state_before = match &graph.params[3] {
        LayerParams::Norm { state } => state.clone(),
        _ => unreachable!(),
    };
    let batch1 = rng.normal_tensor(&[4, 1, 6, 6], 0.0, 1.0);
    let (_, trace1) = forward_train(&mut graph, &batch1).unwrap();
    let state_after = match &graph.params[3] {
        LayerParams::Norm { state } => state,
        _ => unreachable!(),
    };
    let (used_mean, used_var) = recover_used_stats(&state_before, state_after);

    let bundle = ReplayBundle::new(y_prev0, geom, theta0).unwrap();
    let (mu_replay, nu_replay) = replay_exact_stats(&bundle, &theta1).unwrap();
    let x1 = &trace1.inputs[3];
    for ci in 0..3 {
        let mu_t = channel_mean(x1, ci);
        let nu_t = channel_mean_sq(x1, ci);
        let want_mu = (mu_t + mu_replay.data()[ci]) / 2.0;
        assert!(
            (used_mean[ci] - want_mu).abs() < 1e-10,
            "channel {ci}: aggregated mean {} should equal the replay average {want_mu} exactly",
            used_mean[ci]
        );

        let used_nu = used_var[ci] + used_mean[ci] * used_mean[ci];
        let want_nu = (nu_t.max(mu_t * mu_t)
            + nu_replay.data()[ci].max(mu_replay.data()[ci].powi(2)))
            / 2.0;
        let err_comp = (used_nu - want_nu).abs();
        let stale_nu = (nu_t.max(mu_t * mu_t) + nu0.data()[ci].max(mu0.data()[ci].powi(2))) / 2.0;
        let err_stale = (stale_nu - want_nu).abs();
        assert!(
            err_comp < err_stale,
            "channel {ci}: compensated mean square error {err_comp} should beat stale error {err_stale}"
        );
        assert!(
            err_comp < 10.0 * step_norm * step_norm,
            "channel {ci}: mean-square error {err_comp} should be quadratic in the step {step_norm}"
        );
    }
}

fn build_windowed_state(
    rng: &mut Rng,
    geom: &ConvGeometry,
    cfg: BnConfig,
    steps: usize,
    theta_drift: f64,
) -> (CbnState, Tensor) {
    let mut state = state_with(geom.out_channels, cfg);
    let mut theta = rng.normal_tensor(&geom.weight_shape(), 0.0, 0.5);
    for _ in 0..steps {
        let y_prev = rng.normal_tensor(&[2, geom.in_channels, 4, 4], 0.0, 1.0);
        let x = conv2d_forward(&y_prev, &theta, geom.stride, geom.padding).unwrap();
        cbn_train_forward(&x, &theta, &y_prev, geom, &mut state).unwrap();
        let drift = rng.normal_tensor(&geom.weight_shape(), 0.0, theta_drift);
        theta.axpy(1.0, &drift).unwrap();
    }
    (state, theta)
}

#[test]
fn cbn_backward_matches_finite_differences_of_the_frozen_forward() {
    let mut rng = Rng::new(77);
    let geom = ConvGeometry {
        in_channels: 2,
        out_channels: 2,
        kernel: (2, 2),
        stride: (1, 1),
        padding: (1, 1),
    };
    let cfg = BnConfig {
        window: 3,
        ..BnConfig::default()
    };
    let (mut base_state, theta) = build_windowed_state(&mut rng, &geom, cfg, 2, 0.02);
    base_state.affine.gamma = rng.normal_tensor(&[2], 1.0, 0.2);
    base_state.affine.beta = rng.normal_tensor(&[2], 0.0, 0.2);
    assert_eq!(base_state.records.len(), 2, "history should be populated");

    let y_prev = rng.normal_tensor(&[2, 2, 4, 4], 0.0, 1.0);
    let x = conv2d_forward(&y_prev, &theta, geom.stride, geom.padding).unwrap();
    let w = rng.normal_tensor(x.shape(), 0.0, 1.0);
    let loss_of = |y: &Tensor| {
        let mut acc = 0.0;
        for (a, b) in y.data().iter().zip(w.data()) {
            acc += a * b;
        }
        Tensor::scalar(acc)
    };

    let mut run_state = base_state.clone();
    let (_, cache) = cbn_train_forward(&x, &theta, &y_prev, &geom, &mut run_state).unwrap();
    let back = cbn_backward(&w, &cache, &run_state).unwrap();

    let fd_x = finite_diff(
        |xp| {
            let bound = BoundLayerInputs {
                theta_t: &theta,
                y_prev: &y_prev,
                geom: &geom,
            };
            let y = train_forward_pure(NormalizerKind::Cbn, xp, Some(bound), &base_state)?;
            Ok(loss_of(&y))
        },
        &x,
        1e-6,
    )
    .unwrap();
    for (i, (&got, &want)) in back.grad_x.data().iter().zip(fd_x.data()).enumerate() {
        let denom = got.abs().max(want.abs()).max(1e-2);
        assert!(
            ((got - want) / denom).abs() < 1e-5,
            "input gradient {i}: analytic {got} vs finite difference {want}"
        );
    }

    let extra = back
        .grad_theta_extra
        .expect("compensated history with backprop enabled must produce a weight contribution");
    let fd_theta = finite_diff(
        |tp| {
            let bound = BoundLayerInputs {
                theta_t: tp,
                y_prev: &y_prev,
                geom: &geom,
            };
            let y = train_forward_pure(NormalizerKind::Cbn, &x, Some(bound), &base_state)?;
            Ok(loss_of(&y))
        },
        &theta,
        1e-6,
    )
    .unwrap();
    let fd_norm = fd_theta.frobenius_norm();
    assert!(
        fd_norm > 1e-6,
        "the compensation route should carry a real gradient, norm {fd_norm}"
    );
    for (i, (&got, &want)) in extra.data().iter().zip(fd_theta.data()).enumerate() {
        let denom = got.abs().max(want.abs()).max(1e-2);
        assert!(
            ((got - want) / denom).abs() < 1e-5,
            "weight contribution {i}: analytic {got} vs finite difference {want}"
        );
    }

    let fd_gamma = finite_diff(
        |gp| {
            let mut s = base_state.clone();
            s.affine.gamma = gp.clone();
            let bound = BoundLayerInputs {
                theta_t: &theta,
                y_prev: &y_prev,
                geom: &geom,
            };
            let y = train_forward_pure(NormalizerKind::Cbn, &x, Some(bound), &s)?;
            Ok(loss_of(&y))
        },
        &base_state.affine.gamma,
        1e-6,
    )
    .unwrap();
    for ci in 0..2 {
        let got = back.grad_gamma.data()[ci];
        let want = fd_gamma.data()[ci];
        assert!(
            ((got - want) / want.abs().max(1e-2)).abs() < 1e-5,
            "scale gradient {ci}: analytic {got} vs finite difference {want}"
        );
    }

    // The shift gradient is the upstream sum no matter how wide the window is.
    for ci in 0..2 {
        let mut want = 0.0;
        for ni in 0..2 {
            for hi in 0..5 {
                for wi in 0..5 {
                    want += w.at(&[ni, ci, hi, wi]);
                }
            }
        }
        let got = back.grad_beta.data()[ci];
        assert!(
            (got - want).abs() < 1e-10,
            "channel {ci}: shift gradient {got} should be the upstream sum {want}"
        );
    }
}

#[test]
fn disabling_taylor_backprop_drops_only_the_weight_contribution() {
    let mut rng = Rng::new(78);
    let geom = ConvGeometry {
        in_channels: 2,
        out_channels: 2,
        kernel: (2, 2),
        stride: (1, 1),
        padding: (0, 0),
    };
    let cfg = BnConfig {
        window: 3,
        taylor_backprop: false,
        ..BnConfig::default()
    };
    let (base_state, theta) = build_windowed_state(&mut rng, &geom, cfg, 2, 0.02);
    let y_prev = rng.normal_tensor(&[2, 2, 4, 4], 0.0, 1.0);
    let x = conv2d_forward(&y_prev, &theta, geom.stride, geom.padding).unwrap();
    let w = rng.normal_tensor(x.shape(), 0.0, 1.0);

    let mut run_state = base_state.clone();
    let (_, cache) = cbn_train_forward(&x, &theta, &y_prev, &geom, &mut run_state).unwrap();
    let back = cbn_backward(&w, &cache, &run_state).unwrap();
    assert!(
        back.grad_theta_extra.is_none(),
        "with the flag off, no weight contribution may be produced"
    );

    // The forward map still depends on the weights through the compensation,
    // so the dropped term is a real truncation, not a vacuous one.
    let fd_theta = finite_diff(
        |tp| {
            let bound = BoundLayerInputs {
                theta_t: tp,
                y_prev: &y_prev,
                geom: &geom,
            };
            let y = train_forward_pure(NormalizerKind::Cbn, &x, Some(bound), &base_state)?;
            let mut acc = 0.0;
            for (a, b) in y.data().iter().zip(w.data()) {
                acc += a * b;
            }
            Ok(Tensor::scalar(acc))
        },
        &theta,
        1e-6,
    )
    .unwrap();
    assert!(
        fd_theta.frobenius_norm() > 1e-6,
        "the forward map must genuinely depend on the bound weights"
    );
}

#[test]
fn adversarial_records_cannot_break_the_variance_floor() {
    let mut rng = Rng::new(79);
    let geom = ConvGeometry {
        in_channels: 1,
        out_channels: 2,
        kernel: (1, 1),
        stride: (1, 1),
        padding: (0, 0),
    };
    let theta = Tensor::zeros(&geom.weight_shape());
    let mut state = state_with(
        2,
        BnConfig {
            window: 3,
            ..BnConfig::default()
        },
    );
    // Hand-build hostile records claiming a mean square far below the squared
    // mean, which no real batch can produce.
    let zero_grads = std::sync::Arc::new(TaylorGrads {
        g_mu: Tensor::zeros(&[1, 1, 1]),
        g_nu: Tensor::zeros(&[2, 1, 1, 1]),
        theta: theta.clone(),
    });
    for iter in 0..2 {
        state.records.push_front(IterationRecord {
            iteration: iter,
            mu: Tensor::from_vec(&[2], vec![5.0, -4.0]).unwrap(),
            nu: Tensor::from_vec(&[2], vec![0.1, 0.0]).unwrap(),
            grads: Some(zero_grads.clone()),
        });
    }
    state.t = 2;

    let before = state.clone();
    let y_prev = rng.normal_tensor(&[2, 1, 3, 3], 0.0, 1.0);
    let x = conv2d_forward(&y_prev, &theta, (1, 1), (0, 0)).unwrap();
    let (y, _) = cbn_train_forward(&x, &theta, &y_prev, &geom, &mut state).unwrap();
    assert!(
        y.data().iter().all(|v| v.is_finite()),
        "hostile records must not produce non-finite outputs"
    );
    let (_, used_var) = recover_used_stats(&before, &state);
    for (ci, v) in used_var.iter().enumerate() {
        assert!(
            *v >= 0.0,
            "channel {ci}: aggregated variance {v} must never go negative"
        );
    }
}

#[test]
fn eval_uses_running_statistics_and_stays_pure() {
    let mut rng = Rng::new(12);
    let x = rng.normal_tensor(&[3, 2, 2, 2], 0.0, 1.0);
    let mut state = state_with(2, BnConfig::default());
    // Fresh running statistics are mean 0, variance 1; mark the state as
    // trained so eval accepts it.
    state.t = 1;
    let y = eval_forward(&x, &state).unwrap();
    let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!(
            (a - b * scale).abs() < 1e-15,
            "eval output {a} should be the input {b} shrunk by 1/sqrt(1+eps)"
        );
    }

    state.running_mean = Tensor::from_vec(&[2], vec![0.7, -1.3]).unwrap();
    state.affine.beta = Tensor::from_vec(&[2], vec![0.25, -0.5]).unwrap();
    let mut matched = Tensor::zeros(&[2, 2, 1, 1]);
    for ni in 0..2 {
        for ci in 0..2 {
            *matched.at_mut(&[ni, ci, 0, 0]) = state.running_mean.data()[ci];
        }
    }
    let y = eval_forward(&matched, &state).unwrap();
    for ni in 0..2 {
        for ci in 0..2 {
            let got = y.at(&[ni, ci, 0, 0]);
            let want = state.affine.beta.data()[ci];
            assert_eq!(
                got, want,
                "input at the running mean must map exactly to the shift"
            );
        }
    }

    let snapshot = state.clone();
    let y1 = eval_forward(&x, &state).unwrap();
    let y2 = eval_forward(&x, &state).unwrap();
    assert_eq!(y1.data(), y2.data(), "eval must be deterministic");
    assert_eq!(state, snapshot, "eval must not mutate the state");
}

#[test]
fn eval_before_any_training_is_rejected() {
    let state = state_with(2, BnConfig::default());
    let x = Tensor::zeros(&[1, 2, 2, 2]);
    assert!(
        matches!(eval_forward(&x, &state), Err(CoreError::State(_))),
        "eval on a never-trained state must fail"
    );
}

#[test]
fn rank_two_inputs_normalize_per_feature() {
    let x = Tensor::from_vec(&[3, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
    let mut state = state_with(
        2,
        BnConfig {
            epsilon: 1e-12,
            ..BnConfig::default()
        },
    );
    let (y, _) = bn_train_forward(&x, &mut state).unwrap();
    assert_eq!(y.shape(), &[3, 2], "rank-2 input keeps its shape");
    let want = 1.224744871391589;
    for col in 0..2 {
        assert!((y.at(&[0, col]) + want).abs() < 1e-9);
        assert!(y.at(&[1, col]).abs() < 1e-12);
        assert!((y.at(&[2, col]) - want).abs() < 1e-9);
    }
}
