//! Cross-layer sensitivity report: how much a normalizer's statistics respond
//! to weights below the bound layer, relative to the bound layer itself.
//! Small ratios are what justify compensating through one layer only.

use std::path::Path;

use cbn_core::network::{LayerSpec, NetworkGraph, OptState};
use cbn_core::oracles::{grad_ratio_diagnostic, GradRatioRow};
use cbn_core::tensor::{Rng, Tensor};
use cbn_core::CoreError;

use crate::checkpoint::{install, load_checkpoint};
use crate::config::TrainConfig;
use crate::dataset::load_dataset;
use crate::error::{io_err, HarnessResult};
use crate::metrics::format_f64;
use crate::model::preset_layers;
use crate::trainer::{resolve_out_dir, CHECKPOINT_FILE};

pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
const DIAG_HEADER: &str = "epoch,iteration,diag_norm_layer,diag_bound_layer,diag_source_layer,\
diag_offset,diag_cross_mu,diag_within_mu,diag_ratio_mu,diag_cross_nu,diag_within_nu,diag_ratio_nu";

/// Examples probed; kept small because each weight entry costs two forwards.
const PROBE_EXAMPLES: usize = 8;
/// Central-difference step for the cross-layer probes.
const PROBE_STEP: f64 = 1e-4;

/// Measurements for every normalizer deep enough to have a layer below its
/// bound layer. Shallower normalizers are listed in `skipped`.
#[derive(Debug, Clone)]
pub struct DiagnoseReport {
    /// Epoch and step of the checkpoint the network was restored from;
    /// zero for a freshly initialized network.
    pub epoch: u64,
    pub iteration: u64,
    pub rows: Vec<GradRatioRow>,
    pub skipped: Vec<usize>,
    /// Unweighted mean of the per-entry ratios.
    pub mean_ratio_mu: f64,
    pub mean_ratio_nu: f64,
}

/// Runs the sensitivity probe on every eligible normalizer of `graph`.
pub fn collect_ratios(
    graph: &NetworkGraph,
    batch: &Tensor,
    h: f64,
) -> HarnessResult<(Vec<GradRatioRow>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (idx, layer) in graph.layers.iter().enumerate() {
        if !matches!(layer, LayerSpec::Normalizer { .. }) {
            continue;
        }
        match grad_ratio_diagnostic(graph, batch, idx, h) {
            Ok(row) => rows.push(row),
            Err(CoreError::Argument(_)) => skipped.push(idx),
            Err(e) => return Err(e.into()),
        }
    }
    Ok((rows, skipped))
}

fn summarize(rows: &[GradRatioRow], skipped: Vec<usize>, epoch: u64, iteration: u64) -> DiagnoseReport {
    let mut mu_sum = 0.0;
    let mut nu_sum = 0.0;
    let mut n = 0.0;
    for row in rows {
        for e in &row.entries {
            mu_sum += e.ratio_mu;
            nu_sum += e.ratio_nu;
            n += 1.0;
        }
    }
    DiagnoseReport {
        epoch,
        iteration,
        rows: rows.to_vec(),
        skipped,
        mean_ratio_mu: if n > 0.0 { mu_sum / n } else { f64::NAN },
        mean_ratio_nu: if n > 0.0 { nu_sum / n } else { f64::NAN },
    }
}

/// Builds the configured network, restores the checkpoint when one is given
/// or found in the output directory, probes it, and writes
/// `diagnostics.csv` next to the run's metrics.
pub fn run_diagnose(cfg: &TrainConfig, checkpoint: Option<&Path>) -> HarnessResult<DiagnoseReport> {
    cfg.validate()?;
    let out_dir = resolve_out_dir(cfg)?;
    let (train, _eval) = load_dataset(&cfg.dataset)?;
    let iters_per_epoch = (train.len() / cfg.batch_size).max(1);
    let bn_cfg = cfg.bn_config(iters_per_epoch)?;
    let layers = preset_layers(
        &cfg.model,
        train.image_shape(),
        train.classes,
        cfg.normalizer.kind.core_kind(),
        &bn_cfg,
    )?;
    let mut rng = Rng::with_stream(cfg.seed, 1);
    let mut graph = NetworkGraph::build(train.image_shape(), layers, &mut rng)?;
    let mut opt = OptState::new(&graph);

    let default_ckpt = out_dir.join(CHECKPOINT_FILE);
    let ckpt_path = match checkpoint {
        Some(p) => Some(p.to_path_buf()),
        None if default_ckpt.exists() => Some(default_ckpt),
        None => None,
    };
    let (epoch, iteration) = match &ckpt_path {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            install(&mut graph, &mut opt, &ckpt)?;
            (ckpt.epoch, ckpt.global_step)
        }
        None => (0, 0),
    };

    let probe: Vec<usize> = (0..train.len().min(PROBE_EXAMPLES)).collect();
    let (batch, _labels) = train.batch(&probe)?;
    let (rows, skipped) = collect_ratios(&graph, &batch, PROBE_STEP)?;
    let report = summarize(&rows, skipped, epoch, iteration);

    std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let csv_path = out_dir.join(DIAGNOSTICS_FILE);
    std::fs::write(&csv_path, render_csv(&report)).map_err(|e| io_err(&csv_path, e))?;
    Ok(report)
}

pub fn render_csv(report: &DiagnoseReport) -> String {
    let mut out = String::from(DIAG_HEADER);
    out.push('\n');
    for row in &report.rows {
        for e in &row.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                report.epoch,
                report.iteration,
                row.norm_layer,
                row.bound_layer,
                e.source_layer,
                e.offset,
                format_f64(e.cross_mu),
                format_f64(e.within_mu),
                format_f64(e.ratio_mu),
                format_f64(e.cross_nu),
                format_f64(e.within_nu),
                format_f64(e.ratio_nu),
            ));
        }
    }
    out
}

pub fn render_text(report: &DiagnoseReport) -> String {
    let mut out = format!(
        "cross-layer sensitivity at epoch {}, iteration {}\n",
        report.epoch, report.iteration
    );
    for row in &report.rows {
        for e in &row.entries {
            out.push_str(&format!(
                "  normalizer layer {:2} <- weights of layer {:2} (depth -{}): \
                 mean ratio {:.4}, second-moment ratio {:.4}\n",
                row.norm_layer, e.source_layer, e.offset, e.ratio_mu, e.ratio_nu
            ));
        }
    }
    for idx in &report.skipped {
        out.push_str(&format!(
            "  normalizer layer {idx:2}: skipped, no parameterized layer below its bound layer\n"
        ));
    }
    if report.rows.is_empty() {
        out.push_str("  no normalizer was deep enough to probe\n");
    } else {
        out.push_str(&format!(
            "  unweighted means: {:.4} (mean stat), {:.4} (second moment); \
             large-scale reference values are 0.12 and 0.39\n",
            report.mean_ratio_mu, report.mean_ratio_nu
        ));
    }
    out
}
