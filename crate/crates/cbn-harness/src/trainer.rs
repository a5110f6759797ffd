//! The training loop: deterministic data order, per-iteration metrics,
//! epoch-end evaluation, and checkpointing with bit-exact resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cbn_core::compensation::effective_window;
use cbn_core::network::{
    backward, forward_eval, forward_train, sgd_step, LayerParams, NetworkGraph, OptState,
};
use cbn_core::tensor::Rng;

use crate::checkpoint::{
    config_fingerprint, install, load_checkpoint, save_checkpoint, Checkpoint, RngState,
};
use crate::config::TrainConfig;
use crate::dataset::{augment_batch, load_dataset, Dataset};
use crate::error::{io_err, HarnessError, HarnessResult};
use crate::loss::softmax_xent;
use crate::metrics::{MetricsRow, MetricsWriter, Split};
use crate::model::preset_layers;
use crate::schedule::Schedule;

/// Substreams of the training seed. Weight initialization, example order, and
/// augmentation draw from independent streams so a change to one never shifts
/// the others.
const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_AUG: u64 = 3;

/// Number of examples per forward pass during evaluation.
const EVAL_BATCH: usize = 64;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const META_FILE: &str = "meta.toml";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop and checkpoint after this many optimizer steps (counted from the
    /// start of the run, not from a resume point).
    pub stop_after_iters: Option<u64>,
    /// Continue from `checkpoint.bin` in the output directory.
    pub resume: bool,
    /// Additionally keep a `checkpoint-epoch<N>.bin` per finished epoch.
    pub keep_epoch_checkpoints: bool,
    /// Echo per-epoch progress to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub method: String,
    pub seed: u64,
    /// Epochs fully finished when the run stopped.
    pub epochs_done: u64,
    pub global_step: u64,
    /// Top-1 accuracy of the last evaluation pass, in [0, 1]; absent when the
    /// run stopped before the first epoch boundary.
    pub final_eval_top1: Option<f64>,
    pub final_eval_loss: Option<f64>,
}

/// Sidecar describing a run directory; the comparison command reads this
/// instead of re-parsing the original config.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub method: String,
    pub seed: u64,
    pub epochs: u64,
    pub iters_per_epoch: u64,
    pub batch_size: u64,
}

impl RunMeta {
    pub fn load(path: &Path) -> HarnessResult<RunMeta> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        toml::from_str(&text).map_err(|e| HarnessError::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad run metadata: {e}"),
        })
    }

    fn save(&self, path: &Path) -> HarnessResult<()> {
        let text = toml::to_string(self)
            .map_err(|e| HarnessError::Argument(format!("cannot serialize run metadata: {e}")))?;
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

/// Output directory for a config: explicit `out_dir` if set, otherwise
/// `runs/<method>-seed<seed>`.
pub fn resolve_out_dir(cfg: &TrainConfig) -> HarnessResult<PathBuf> {
    match &cfg.out_dir {
        Some(dir) => Ok(dir.clone()),
        None => Ok(PathBuf::from("runs").join(format!("{}-seed{}", cfg.method_label()?, cfg.seed))),
    }
}

/// The window the next train-mode forward will use, read from the first
/// normalizer layer; 1 when the network has none.
fn next_effective_window(graph: &NetworkGraph) -> u64 {
    for p in &graph.params {
        if let LayerParams::Norm { state } = p {
            return effective_window(
                state.t,
                state.cfg.burn_in_iters,
                state.cfg.window,
                state.records.len(),
            ) as u64;
        }
    }
    1
}

/// Evaluates the network over `data` without mutating anything. Returns
/// (mean loss, top-1 accuracy).
pub fn evaluate(graph: &NetworkGraph, data: &Dataset) -> HarnessResult<(f64, f64)> {
    if data.is_empty() {
        return Err(HarnessError::Argument("evaluation split is empty".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk)?;
        let logits = forward_eval(graph, &x)?;
        let (loss, _grad, c) = softmax_xent(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        correct += c;
    }
    let n = data.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

struct LoopState {
    epoch: u64,
    epoch_pos: u64,
    global_step: u64,
    perm: Vec<usize>,
    data_rng: Rng,
    aug_rng: Rng,
}

/// Trains per the config, writing `metrics.csv`, `meta.toml`, and
/// `checkpoint.bin` into the output directory.
pub fn run_train(cfg: &TrainConfig, opts: &TrainOptions) -> HarnessResult<RunSummary> {
    cfg.validate()?;
    let out_dir = resolve_out_dir(cfg)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;

    let (train, eval) = load_dataset(&cfg.dataset)?;
    let bs = cfg.batch_size;
    let iters_per_epoch = (train.len() / bs) as u64;
    if iters_per_epoch == 0 {
        return Err(HarnessError::Argument(format!(
            "training split of {} examples cannot fill one batch of {bs}",
            train.len()
        )));
    }
    let epochs = cfg.epochs as u64;
    let total_steps = epochs * iters_per_epoch;
    let bn_cfg = cfg.bn_config(iters_per_epoch as usize)?;
    let layers = preset_layers(
        &cfg.model,
        train.image_shape(),
        train.classes,
        cfg.normalizer.kind.core_kind(),
        &bn_cfg,
    )?;
    let mut init_rng = Rng::with_stream(cfg.seed, STREAM_INIT);
    let mut graph = NetworkGraph::build(train.image_shape(), layers, &mut init_rng)?;
    let mut opt = OptState::new(&graph);
    let schedule = Schedule::from_spec(&cfg.schedule, iters_per_epoch as usize);
    let method = cfg.method_label()?;
    let fingerprint = config_fingerprint(cfg);

    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);

    let (mut state, mut writer) = if opts.resume {
        let ckpt = load_checkpoint(&ckpt_path)?;
        if ckpt.config_hash != fingerprint {
            return Err(HarnessError::Argument(
                "checkpoint was written by a run with a different configuration".into(),
            ));
        }
        install(&mut graph, &mut opt, &ckpt)?;
        let writer = MetricsWriter::reopen(&metrics_path, ckpt.metrics_rows)?;
        let state = LoopState {
            epoch: ckpt.epoch,
            epoch_pos: ckpt.epoch_pos,
            global_step: ckpt.global_step,
            perm: ckpt.perm,
            data_rng: ckpt.data_rng.restore(),
            aug_rng: ckpt.augment_rng.restore(),
        };
        (state, writer)
    } else {
        let state = LoopState {
            epoch: 0,
            epoch_pos: 0,
            global_step: 0,
            perm: Vec::new(),
            data_rng: Rng::with_stream(cfg.seed, STREAM_DATA),
            aug_rng: Rng::with_stream(cfg.seed, STREAM_AUG),
        };
        (state, MetricsWriter::create(&metrics_path)?)
    };

    RunMeta {
        method: method.clone(),
        seed: cfg.seed,
        epochs,
        iters_per_epoch,
        batch_size: bs as u64,
    }
    .save(&out_dir.join(META_FILE))?;

    let mut last_eval: Option<(f64, f64)> = None;
    let stop_now = |step: u64| opts.stop_after_iters.is_some_and(|n| step >= n);

    while state.epoch < epochs {
        if state.epoch_pos == 0 {
            state.perm = (0..train.len()).collect();
            state.data_rng.shuffle(&mut state.perm);
        } else if state.perm.len() != train.len() {
            return Err(HarnessError::Argument(format!(
                "checkpoint permutation covers {} examples, the dataset has {}",
                state.perm.len(),
                train.len()
            )));
        }

        while state.epoch_pos < iters_per_epoch {
            if stop_now(state.global_step) {
                save_run_checkpoint(&ckpt_path, &state, &graph, &opt, fingerprint, &writer)?;
                writer.flush()?;
                return Ok(summary(&out_dir, &method, cfg, &state, last_eval));
            }
            let start = state.epoch_pos as usize * bs;
            let indices = &state.perm[start..start + bs];
            let (mut x, labels) = train.batch(indices)?;
            augment_batch(&mut x, &cfg.augment, &mut state.aug_rng)?;
            let window = next_effective_window(&graph);
            let t0 = Instant::now();
            let (logits, trace) = forward_train(&mut graph, &x)?;
            let (loss, grad, correct) = softmax_xent(&logits, &labels)?;
            let grads = backward(&graph, &trace, &grad)?;
            let lr = schedule.lr_at(cfg.base_lr, cfg.batch_size, state.global_step, total_steps);
            sgd_step(&mut graph, &grads, &mut opt, lr, cfg.momentum, cfg.weight_decay)?;
            let wall = t0.elapsed().as_secs_f64();
            state.global_step += 1;
            state.epoch_pos += 1;
            writer.write_row(&MetricsRow {
                epoch: state.epoch + 1,
                iteration: state.global_step,
                split: Split::Train,
                loss,
                top1: correct as f64 / bs as f64,
                wall_time_s: wall,
                effective_window: window,
            })?;
        }

        let t0 = Instant::now();
        let (eval_loss, eval_top1) = evaluate(&graph, &eval)?;
        let eval_wall = t0.elapsed().as_secs_f64();
        last_eval = Some((eval_loss, eval_top1));
        writer.write_row(&MetricsRow {
            epoch: state.epoch + 1,
            iteration: state.global_step,
            split: Split::Eval,
            loss: eval_loss,
            top1: eval_top1,
            wall_time_s: eval_wall,
            effective_window: next_effective_window(&graph),
        })?;
        state.epoch += 1;
        state.epoch_pos = 0;
        if opts.verbose {
            eprintln!(
                "[{method} seed {}] epoch {}/{}: eval loss {eval_loss:.4}, top-1 {:.2}%",
                cfg.seed,
                state.epoch,
                cfg.epochs,
                eval_top1 * 100.0
            );
        }
        save_run_checkpoint(&ckpt_path, &state, &graph, &opt, fingerprint, &writer)?;
        if opts.keep_epoch_checkpoints {
            let epoch_path = out_dir.join(format!("checkpoint-epoch{}.bin", state.epoch));
            save_run_checkpoint(&epoch_path, &state, &graph, &opt, fingerprint, &writer)?;
        }
        if stop_now(state.global_step) {
            break;
        }
    }
    writer.flush()?;
    Ok(summary(&out_dir, &method, cfg, &state, last_eval))
}

fn save_run_checkpoint(
    path: &Path,
    state: &LoopState,
    graph: &NetworkGraph,
    opt: &OptState,
    fingerprint: u64,
    writer: &MetricsWriter,
) -> HarnessResult<()> {
    let ckpt = Checkpoint {
        config_hash: fingerprint,
        epoch: state.epoch,
        global_step: state.global_step,
        epoch_pos: state.epoch_pos,
        metrics_rows: writer.rows_written(),
        perm: state.perm.clone(),
        data_rng: RngState::capture(&state.data_rng),
        augment_rng: RngState::capture(&state.aug_rng),
        params: graph.params.clone(),
        velocities: opt.velocities.clone(),
    };
    save_checkpoint(path, &ckpt)
}

fn summary(
    out_dir: &Path,
    method: &str,
    cfg: &TrainConfig,
    state: &LoopState,
    last_eval: Option<(f64, f64)>,
) -> RunSummary {
    RunSummary {
        out_dir: out_dir.to_path_buf(),
        method: method.to_string(),
        seed: cfg.seed,
        epochs_done: state.epoch,
        global_step: state.global_step,
        final_eval_top1: last_eval.map(|(_, a)| a),
        final_eval_loss: last_eval.map(|(l, _)| l),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::digest;
    use crate::metrics::{read_metrics, strip_wall_time};

    const BASE: &str = r#"
        batch_size = 4
        epochs = 2
        base_lr = 0.05
        seed = 3

        [dataset]
        kind = "synthetic-gaussian"
        train_subset = 32
        eval_subset = 16

        [dataset.synthetic]
        classes = 2
        height = 6
        width = 6

        [normalizer]
        kind = "cbn"
        window = 2
        burn_in_epochs = 0.5
    "#;

    fn config_in(dir: &Path, extra: &str) -> TrainConfig {
        let text = format!("{BASE}\n{extra}");
        let mut cfg = TrainConfig::from_toml_str(&text).unwrap();
        cfg.model = "tiny".into();
        cfg.out_dir = Some(dir.to_path_buf());
        cfg
    }

    fn read_stripped(dir: &Path) -> String {
        let text = std::fs::read_to_string(dir.join(METRICS_FILE)).unwrap();
        strip_wall_time(&text)
    }

    #[test]
    fn a_short_run_writes_the_expected_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config_in(tmp.path(), "");
        let summary = run_train(&cfg, &TrainOptions::default()).unwrap();
        assert_eq!(summary.epochs_done, 2);
        assert_eq!(summary.global_step, 16, "32 examples / batch 4 = 8 iters per epoch");
        let rows = read_metrics(&tmp.path().join(METRICS_FILE)).unwrap();
        assert_eq!(rows.len(), 18, "16 train rows plus 2 eval rows");
        let evals: Vec<_> = rows.iter().filter(|r| r.split == Split::Eval).collect();
        assert_eq!(evals.len(), 2);
        assert_eq!(evals[0].epoch, 1);
        assert_eq!(evals[0].iteration, 8);
        assert_eq!(evals[1].iteration, 16);
        assert!(
            summary.final_eval_top1.unwrap() >= 0.0 && summary.final_eval_top1.unwrap() <= 1.0,
            "accuracy must be a fraction"
        );
        let meta = RunMeta::load(&tmp.path().join(META_FILE)).unwrap();
        assert_eq!(meta.iters_per_epoch, 8);
        assert_eq!(meta.method, "cbn-k2-bs4");
    }

    #[test]
    fn burn_in_shows_up_in_the_effective_window_column() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config_in(tmp.path(), "");
        run_train(&cfg, &TrainOptions::default()).unwrap();
        let rows = read_metrics(&tmp.path().join(METRICS_FILE)).unwrap();
        let train_windows: Vec<u64> = rows
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.effective_window)
            .collect();
        // Burn-in of half an epoch = 4 iterations, then the window grows to 2.
        assert_eq!(&train_windows[..6], &[1, 1, 1, 1, 1, 2], "window during and after burn-in");
        assert!(train_windows[6..].iter().all(|&w| w == 2));
    }

    #[test]
    fn identical_seeds_reproduce_the_metrics_byte_for_byte() {
        let tmp_a = tempfile::tempdir().unwrap();
        let tmp_b = tempfile::tempdir().unwrap();
        let cfg_a = config_in(tmp_a.path(), "[augment]\nhflip = true\nrandom_crop = true");
        let cfg_b = config_in(tmp_b.path(), "[augment]\nhflip = true\nrandom_crop = true");
        run_train(&cfg_a, &TrainOptions::default()).unwrap();
        run_train(&cfg_b, &TrainOptions::default()).unwrap();
        assert_eq!(
            read_stripped(tmp_a.path()),
            read_stripped(tmp_b.path()),
            "same config and seed must give identical metrics"
        );
    }

    #[test]
    fn different_seeds_differ() {
        let tmp_a = tempfile::tempdir().unwrap();
        let tmp_b = tempfile::tempdir().unwrap();
        let cfg_a = config_in(tmp_a.path(), "");
        let mut cfg_b = config_in(tmp_b.path(), "");
        cfg_b.seed = 4;
        run_train(&cfg_a, &TrainOptions::default()).unwrap();
        run_train(&cfg_b, &TrainOptions::default()).unwrap();
        assert_ne!(read_stripped(tmp_a.path()), read_stripped(tmp_b.path()));
    }

    #[test]
    fn resume_from_a_mid_epoch_stop_matches_the_uninterrupted_run() {
        let tmp_full = tempfile::tempdir().unwrap();
        let tmp_split = tempfile::tempdir().unwrap();
        let extra = "[augment]\nhflip = true";
        let cfg_full = config_in(tmp_full.path(), extra);
        let cfg_split = config_in(tmp_split.path(), extra);

        run_train(&cfg_full, &TrainOptions::default()).unwrap();

        // Stop mid-epoch (11 of 16 steps), then resume to completion.
        let stopped = run_train(
            &cfg_split,
            &TrainOptions {
                stop_after_iters: Some(11),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(stopped.global_step, 11);
        assert_eq!(stopped.epochs_done, 1);
        let resumed = run_train(
            &cfg_split,
            &TrainOptions {
                resume: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.global_step, 16);

        assert_eq!(
            read_stripped(tmp_full.path()),
            read_stripped(tmp_split.path()),
            "interrupted-and-resumed metrics must match the uninterrupted run"
        );
        let full_ckpt = std::fs::read(tmp_full.path().join(CHECKPOINT_FILE)).unwrap();
        let split_ckpt = std::fs::read(tmp_split.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(
            digest(&full_ckpt),
            digest(&split_ckpt),
            "final checkpoints must be byte-identical"
        );
    }

    #[test]
    fn resume_at_an_epoch_boundary_also_matches() {
        let tmp_full = tempfile::tempdir().unwrap();
        let tmp_split = tempfile::tempdir().unwrap();
        let cfg_full = config_in(tmp_full.path(), "");
        let cfg_split = config_in(tmp_split.path(), "");

        run_train(&cfg_full, &TrainOptions::default()).unwrap();
        run_train(
            &cfg_split,
            &TrainOptions {
                stop_after_iters: Some(8),
                ..Default::default()
            },
        )
        .unwrap();
        run_train(
            &cfg_split,
            &TrainOptions {
                resume: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(read_stripped(tmp_full.path()), read_stripped(tmp_split.path()));
    }

    #[test]
    fn resume_under_a_changed_config_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config_in(tmp.path(), "");
        run_train(
            &cfg,
            &TrainOptions {
                stop_after_iters: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        let mut changed = cfg.clone();
        changed.base_lr = 0.01;
        let err = run_train(
            &changed,
            &TrainOptions {
                resume: true,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(
            err.to_string().contains("different configuration"),
            "got: {err}"
        );
    }

    #[test]
    fn eval_leaves_the_network_untouched() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config_in(tmp.path(), "");
        run_train(&cfg, &TrainOptions::default()).unwrap();
        let ckpt_path = tmp.path().join(CHECKPOINT_FILE);
        let before = std::fs::read(&ckpt_path).unwrap();
        let ckpt = load_checkpoint(&ckpt_path).unwrap();

        let (train, eval) = load_dataset(&cfg.dataset).unwrap();
        let bn_cfg = cfg.bn_config(8).unwrap();
        let layers = preset_layers(
            &cfg.model,
            train.image_shape(),
            train.classes,
            cfg.normalizer.kind.core_kind(),
            &bn_cfg,
        )
        .unwrap();
        let mut rng = Rng::with_stream(cfg.seed, STREAM_INIT);
        let mut graph = NetworkGraph::build(train.image_shape(), layers, &mut rng).unwrap();
        let mut opt = OptState::new(&graph);
        install(&mut graph, &mut opt, &ckpt).unwrap();

        let (l1, a1) = evaluate(&graph, &eval).unwrap();
        let (l2, a2) = evaluate(&graph, &eval).unwrap();
        assert_eq!(l1, l2, "evaluation must be deterministic");
        assert_eq!(a1, a2);
        save_run_checkpoint(
            &ckpt_path,
            &LoopState {
                epoch: ckpt.epoch,
                epoch_pos: ckpt.epoch_pos,
                global_step: ckpt.global_step,
                perm: ckpt.perm.clone(),
                data_rng: ckpt.data_rng.restore(),
                aug_rng: ckpt.augment_rng.restore(),
            },
            &graph,
            &opt,
            ckpt.config_hash,
            &MetricsWriter::reopen(&tmp.path().join(METRICS_FILE), ckpt.metrics_rows).unwrap(),
        )
        .unwrap();
        let after = std::fs::read(&ckpt_path).unwrap();
        assert_eq!(
            digest(&before),
            digest(&after),
            "evaluating and re-saving must not change the checkpoint"
        );
    }

    #[test]
    fn plain_bn_and_unit_window_cbn_write_identical_metrics() {
        let tmp_bn = tempfile::tempdir().unwrap();
        let tmp_cbn = tempfile::tempdir().unwrap();
        let mut cfg_bn = config_in(tmp_bn.path(), "");
        cfg_bn.normalizer.kind = crate::config::NormKind::Bn;
        cfg_bn.normalizer.window = None;
        let mut cfg_cbn = config_in(tmp_cbn.path(), "");
        cfg_cbn.normalizer.window = Some(1);
        run_train(&cfg_bn, &TrainOptions::default()).unwrap();
        run_train(&cfg_cbn, &TrainOptions::default()).unwrap();
        assert_eq!(
            read_stripped(tmp_bn.path()),
            read_stripped(tmp_cbn.path()),
            "a window of one must reduce to plain batch normalization"
        );
    }

    #[test]
    fn zero_epochs_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = config_in(tmp.path(), "");
        cfg.epochs = 0;
        let err = run_train(&cfg, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, HarnessError::Argument(_)), "got: {err}");
    }
}
