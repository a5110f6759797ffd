//! Single-file binary checkpoints with a magic header and version.
//!
//! A checkpoint captures everything the training loop needs to continue
//! bit-exactly: loop position, the current epoch's example permutation, RNG
//! stream positions, every parameter tensor, full normalizer state including
//! the ring buffers of past statistics, and the optimizer's momentum buffers.
//! Floats are stored as raw IEEE-754 bits, so a round trip never perturbs a
//! value.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use cbn_core::compensation::{IterationRecord, TaylorGrads};
use cbn_core::network::{LayerParams, LayerVelocity, NetworkGraph, OptState};
use cbn_core::normalizers::{AffineParams, BnConfig, CbnState};
use cbn_core::tensor::{Rng, Tensor};

use crate::config::TrainConfig;
use crate::error::{io_err, HarnessError, HarnessResult};

const MAGIC: &[u8; 8] = b"CBNCKPT\x01";
const VERSION: u32 = 1;

/// Captured position of a deterministic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> RngState {
        RngState {
            seed: rng.seed(),
            stream: rng.stream(),
            word_pos: rng.word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        Rng::restore(self.seed, self.stream, self.word_pos)
    }
}

/// Full training state at a save point.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Fingerprint of the config this run was started with; resuming under a
    /// different config is refused.
    pub config_hash: u64,
    pub epoch: u64,
    /// Optimizer steps completed since the start of the run.
    pub global_step: u64,
    /// Batches consumed within the current epoch.
    pub epoch_pos: u64,
    /// Metrics rows written so far; resume truncates the CSV to this count.
    pub metrics_rows: u64,
    /// The current epoch's example order.
    pub perm: Vec<usize>,
    pub data_rng: RngState,
    pub augment_rng: RngState,
    pub params: Vec<LayerParams>,
    pub velocities: Vec<LayerVelocity>,
}

/// Stable fingerprint of the parts of the config that define the run.
/// The output directory is excluded: the same run may be resumed at a
/// different path.
pub fn config_fingerprint(cfg: &TrainConfig) -> u64 {
    let mut canonical = cfg.clone();
    canonical.out_dir = None;
    fnv1a(format!("{canonical:?}").as_bytes())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        let mut w = Writer { bytes: Vec::new() };
        w.bytes.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    fn tensor(&mut self, t: &Tensor) {
        let shape = t.shape();
        self.u64(shape.len() as u64);
        for &d in shape {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    fn rng(&mut self, s: &RngState) {
        self.u64(s.seed);
        self.u64(s.stream);
        self.u128(s.word_pos);
    }

    fn norm_state(&mut self, state: &CbnState) {
        self.f64(state.cfg.epsilon);
        self.f64(state.cfg.running_decay);
        self.u64(state.cfg.window as u64);
        self.u64(state.cfg.burn_in_iters);
        self.u8(state.cfg.taylor_backprop as u8);
        self.u64(state.channels as u64);
        self.u64(state.t);
        self.tensor(&state.affine.gamma);
        self.tensor(&state.affine.beta);
        self.tensor(&state.running_mean);
        self.tensor(&state.running_var);
        self.u64(state.records.len() as u64);
        for rec in &state.records {
            self.u64(rec.iteration);
            self.tensor(&rec.mu);
            self.tensor(&rec.nu);
            match &rec.grads {
                None => self.u8(0),
                Some(g) => {
                    self.u8(1);
                    self.tensor(&g.g_mu);
                    self.tensor(&g.g_nu);
                    self.tensor(&g.theta);
                }
            }
        }
    }

    fn params(&mut self, params: &[LayerParams]) {
        self.u64(params.len() as u64);
        for p in params {
            match p {
                LayerParams::None => self.u8(0),
                LayerParams::Conv { weight } => {
                    self.u8(1);
                    self.tensor(weight);
                }
                LayerParams::Fc { weight, bias } => {
                    self.u8(2);
                    self.tensor(weight);
                    self.tensor(bias);
                }
                LayerParams::Norm { state } => {
                    self.u8(3);
                    self.norm_state(state);
                }
            }
        }
    }

    fn velocities(&mut self, vels: &[LayerVelocity]) {
        self.u64(vels.len() as u64);
        for v in vels {
            match v {
                LayerVelocity::None => self.u8(0),
                LayerVelocity::Conv { weight } => {
                    self.u8(1);
                    self.tensor(weight);
                }
                LayerVelocity::Fc { weight, bias } => {
                    self.u8(2);
                    self.tensor(weight);
                    self.tensor(bias);
                }
                LayerVelocity::Norm { gamma, beta } => {
                    self.u8(3);
                    self.tensor(gamma);
                    self.tensor(beta);
                }
            }
        }
    }
}

/// Serializes a checkpoint to bytes. Exposed so tests can hash state without
/// touching the filesystem.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(ckpt.config_hash);
    w.u64(ckpt.epoch);
    w.u64(ckpt.global_step);
    w.u64(ckpt.epoch_pos);
    w.u64(ckpt.metrics_rows);
    w.u64(ckpt.perm.len() as u64);
    for &i in &ckpt.perm {
        w.u64(i as u64);
    }
    w.rng(&ckpt.data_rng);
    w.rng(&ckpt.augment_rng);
    w.params(&ckpt.params);
    w.velocities(&ckpt.velocities);
    w.bytes
}

/// Writes atomically: a temporary file in the same directory is renamed over
/// the target, so a crash never leaves a half-written checkpoint behind.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> HarnessResult<()> {
    let bytes = encode_checkpoint(ckpt);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> HarnessError {
        HarnessError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> HarnessResult<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "checkpoint truncated: need {n} more bytes, have {}",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> HarnessResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> HarnessResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> HarnessResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> HarnessResult<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> HarnessResult<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn usize_checked(&mut self, what: &str, limit: u64) -> HarnessResult<usize> {
        let v = self.u64()?;
        if v > limit {
            return Err(self.err(format!("{what} {v} exceeds the sanity limit {limit}")));
        }
        Ok(v as usize)
    }

    fn tensor(&mut self) -> HarnessResult<Tensor> {
        let rank = self.usize_checked("tensor rank", 8)?;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = self.usize_checked("tensor extent", 1 << 32)?;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        if numel.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(self.err(format!("tensor of {numel} values exceeds the file")));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Tensor::from_vec(&shape, data).map_err(|e| self.err(format!("bad tensor: {e}")))
    }

    fn rng(&mut self) -> HarnessResult<RngState> {
        Ok(RngState {
            seed: self.u64()?,
            stream: self.u64()?,
            word_pos: self.u128()?,
        })
    }

    fn norm_state(&mut self) -> HarnessResult<CbnState> {
        let epsilon = self.f64()?;
        let running_decay = self.f64()?;
        let window = self.usize_checked("window", 1 << 20)?;
        let burn_in_iters = self.u64()?;
        let taylor_backprop = self.u8()? != 0;
        let channels = self.usize_checked("channels", 1 << 32)?;
        let t = self.u64()?;
        let gamma = self.tensor()?;
        let beta = self.tensor()?;
        let running_mean = self.tensor()?;
        let running_var = self.tensor()?;
        let n_records = self.usize_checked("record count", 1 << 20)?;
        let mut records = VecDeque::with_capacity(n_records);
        for _ in 0..n_records {
            let iteration = self.u64()?;
            let mu = self.tensor()?;
            let nu = self.tensor()?;
            let grads = match self.u8()? {
                0 => None,
                1 => Some(Arc::new(TaylorGrads {
                    g_mu: self.tensor()?,
                    g_nu: self.tensor()?,
                    theta: self.tensor()?,
                })),
                other => return Err(self.err(format!("bad gradient flag {other}"))),
            };
            records.push_back(IterationRecord {
                iteration,
                mu,
                nu,
                grads,
            });
        }
        Ok(CbnState {
            cfg: BnConfig {
                epsilon,
                running_decay,
                window,
                burn_in_iters,
                taylor_backprop,
            },
            affine: AffineParams { gamma, beta },
            running_mean,
            running_var,
            t,
            records,
            channels,
        })
    }

    fn params(&mut self) -> HarnessResult<Vec<LayerParams>> {
        let n = self.usize_checked("layer count", 1 << 16)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(match self.u8()? {
                0 => LayerParams::None,
                1 => LayerParams::Conv {
                    weight: self.tensor()?,
                },
                2 => LayerParams::Fc {
                    weight: self.tensor()?,
                    bias: self.tensor()?,
                },
                3 => LayerParams::Norm {
                    state: self.norm_state()?,
                },
                other => return Err(self.err(format!("bad parameter tag {other}"))),
            });
        }
        Ok(out)
    }

    fn velocities(&mut self) -> HarnessResult<Vec<LayerVelocity>> {
        let n = self.usize_checked("velocity count", 1 << 16)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(match self.u8()? {
                0 => LayerVelocity::None,
                1 => LayerVelocity::Conv {
                    weight: self.tensor()?,
                },
                2 => LayerVelocity::Fc {
                    weight: self.tensor()?,
                    bias: self.tensor()?,
                },
                3 => LayerVelocity::Norm {
                    gamma: self.tensor()?,
                    beta: self.tensor()?,
                },
                other => return Err(self.err(format!("bad velocity tag {other}"))),
            });
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> HarnessResult<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(HarnessError::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad checkpoint magic {magic:02x?}"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(HarnessError::Format {
            path: path.to_path_buf(),
            offset: 8,
            message: format!("unsupported checkpoint version {version}, expected {VERSION}"),
        });
    }
    let config_hash = r.u64()?;
    let epoch = r.u64()?;
    let global_step = r.u64()?;
    let epoch_pos = r.u64()?;
    let metrics_rows = r.u64()?;
    let n_perm = r.usize_checked("permutation length", 1 << 32)?;
    let mut perm = Vec::with_capacity(n_perm);
    for _ in 0..n_perm {
        perm.push(r.usize_checked("permutation entry", 1 << 32)?);
    }
    let data_rng = r.rng()?;
    let augment_rng = r.rng()?;
    let params = r.params()?;
    let velocities = r.velocities()?;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        config_hash,
        epoch,
        global_step,
        epoch_pos,
        metrics_rows,
        perm,
        data_rng,
        augment_rng,
        params,
        velocities,
    })
}

pub fn load_checkpoint(path: &Path) -> HarnessResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_checkpoint(&bytes, path)
}

fn shapes_match(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
}

/// Installs saved parameters and momentum buffers into a freshly built graph,
/// checking that every layer's kind and shapes line up.
pub fn install(
    graph: &mut NetworkGraph,
    opt: &mut OptState,
    ckpt: &Checkpoint,
) -> HarnessResult<()> {
    if ckpt.params.len() != graph.params.len() || ckpt.velocities.len() != opt.velocities.len() {
        return Err(HarnessError::Argument(format!(
            "checkpoint has {} parameter slots and {} velocity slots, the network {} and {}",
            ckpt.params.len(),
            ckpt.velocities.len(),
            graph.params.len(),
            opt.velocities.len()
        )));
    }
    for (i, (cur, saved)) in graph.params.iter().zip(&ckpt.params).enumerate() {
        let ok = match (cur, saved) {
            (LayerParams::None, LayerParams::None) => true,
            (LayerParams::Conv { weight: a }, LayerParams::Conv { weight: b }) => {
                shapes_match(a, b)
            }
            (
                LayerParams::Fc {
                    weight: a,
                    bias: ab,
                },
                LayerParams::Fc {
                    weight: b,
                    bias: bb,
                },
            ) => shapes_match(a, b) && shapes_match(ab, bb),
            (LayerParams::Norm { state: a }, LayerParams::Norm { state: b }) => {
                a.channels == b.channels
            }
            _ => false,
        };
        if !ok {
            return Err(HarnessError::Argument(format!(
                "checkpoint layer {i} does not match the network architecture"
            )));
        }
    }
    graph.params = ckpt.params.clone();
    opt.velocities = ckpt.velocities.clone();
    Ok(())
}

/// Content digest of a checkpoint's bytes, used to verify that an operation
/// left the state untouched.
pub fn digest(bytes: &[u8]) -> u64 {
    fnv1a(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbn_core::network::{backward, forward_train, sgd_step, LayerSpec};
    use cbn_core::normalizers::NormalizerKind;

    fn trained_fixture() -> (NetworkGraph, OptState) {
        let mut rng = Rng::new(11);
        let layers = vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: (3, 3),
                stride: (1, 1),
                padding: (1, 1),
            },
            LayerSpec::Normalizer {
                kind: NormalizerKind::Cbn,
                cfg: BnConfig {
                    window: 3,
                    ..BnConfig::default()
                },
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::FullyConnected {
                in_features: 32,
                out_features: 2,
            },
        ];
        let mut graph = NetworkGraph::build((1, 4, 4), layers, &mut rng).unwrap();
        let mut opt = OptState::new(&graph);
        for _ in 0..3 {
            let x = rng.normal_tensor(&[2, 1, 4, 4], 0.0, 1.0);
            let (y, trace) = forward_train(&mut graph, &x).unwrap();
            let g = rng.normal_tensor(y.shape(), 0.0, 1.0);
            let grads = backward(&graph, &trace, &g).unwrap();
            sgd_step(&mut graph, &grads, &mut opt, 0.05, 0.9, 1e-4).unwrap();
        }
        (graph, opt)
    }

    fn fixture_checkpoint() -> (Checkpoint, NetworkGraph, OptState) {
        let (graph, opt) = trained_fixture();
        let mut data_rng = Rng::with_stream(5, 2);
        for _ in 0..17 {
            data_rng.next_u64();
        }
        let ckpt = Checkpoint {
            config_hash: 0xfeed,
            epoch: 2,
            global_step: 3,
            epoch_pos: 1,
            metrics_rows: 4,
            perm: vec![3, 0, 2, 1],
            data_rng: RngState::capture(&data_rng),
            augment_rng: RngState::capture(&Rng::with_stream(5, 3)),
            params: graph.params.clone(),
            velocities: opt.velocities.clone(),
        };
        (ckpt, graph, opt)
    }

    #[test]
    fn round_trip_preserves_everything_bit_for_bit() {
        let (ckpt, _, _) = fixture_checkpoint();
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes, Path::new("c.bin")).unwrap();
        assert_eq!(back, ckpt, "decode must invert encode exactly");
        assert_eq!(
            encode_checkpoint(&back),
            bytes,
            "re-encoding must reproduce identical bytes"
        );
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        let (ckpt, _, _) = fixture_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn restored_rng_continues_the_stream() {
        let mut rng = Rng::with_stream(9, 1);
        for _ in 0..23 {
            rng.next_u64();
        }
        let state = RngState::capture(&rng);
        let expect: Vec<u64> = (0..8).map(|_| rng.next_u64()).collect();
        let mut restored = state.restore();
        let got: Vec<u64> = (0..8).map(|_| restored.next_u64()).collect();
        assert_eq!(got, expect, "restored generator must continue identically");
    }

    #[test]
    fn corrupted_magic_version_and_truncation_are_rejected() {
        let (ckpt, _, _) = fixture_checkpoint();
        let bytes = encode_checkpoint(&ckpt);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, Path::new("c")),
            Err(HarnessError::Format { offset: 0, .. })
        ));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            decode_checkpoint(&bad, Path::new("c")),
            Err(HarnessError::Format { offset: 8, .. })
        ));

        let err = decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("c")).unwrap_err();
        assert!(matches!(err, HarnessError::Format { .. }));

        let mut extended = bytes.clone();
        extended.push(0);
        assert!(
            decode_checkpoint(&extended, Path::new("c")).is_err(),
            "trailing bytes must be rejected"
        );
    }

    #[test]
    fn install_restores_a_fresh_graph_to_the_saved_state() {
        let (ckpt, graph, opt) = fixture_checkpoint();
        // Build the same architecture with a different seed: weights differ.
        let mut rng = Rng::new(99);
        let layers = graph.layers.clone();
        let mut fresh = NetworkGraph::build(graph.input_shape, layers, &mut rng).unwrap();
        let mut fresh_opt = OptState::new(&fresh);
        assert_ne!(fresh.params, graph.params, "different seed, different weights");
        install(&mut fresh, &mut fresh_opt, &ckpt).unwrap();
        assert_eq!(fresh, graph, "install must reproduce the saved parameters");
        assert_eq!(fresh_opt, opt, "install must reproduce the momentum buffers");
    }

    #[test]
    fn install_refuses_mismatched_architectures() {
        let (ckpt, _, _) = fixture_checkpoint();
        let mut rng = Rng::new(1);
        let layers = vec![LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 2,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
        }];
        let mut graph = NetworkGraph::build((1, 4, 4), layers, &mut rng).unwrap();
        let mut opt = OptState::new(&graph);
        assert!(install(&mut graph, &mut opt, &ckpt).is_err());
    }
}
