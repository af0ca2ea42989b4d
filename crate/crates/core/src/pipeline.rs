//! Pipelined layer-wise training with stale-snapshot forward propagation.
//!
//! Layer L trains on its input stream; once it has finished a warmup block
//! count and its per-block objective has stabilized, layer L+1 starts
//! training. Layer L+1's input stream replays the data from block 0,
//! forward-propagated through an immutable snapshot of layer L that is
//! republished every `sync_period_blocks` trainer blocks. Two logical
//! instances of layer L therefore exist at once: the trainer, which keeps
//! updating parameters, and the forwarder, which only reads its snapshot.
//!
//! The scheduler here is the deterministic sequential reference: each tick
//! lets every active unfinished layer train exactly one block, in layer
//! order, with snapshot swaps only at block boundaries. A concurrent
//! execution communicating through the same immutable snapshots and a
//! bounded forwarded-block queue must be observationally equivalent; tests
//! run this scheduler. Given the seed and configuration the run is bitwise
//! deterministic, and with `warmup_blocks >= total blocks` it degenerates
//! to plain sequential layer-wise training, bit for bit.

use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::RunConfig;
use crate::datapipe::BlockSource;
use crate::error::{Error, Result};
use crate::network::{layer_forward, train_layer_step, Layer, Network, NetworkOptimizer};
use crate::tensor::Tensor;

/// Immutable deep copy of one layer's parameters, tagged with a version and
/// the trainer progress at capture time.
#[derive(Debug, Clone)]
pub struct LayerSnapshot {
    pub layer: Layer,
    /// Strictly increasing per layer.
    pub version: u64,
    /// Blocks the trainer had completed when this snapshot was taken.
    pub source_block_index: usize,
}

/// Take a snapshot of layer `l`: a deep, immutable copy of its parameters.
pub fn sync_snapshot(
    net: &Network,
    l: usize,
    version: u64,
    source_block_index: usize,
) -> LayerSnapshot {
    LayerSnapshot {
        layer: net.layers[l].clone(),
        version,
        source_block_index,
    }
}

/// Pipeline control knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub warmup_blocks: usize,
    pub sync_period_blocks: usize,
    pub stabilization_window: usize,
    pub stabilization_rel_tol: f64,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        if cfg.warmup_blocks < 1 {
            return Err(Error::Config("warmup_blocks must be at least 1".into()));
        }
        if cfg.sync_period_blocks < 1 {
            return Err(Error::Config(
                "sync_period_blocks must be at least 1".into(),
            ));
        }
        if cfg.stabilization_window < 2 {
            return Err(Error::Config(
                "stabilization_window must be at least 2".into(),
            ));
        }
        if cfg.stabilization_rel_tol.is_nan() || cfg.stabilization_rel_tol <= 0.0 {
            return Err(Error::Config(
                "stabilization_rel_tol must be positive".into(),
            ));
        }
        if cfg.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(Self {
            warmup_blocks: cfg.warmup_blocks,
            sync_period_blocks: cfg.sync_period_blocks,
            stabilization_window: cfg.stabilization_window,
            stabilization_rel_tol: cfg.stabilization_rel_tol,
            seed: cfg.seed,
        })
    }
}

/// Two-window relative-mean stabilization test: true once the sequence is
/// at least `2 * window` long and the means of the last two windows differ
/// by less than `rel_tol` relatively.
pub fn stabilized(history: &[f64], window: usize, rel_tol: f64) -> bool {
    if window == 0 || history.len() < 2 * window {
        return false;
    }
    let last = &history[history.len() - window..];
    let prev = &history[history.len() - 2 * window..history.len() - window];
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (m_last, m_prev) = (mean(last), mean(prev));
    (m_last - m_prev).abs() / m_prev.abs().max(1e-12) < rel_tol
}

/// One per-block training record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub layer: usize,
    /// Running block counter within the layer's stream (across epochs).
    pub block: usize,
    /// Summed objective over the block's mini-batches (and fields).
    pub objective: f64,
    /// Version of the upstream snapshot the forwarded input came through;
    /// 0 for the first layer, which reads raw data.
    pub snapshot_version: u64,
    /// Upstream trainer blocks completed beyond that snapshot.
    pub staleness: u64,
    /// Wall-clock stamp; informational only, not serialized.
    pub timestamp_ms: u128,
}

/// Per-run training log. Serialized as tab-separated lines of
/// `layer block objective snapshot_version staleness`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    fn push(&mut self, rec: TrainRecord) {
        self.records.push(rec);
    }

    pub fn records_for_layer(&self, layer: usize) -> impl Iterator<Item = &TrainRecord> {
        self.records.iter().filter(move |r| r.layer == layer)
    }

    /// Per-block objective history of one layer, in block order.
    pub fn objective_history(&self, layer: usize) -> Vec<f64> {
        self.records_for_layer(layer).map(|r| r.objective).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::from("layer\tblock\tobjective\tsnapshot_version\tstaleness\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.layer, r.block, r.objective, r.snapshot_version, r.staleness
            ));
        }
        out
    }
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Forward a raw minibatch through the published snapshots of layers
/// `0..upto`, producing the input for layer `upto`.
fn forward_through_snapshots(
    snapshots: &[Option<LayerSnapshot>],
    upto: usize,
    raw: &Tensor,
) -> Result<Tensor> {
    let mut cur = raw.clone();
    for (l, snap) in snapshots.iter().take(upto).enumerate() {
        let snap = snap.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "layer {l} has no published snapshot but a downstream layer is active"
            ))
        })?;
        cur = layer_forward(&snap.layer, &cur)?;
    }
    Ok(cur)
}

fn attach_context(e: Error, layer: usize, block: usize) -> Error {
    Error::Config(format!("layer {layer}, block {block}: {e}"))
}

/// Run the pipelined layer-wise trainer over the packed data source.
///
/// Every layer makes `epochs` passes over the blocks, replaying from block
/// 0. Layer l+1 activates once layer l has completed `warmup_blocks` blocks
/// and [`stabilized`] holds for its objective history, or unconditionally
/// when layer l finishes its stream. The returned network holds each
/// layer's final trainer state.
pub fn run_pipeline(cfg: &RunConfig, data: &BlockSource) -> Result<(Network, TrainLog)> {
    let pcfg = PipelineConfig::from_run(cfg)?;
    if data.num_blocks() == 0 {
        return Err(Error::Underrun(format!(
            "data source holds no complete block; warmup of {} blocks cannot start",
            pcfg.warmup_blocks
        )));
    }
    let mut net = Network::init(cfg)?;
    let mut opt = NetworkOptimizer::init(&net, cfg)?;
    let num_layers = net.num_layers();
    let total_blocks = data.num_blocks() * cfg.epochs;

    let mut active = vec![false; num_layers];
    active[0] = true;
    let mut finished = vec![false; num_layers];
    let mut completed = vec![0usize; num_layers];
    let mut history: Vec<Vec<f64>> = vec![Vec::new(); num_layers];
    let mut snapshots: Vec<Option<LayerSnapshot>> = (0..num_layers).map(|_| None).collect();
    let mut log = TrainLog::default();

    while !finished.iter().all(|&f| f) {
        let mut progressed = false;
        for l in 0..num_layers {
            if !active[l] || finished[l] {
                continue;
            }
            let block = completed[l];
            let data_block = block % data.num_blocks();
            let (snapshot_version, staleness) = if l == 0 {
                (0, 0)
            } else {
                let s = snapshots[l - 1]
                    .as_ref()
                    .expect("active layers have upstream snapshots");
                (s.version, (completed[l - 1] - s.source_block_index) as u64)
            };

            let mut block_objective = 0.0;
            for mb in 0..data.minibatches_per_block() {
                let raw = data.minibatch(data_block, mb)?;
                let input = forward_through_snapshots(&snapshots, l, &raw)
                    .map_err(|e| attach_context(e, l, block))?;
                block_objective += train_layer_step(&mut net, &mut opt, l, &input)
                    .map_err(|e| attach_context(e, l, block))?;
            }
            completed[l] += 1;
            history[l].push(block_objective);
            log.push(TrainRecord {
                layer: l,
                block,
                objective: block_objective,
                snapshot_version,
                staleness,
                timestamp_ms: now_ms(),
            });
            progressed = true;

            let now_finished = completed[l] == total_blocks;
            if l + 1 < num_layers {
                // Republish at sync boundaries and on finish; swaps happen
                // only here, between blocks, never mid-batch.
                let due = completed[l] % pcfg.sync_period_blocks == 0;
                if due || now_finished {
                    publish(&net, l, &mut snapshots, completed[l]);
                }
            }
            if now_finished {
                finished[l] = true;
            }
            if l + 1 < num_layers && !active[l + 1] {
                let ready = (completed[l] >= pcfg.warmup_blocks
                    && stabilized(
                        &history[l],
                        pcfg.stabilization_window,
                        pcfg.stabilization_rel_tol,
                    ))
                    || finished[l];
                if ready {
                    // Give the new forwarder current parameters.
                    let fresh = snapshots[l]
                        .as_ref()
                        .is_none_or(|s| s.source_block_index < completed[l]);
                    if fresh {
                        publish(&net, l, &mut snapshots, completed[l]);
                    }
                    active[l + 1] = true;
                }
            }
        }
        if !progressed {
            return Err(Error::Underrun(
                "pipeline made no progress; no active layer could train".into(),
            ));
        }
    }
    Ok((net, log))
}

fn publish(net: &Network, l: usize, snapshots: &mut [Option<LayerSnapshot>], source: usize) {
    let version = snapshots[l].as_ref().map_or(0, |s| s.version) + 1;
    snapshots[l] = Some(sync_snapshot(net, l, version, source));
}

/// Strict sequential layer-wise training: each layer trains to completion
/// before the next one starts, inputs forwarded through the finished live
/// layers. The independent reference the degenerate pipeline is compared
/// against.
pub fn train_sequential(cfg: &RunConfig, data: &BlockSource) -> Result<(Network, TrainLog)> {
    if data.num_blocks() == 0 {
        return Err(Error::Underrun(
            "data source holds no complete block".into(),
        ));
    }
    if cfg.epochs < 1 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let mut net = Network::init(cfg)?;
    let mut opt = NetworkOptimizer::init(&net, cfg)?;
    let total_blocks = data.num_blocks() * cfg.epochs;
    let mut log = TrainLog::default();
    for l in 0..net.num_layers() {
        for block in 0..total_blocks {
            let data_block = block % data.num_blocks();
            let mut block_objective = 0.0;
            for mb in 0..data.minibatches_per_block() {
                let raw = data.minibatch(data_block, mb)?;
                let input = net
                    .forward_to(&raw, l)
                    .map_err(|e| attach_context(e, l, block))?;
                block_objective += train_layer_step(&mut net, &mut opt, l, &input)
                    .map_err(|e| attach_context(e, l, block))?;
            }
            log.push(TrainRecord {
                layer: l,
                block,
                objective: block_objective,
                snapshot_version: 0,
                staleness: 0,
                timestamp_ms: now_ms(),
            });
        }
    }
    Ok((net, log))
}
