//! In-process simulation of the model-parallel distributed array: fields
//! partitioned over logical workers, message-passing-only communication,
//! exact byte accounting.
//!
//! The ownership model: every receptive field (and with it, its output
//! block) belongs to exactly one worker, dense-layer rows are split into
//! balanced contiguous ranges, and weights never move. Raw input images are
//! free to every worker (each node streams them from storage); cost arises
//! only when a downstream field consumes an upstream output block owned by
//! another worker. One such consumption moves
//! `block_elements * elem_bytes * minibatch` bytes, counted per
//! (field, block) pair with no deduplication.
//!
//! The simulator executes workers as logical units in a fixed order; it
//! accounts volume, not time. Everything is deterministic: identical
//! (plan, input) gives identical logs byte for byte, and activations match
//! the single-worker forward pass.

use crate::error::{Error, Result};
use crate::layers::{lcn_apply, FieldGeometry, UntiedLayer};
use crate::network::{Layer, Network};
use crate::tensor::Tensor;

/// How the fields were tiled over workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TilingScheme {
    /// A tile grid of `tile_rows x tile_cols` rectangular bands.
    Rectangular { tile_rows: usize, tile_cols: usize },
    /// Balanced contiguous chunks of the row-major field order.
    Segments,
}

/// Assignment of every field-grid cell to one worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub worker_count: usize,
    pub grid: (usize, usize),
    pub scheme: TilingScheme,
    /// Row-major field index -> worker id.
    assignment: Vec<usize>,
}

impl PartitionPlan {
    pub fn owner(&self, r: usize, c: usize) -> usize {
        self.assignment[r * self.grid.1 + c]
    }

    pub fn owner_of_index(&self, fi: usize) -> usize {
        self.assignment[fi]
    }

    /// Row-major field indices owned by `worker`.
    pub fn owned_fields(&self, worker: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&fi| self.assignment[fi] == worker)
            .collect()
    }

    pub fn field_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.worker_count];
        for &w in &self.assignment {
            counts[w] += 1;
        }
        counts
    }

    /// Max minus min fields per worker.
    pub fn imbalance(&self) -> usize {
        let counts = self.field_counts();
        counts.iter().max().unwrap() - counts.iter().min().unwrap()
    }
}

/// Split `len` into `parts` contiguous chunks, earlier chunks one longer
/// when it does not divide evenly. Returns the chunk boundaries.
fn balanced_bounds(len: usize, parts: usize) -> Vec<usize> {
    let base = len / parts;
    let extra = len % parts;
    let mut bounds = Vec::with_capacity(parts + 1);
    let mut acc = 0;
    bounds.push(0);
    for i in 0..parts {
        acc += base + usize::from(i < extra);
        bounds.push(acc);
    }
    bounds
}

/// Assign fields to workers: a balanced rectangular tiling when one exists
/// at least as balanced as plain row-major segments, otherwise balanced
/// segments. Deterministic for a given (geometry, worker count).
pub fn partition_fields(geometry: &FieldGeometry, workers: usize) -> Result<PartitionPlan> {
    let (gr, gc) = geometry.grid;
    let count = gr * gc;
    if workers == 0 {
        return Err(Error::Partition("worker count must be positive".into()));
    }
    if workers > count {
        return Err(Error::Partition(format!(
            "{workers} workers exceed {count} fields ({gr}x{gc} grid)"
        )));
    }

    // Segment candidate: balanced chunks of the linearized grid.
    let seg_bounds = balanced_bounds(count, workers);
    let seg_imbalance = if count % workers == 0 { 0 } else { 1 };

    // Best rectangular candidate over factor pairs of the worker count:
    // (imbalance, (tile rows, tile cols), row bounds, col bounds).
    type RectCandidate = (usize, (usize, usize), Vec<usize>, Vec<usize>);
    let mut best_rect: Option<RectCandidate> = None;
    for pr in 1..=workers {
        if !workers.is_multiple_of(pr) {
            continue;
        }
        let pc = workers / pr;
        if pr > gr || pc > gc {
            continue;
        }
        let row_bounds = balanced_bounds(gr, pr);
        let col_bounds = balanced_bounds(gc, pc);
        let mut min_cells = usize::MAX;
        let mut max_cells = 0;
        for tr in 0..pr {
            for tc in 0..pc {
                let cells =
                    (row_bounds[tr + 1] - row_bounds[tr]) * (col_bounds[tc + 1] - col_bounds[tc]);
                min_cells = min_cells.min(cells);
                max_cells = max_cells.max(cells);
            }
        }
        let imbalance = max_cells - min_cells;
        let squareness = pr.abs_diff(pc);
        let better = match &best_rect {
            None => true,
            Some((best_imb, (bpr, bpc), _, _)) => {
                let best_sq = bpr.abs_diff(*bpc);
                (imbalance, squareness, std::cmp::Reverse(pr))
                    < (*best_imb, best_sq, std::cmp::Reverse(*bpr))
            }
        };
        if better {
            best_rect = Some((imbalance, (pr, pc), row_bounds, col_bounds));
        }
    }

    let mut assignment = vec![0usize; count];
    match best_rect {
        Some((imb, (pr, pc), row_bounds, col_bounds)) if imb <= seg_imbalance => {
            for r in 0..gr {
                let tr = row_bounds.partition_point(|&b| b <= r) - 1;
                for c in 0..gc {
                    let tc = col_bounds.partition_point(|&b| b <= c) - 1;
                    assignment[r * gc + c] = tr * pc + tc;
                }
            }
            Ok(PartitionPlan {
                worker_count: workers,
                grid: geometry.grid,
                scheme: TilingScheme::Rectangular {
                    tile_rows: pr,
                    tile_cols: pc,
                },
                assignment,
            })
        }
        _ => {
            for w in 0..workers {
                for fi in seg_bounds[w]..seg_bounds[w + 1] {
                    assignment[fi] = w;
                }
            }
            Ok(PartitionPlan {
                worker_count: workers,
                grid: geometry.grid,
                scheme: TilingScheme::Segments,
                assignment,
            })
        }
    }
}

/// Dense-layer rows split into balanced contiguous ranges; workers beyond
/// the row count own nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DensePartition {
    pub worker_count: usize,
    /// Row index -> worker id.
    row_owner: Vec<usize>,
}

impl DensePartition {
    pub fn new(rows: usize, workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Partition("worker count must be positive".into()));
        }
        let parts = workers.min(rows);
        let bounds = balanced_bounds(rows, parts);
        let mut row_owner = vec![0usize; rows];
        for w in 0..parts {
            for r in bounds[w]..bounds[w + 1] {
                row_owner[r] = w;
            }
        }
        Ok(Self {
            worker_count: workers,
            row_owner,
        })
    }

    pub fn owner_of_row(&self, row: usize) -> usize {
        self.row_owner[row]
    }

    pub fn owned_rows(&self, worker: usize) -> Vec<usize> {
        (0..self.row_owner.len())
            .filter(|&r| self.row_owner[r] == worker)
            .collect()
    }
}

/// Per-layer worker assignment for a whole chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerAssignment {
    Untied(PartitionPlan),
    Dense(DensePartition),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkPartition {
    pub worker_count: usize,
    pub layers: Vec<LayerAssignment>,
}

/// Partition every layer of the network over `workers` workers.
pub fn partition_network(net: &Network, workers: usize) -> Result<NetworkPartition> {
    let mut layers = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        layers.push(match layer {
            Layer::Untied(u) => LayerAssignment::Untied(partition_fields(&u.geometry, workers)?),
            Layer::Dense(d) => LayerAssignment::Dense(DensePartition::new(d.params.k(), workers)?),
        });
    }
    Ok(NetworkPartition {
        worker_count: workers,
        layers,
    })
}

/// Why bytes moved between two workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommReason {
    /// A downstream field fetched an upstream output block.
    InputBlockFetch,
    /// Parameter snapshot movement (not emitted by the forward simulator;
    /// weights stay put under untied ownership).
    Snapshot,
    /// Control-plane traffic (reserved).
    Control,
}

impl CommReason {
    pub fn label(&self) -> &'static str {
        match self {
            CommReason::InputBlockFetch => "input-block-fetch",
            CommReason::Snapshot => "snapshot",
            CommReason::Control => "control",
        }
    }
}

/// One logged transfer. Self-messages are never recorded; local access is
/// free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommRecord {
    /// Boundary index: the downstream layer that pulled the data.
    pub boundary: usize,
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub reason: CommReason,
}

/// Exact transfer log of one simulated pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLog {
    pub records: Vec<CommRecord>,
}

impl CommLog {
    fn log(&mut self, boundary: usize, src: usize, dst: usize, bytes: u64, reason: CommReason) {
        debug_assert_ne!(src, dst, "self-messages are free and never logged");
        self.records.push(CommRecord {
            boundary,
            src,
            dst,
            bytes,
            reason,
        });
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes).sum()
    }

    pub fn bytes_for_boundary(&self, boundary: usize) -> u64 {
        self.records
            .iter()
            .filter(|r| r.boundary == boundary)
            .map(|r| r.bytes)
            .sum()
    }

    pub fn messages_for_boundary(&self, boundary: usize) -> u64 {
        self.records
            .iter()
            .filter(|r| r.boundary == boundary)
            .count() as u64
    }

    pub fn render(&self) -> String {
        let mut out = String::from("boundary\tsrc\tdst\tbytes\treason\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.boundary,
                r.src,
                r.dst,
                r.bytes,
                r.reason.label()
            ));
        }
        out
    }
}

/// Ownership of the current activation map while walking the chain.
enum UpstreamOwnership<'a> {
    /// Raw input: free to every worker.
    RawInput,
    /// Untied layer output: cell (r, c) of the grid belongs to its field's
    /// worker; each cell holds `k` elements.
    Blocks { plan: &'a PartitionPlan, k: usize },
}

fn check_consistency(net: &Network, partition: &NetworkPartition) -> Result<()> {
    if partition.layers.len() != net.layers.len() {
        return Err(Error::Partition(format!(
            "partition covers {} layers, network has {}",
            partition.layers.len(),
            net.layers.len()
        )));
    }
    for (i, (layer, assign)) in net.layers.iter().zip(&partition.layers).enumerate() {
        match (layer, assign) {
            (Layer::Untied(u), LayerAssignment::Untied(p)) => {
                if p.grid != u.geometry.grid {
                    return Err(Error::Partition(format!(
                        "layer {i}: plan grid {:?} does not match geometry {:?}",
                        p.grid, u.geometry.grid
                    )));
                }
                if p.worker_count != partition.worker_count {
                    return Err(Error::Partition(format!(
                        "layer {i}: plan has {} workers, partition has {}",
                        p.worker_count, partition.worker_count
                    )));
                }
            }
            (Layer::Dense(d), LayerAssignment::Dense(p)) => {
                if p.row_owner.len() != d.params.k() {
                    return Err(Error::Partition(format!(
                        "layer {i}: dense partition covers {} rows, layer has {}",
                        p.row_owner.len(),
                        d.params.k()
                    )));
                }
            }
            _ => {
                return Err(Error::Partition(format!(
                    "layer {i}: assignment kind does not match layer kind"
                )));
            }
        }
    }
    Ok(())
}

/// Left-to-right dot product, the same accumulation order as the dense
/// tensor kernels.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Simulated model-parallel forward pass.
///
/// Workers run in ascending id order; each computes its own fields on
/// windows gathered from the assembled upstream array, logging one
/// transfer per consumed cross-owner block. Activations are identical to
/// the single-worker forward pass; LCN runs on the assembled output (its
/// halo traffic is not modeled). Weights never move.
pub fn dist_forward(
    net: &Network,
    partition: &NetworkPartition,
    batch: &Tensor,
    elem_bytes: usize,
) -> Result<(Tensor, CommLog)> {
    check_consistency(net, partition)?;
    let m = batch.shape()[0];
    let mut log = CommLog::default();
    let mut current = batch.clone();
    let mut upstream = UpstreamOwnership::RawInput;

    for (li, layer) in net.layers.iter().enumerate() {
        match (layer, &partition.layers[li]) {
            (Layer::Untied(u), LayerAssignment::Untied(plan)) => {
                current =
                    dist_untied_layer(u, plan, &upstream, &current, li, m, elem_bytes, &mut log)?;
                upstream = UpstreamOwnership::Blocks {
                    plan: match &partition.layers[li] {
                        LayerAssignment::Untied(p) => p,
                        _ => unreachable!(),
                    },
                    k: u.outputs_per_field(),
                };
            }
            (Layer::Dense(d), LayerAssignment::Dense(dp)) => {
                current =
                    dist_dense_layer(d, dp, &upstream, &current, li, m, elem_bytes, &mut log)?;
                // Dense output ownership is irrelevant downstream: dense
                // layers only ever feed dense layers, whose rows need the
                // full vector anyway; model it as block-per-row.
                upstream = UpstreamOwnership::RawInput;
                if li + 1 < net.layers.len() {
                    return Err(Error::Partition(
                        "simulator supports at most one dense layer, at the tail".into(),
                    ));
                }
            }
            _ => unreachable!("checked by check_consistency"),
        }
    }

    let out_m = current.shape()[0];
    let len: usize = current.shape()[1..].iter().product();
    Ok((current.reshape(vec![out_m, len])?, log))
}

#[allow(clippy::too_many_arguments)]
fn dist_untied_layer(
    u: &UntiedLayer,
    plan: &PartitionPlan,
    upstream: &UpstreamOwnership,
    input: &Tensor,
    layer_index: usize,
    m: usize,
    elem_bytes: usize,
    log: &mut CommLog,
) -> Result<Tensor> {
    let (h, w, ch) = u.geometry.input_dims;
    let shape = input.shape();
    if shape.len() != 4 || shape[1] != h || shape[2] != w || shape[3] != ch {
        return Err(Error::Partition(format!(
            "layer {layer_index}: input dims {:?} do not match geometry ({h}, {w}, {ch})",
            shape
        )));
    }
    let (gr, gc) = u.geometry.grid;
    let (fh, fw) = u.geometry.field_size;
    let stride = u.geometry.stride;
    let k = u.outputs_per_field();
    let n = u.geometry.window_len();
    let data = input.data();
    let mut out = vec![0.0; m * gr * gc * k];
    let mut window = vec![0.0; n];

    for worker in 0..plan.worker_count {
        for fi in plan.owned_fields(worker) {
            let (r, c) = (fi / gc, fi % gc);
            // Account the fetches this field needs before it can run.
            if let UpstreamOwnership::Blocks { plan: up, k: uk } = upstream {
                for dr in 0..fh {
                    for dc in 0..fw {
                        let (ur, uc) = (r * stride + dr, c * stride + dc);
                        let src = up.owner(ur, uc);
                        if src != worker {
                            log.log(
                                layer_index,
                                src,
                                worker,
                                (*uk as u64) * elem_bytes as u64 * m as u64,
                                CommReason::InputBlockFetch,
                            );
                        }
                    }
                }
            }
            let field = &u.fields[fi];
            let (r0, c0) = (r * stride, c * stride);
            for i in 0..m {
                // Gather the window in (row, col, channel) order.
                let mut pos = 0;
                for rr in r0..r0 + fh {
                    let base = ((i * h + rr) * w + c0) * ch;
                    window[pos..pos + fw * ch].copy_from_slice(&data[base..base + fw * ch]);
                    pos += fw * ch;
                }
                let obase = ((i * gr + r) * gc + c) * k;
                for j in 0..k {
                    out[obase + j] = field.alpha * dot(field.w.row(j), &window);
                }
            }
        }
    }

    let raw = Tensor::new(vec![m, gr, gc, k], out)?;
    match &u.lcn {
        None => Ok(raw),
        Some(cfg) => {
            let per_image = gr * gc * k;
            let mut normalized = vec![0.0; raw.len()];
            for i in 0..m {
                let map = Tensor::new(
                    vec![gr, gc, k],
                    raw.data()[i * per_image..(i + 1) * per_image].to_vec(),
                )?;
                let y = lcn_apply(&map, cfg)?;
                normalized[i * per_image..(i + 1) * per_image].copy_from_slice(y.data());
            }
            Tensor::new(vec![m, gr, gc, k], normalized)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dist_dense_layer(
    d: &crate::layers::DenseLayer,
    dp: &DensePartition,
    upstream: &UpstreamOwnership,
    input: &Tensor,
    layer_index: usize,
    m: usize,
    elem_bytes: usize,
    log: &mut CommLog,
) -> Result<Tensor> {
    let n: usize = input.shape()[1..].iter().product();
    if n != d.params.n() {
        return Err(Error::Partition(format!(
            "layer {layer_index}: flattened input {n} does not match dense n {}",
            d.params.n()
        )));
    }
    let flat = input.reshape(vec![m, n])?;
    let k = d.params.k();
    let mut out = vec![0.0; m * k];
    for worker in 0..dp.worker_count {
        let rows = dp.owned_rows(worker);
        if rows.is_empty() {
            continue;
        }
        // A dense row needs the entire upstream map: fetch every
        // cross-owner block once per worker.
        if let UpstreamOwnership::Blocks { plan: up, k: uk } = upstream {
            let (ugr, ugc) = up.grid;
            for ur in 0..ugr {
                for uc in 0..ugc {
                    let src = up.owner(ur, uc);
                    if src != worker {
                        log.log(
                            layer_index,
                            src,
                            worker,
                            (*uk as u64) * elem_bytes as u64 * m as u64,
                            CommReason::InputBlockFetch,
                        );
                    }
                }
            }
        }
        for i in 0..m {
            for &row in &rows {
                out[i * k + row] = d.params.alpha * dot(d.params.w.row(row), flat.row(i));
            }
        }
    }
    Tensor::new(vec![m, k], out)
}

/// Static prediction of one boundary's traffic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryPrediction {
    /// Index of the downstream layer.
    pub boundary: usize,
    pub bytes: u64,
    pub messages: u64,
}

/// Predict the exact communication volume of [`dist_forward`] without
/// executing it: enumerate every cross-owner (downstream consumer,
/// upstream block) pair. Weights contribute nothing; only activations move.
pub fn predicted_comm_bytes(
    net: &Network,
    partition: &NetworkPartition,
    minibatch: usize,
    elem_bytes: usize,
) -> Result<Vec<BoundaryPrediction>> {
    check_consistency(net, partition)?;
    let mut preds = Vec::new();
    let mut upstream: Option<(&PartitionPlan, usize)> = None;
    for (li, layer) in net.layers.iter().enumerate() {
        match (layer, &partition.layers[li]) {
            (Layer::Untied(u), LayerAssignment::Untied(plan)) => {
                if let Some((up, uk)) = upstream {
                    let (gr, gc) = u.geometry.grid;
                    let (fh, fw) = u.geometry.field_size;
                    let stride = u.geometry.stride;
                    let mut messages = 0u64;
                    for r in 0..gr {
                        for c in 0..gc {
                            let owner = plan.owner(r, c);
                            for dr in 0..fh {
                                for dc in 0..fw {
                                    if up.owner(r * stride + dr, c * stride + dc) != owner {
                                        messages += 1;
                                    }
                                }
                            }
                        }
                    }
                    preds.push(BoundaryPrediction {
                        boundary: li,
                        bytes: messages * uk as u64 * elem_bytes as u64 * minibatch as u64,
                        messages,
                    });
                }
                upstream = Some((plan, u.outputs_per_field()));
            }
            (Layer::Dense(d), LayerAssignment::Dense(dp)) => {
                if let Some((up, uk)) = upstream {
                    let (ugr, ugc) = up.grid;
                    let mut messages = 0u64;
                    for worker in 0..dp.worker_count {
                        if dp.owned_rows(worker).is_empty() {
                            continue;
                        }
                        for ur in 0..ugr {
                            for uc in 0..ugc {
                                if up.owner(ur, uc) != worker {
                                    messages += 1;
                                }
                            }
                        }
                    }
                    preds.push(BoundaryPrediction {
                        boundary: li,
                        bytes: messages * uk as u64 * elem_bytes as u64 * minibatch as u64,
                        messages,
                    });
                }
                let _ = d;
                upstream = None;
            }
            _ => unreachable!("checked by check_consistency"),
        }
    }
    Ok(preds)
}

/// The `comm-report` table: one line per boundary, tab-separated.
pub fn render_comm_report(
    workers: usize,
    predictions: &[BoundaryPrediction],
    log: &CommLog,
) -> String {
    let mut out = String::from("boundary\tworkers\tpredicted_bytes\tlogged_bytes\tmessages\n");
    for p in predictions {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            p.boundary,
            workers,
            p.bytes,
            log.bytes_for_boundary(p.boundary),
            log.messages_for_boundary(p.boundary)
        ));
    }
    out
}
