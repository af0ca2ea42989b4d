//! Checkpoints, dataset-wide forward passes, top-K stimulus extraction, and
//! first-layer filter visualization.
//!
//! Checkpoint layout (little-endian): magic `UFC1`, u32 format version, u32
//! config-echo length, the canonical config text, the network parameter
//! bytes, then a SHA-256 of everything before it. The embedded config echo
//! is authoritative: loading rebuilds the network from it, and a caller
//! that supplies its own config must match the echo exactly.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::datapipe::BlockSource;
use crate::error::{Error, Result};
use crate::network::{network_from_param_bytes, network_param_bytes, Network};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UFC1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained network plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub network: Network,
}

impl Checkpoint {
    pub fn new(config: RunConfig, network: Network) -> Self {
        Self { config, network }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let echo = self.config.render();
        let params = network_param_bytes(&self.network);
        let mut out = Vec::with_capacity(4 + 8 + echo.len() + params.len() + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(echo.as_bytes());
        out.extend_from_slice(&params);
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        out
    }

    /// SHA-256 over the serialized checkpoint body.
    pub fn content_hash(&self) -> [u8; 32] {
        let bytes = self.to_bytes();
        bytes[bytes.len() - 32..].try_into().unwrap()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 4 + 32 {
            return Err(Error::Checkpoint("checkpoint too short".into()));
        }
        let (body, stored_hash) = bytes.split_at(bytes.len() - 32);
        let hash = Sha256::digest(body);
        if hash.as_slice() != stored_hash {
            return Err(Error::Checkpoint("content hash mismatch".into()));
        }
        if &body[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad checkpoint magic {:?}",
                &body[..4]
            )));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let echo_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        if body.len() < 12 + echo_len {
            return Err(Error::Checkpoint("truncated config echo".into()));
        }
        let echo = std::str::from_utf8(&body[12..12 + echo_len])
            .map_err(|_| Error::Checkpoint("config echo is not utf-8".into()))?;
        let config = RunConfig::parse(echo)?;
        let network = network_from_param_bytes(&config, &body[12 + echo_len..])?;
        Ok(Self { config, network })
    }

    /// Enforce that a caller-provided config matches the embedded echo.
    pub fn verify_config(&self, expected: &RunConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::Checkpoint(
                "supplied config does not match the checkpoint's config echo".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Forward every image in the source through the network, mini-batch at a
/// time, into an (N x top-layer-size) activation matrix. The streaming
/// state is one mini-batch; the returned matrix itself is desk-scale
/// output, not working memory.
pub fn forward_dataset(net: &Network, source: &BlockSource) -> Result<Tensor> {
    let n = source.num_images();
    if n == 0 {
        return Err(Error::Data("no images to forward".into()));
    }
    let mb = source.minibatch_size().max(1);
    let mut out: Vec<f64> = Vec::new();
    let mut width = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + mb).min(n);
        let batch = source.image_range(start..end)?;
        let acts = net.forward(&batch)?;
        width = acts.cols();
        out.extend_from_slice(acts.data());
        start = end;
    }
    Tensor::new(vec![n, width], out)
}

/// One neuron's maintained top-K stimulus set, sorted by descending
/// activation with ties broken toward the lower image id.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub neuron: usize,
    /// (image id, activation value) pairs, at most K of them.
    pub top: Vec<(usize, f64)>,
}

/// Streaming top-K tracker over per-neuron activations.
#[derive(Debug, Clone)]
pub struct TopKTracker {
    k: usize,
    per_neuron: Vec<Vec<(usize, f64)>>,
}

impl TopKTracker {
    pub fn new(neurons: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("top-k needs k >= 1".into()));
        }
        Ok(Self {
            k,
            per_neuron: vec![Vec::with_capacity(k + 1); neurons],
        })
    }

    /// Does (id_a, a) rank ahead of (id_b, b)?
    fn ranks_ahead(id_a: usize, a: f64, id_b: usize, b: f64) -> bool {
        a > b || (a == b && id_a < id_b)
    }

    /// Fold in a batch of activations whose first row is image
    /// `first_image_id`.
    pub fn push_batch(&mut self, first_image_id: usize, acts: &Tensor) -> Result<()> {
        if acts.shape().len() != 2 || acts.cols() != self.per_neuron.len() {
            return Err(Error::Shape {
                context: "top-k activation batch".into(),
                left: acts.shape().to_vec(),
                right: vec![0, self.per_neuron.len()],
            });
        }
        for i in 0..acts.rows() {
            let id = first_image_id + i;
            for (j, set) in self.per_neuron.iter_mut().enumerate() {
                let v = acts.at(i, j);
                if set.len() == self.k {
                    let (last_id, last_v) = *set.last().unwrap();
                    if !Self::ranks_ahead(id, v, last_id, last_v) {
                        continue;
                    }
                }
                let pos = set
                    .iter()
                    .position(|&(sid, sv)| Self::ranks_ahead(id, v, sid, sv))
                    .unwrap_or(set.len());
                set.insert(pos, (id, v));
                set.truncate(self.k);
            }
        }
        Ok(())
    }

    pub fn into_records(self) -> Vec<ActivationRecord> {
        self.per_neuron
            .into_iter()
            .enumerate()
            .map(|(neuron, top)| ActivationRecord { neuron, top })
            .collect()
    }
}

/// Exact top-K per neuron (column) of an (N x D) activation matrix.
/// `k > N` returns all N images, sorted.
pub fn top_k_stimuli(activations: &Tensor, k: usize) -> Result<Vec<ActivationRecord>> {
    let mut tracker = TopKTracker::new(activations.cols(), k)?;
    tracker.push_batch(0, activations)?;
    Ok(tracker.into_records())
}

/// Stream the whole dataset through the network, maintaining only the
/// running top-K sets: bounded memory regardless of dataset size.
pub fn top_k_streaming(
    net: &Network,
    source: &BlockSource,
    k: usize,
) -> Result<Vec<ActivationRecord>> {
    let n = source.num_images();
    if n == 0 {
        return Err(Error::Data("no images to forward".into()));
    }
    let mb = source.minibatch_size().max(1);
    let mut tracker: Option<TopKTracker> = None;
    let mut start = 0usize;
    while start < n {
        let end = (start + mb).min(n);
        let batch = source.image_range(start..end)?;
        let acts = net.forward(&batch)?;
        let t = match &mut tracker {
            Some(t) => t,
            None => {
                tracker = Some(TopKTracker::new(acts.cols(), k)?);
                tracker.as_mut().unwrap()
            }
        };
        t.push_batch(start, &acts)?;
        start = end;
    }
    Ok(tracker.expect("at least one batch").into_records())
}

/// Fraction of a stimulus set carrying its own modal class label.
pub fn modal_label_rate(top: &[(usize, f64)], labels: &[u32]) -> f64 {
    if top.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::BTreeMap::new();
    for (id, _) in top {
        *counts.entry(labels[*id]).or_insert(0usize) += 1;
    }
    let modal = counts.values().max().copied().unwrap_or(0);
    modal as f64 / top.len() as f64
}

/// 8-bit raster produced by the filter renderer; 1 or 3 channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// Tile the rows of a (k x n) filter matrix into an image grid.
///
/// Each filter reshapes to (fh, fw, ch) and is min-max normalized to
/// [0, 255] on its own; a filter whose values are all equal renders as
/// mid-gray 128 rather than failing. Tiles are laid out row-major with
/// one-pixel black separators, so the output measures
/// `rows*(fh+1)+1  x  cols*(fw+1)+1` pixels. Unused tiles stay mid-gray.
pub fn render_filter_grid(
    w: &Tensor,
    field_dims: (usize, usize, usize),
    tile_grid: (usize, usize),
) -> Result<RasterImage> {
    let (fh, fw, ch) = field_dims;
    let (rows, cols) = tile_grid;
    if ch != 1 && ch != 3 {
        return Err(Error::Config(format!(
            "filter rendering supports 1 or 3 channels, got {ch}"
        )));
    }
    if w.shape().len() != 2 || w.cols() != fh * fw * ch {
        return Err(Error::Shape {
            context: "filter rows must reshape to (fh, fw, ch)".into(),
            left: w.shape().to_vec(),
            right: vec![w.rows(), fh * fw * ch],
        });
    }
    let k = w.rows();
    if k > rows * cols {
        return Err(Error::Config(format!(
            "{k} filters do not fit a {rows}x{cols} tile grid"
        )));
    }
    let height = rows * (fh + 1) + 1;
    let width = cols * (fw + 1) + 1;
    let mut pixels = vec![0u8; height * width * ch];

    for tile in 0..rows * cols {
        let (tr, tc) = (tile / cols, tile % cols);
        let (y0, x0) = (tr * (fh + 1) + 1, tc * (fw + 1) + 1);
        if tile >= k {
            for dy in 0..fh {
                for dx in 0..fw {
                    for kk in 0..ch {
                        pixels[((y0 + dy) * width + x0 + dx) * ch + kk] = 128;
                    }
                }
            }
            continue;
        }
        let row = w.row(tile);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in row {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        for dy in 0..fh {
            for dx in 0..fw {
                for kk in 0..ch {
                    let v = row[(dy * fw + dx) * ch + kk];
                    let byte = if hi > lo {
                        ((v - lo) / (hi - lo) * 255.0).round() as u8
                    } else {
                        128
                    };
                    pixels[((y0 + dy) * width + x0 + dx) * ch + kk] = byte;
                }
            }
        }
    }
    Ok(RasterImage {
        height,
        width,
        channels: ch,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_layer_chain;
    use crate::datapipe::{gen_synthetic, DatasetContainer};
    use proptest::prelude::{prop_assert_eq, proptest};
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk_checkpoint(seed: u64) -> Checkpoint {
        let mut cfg = RunConfig::default();
        cfg.input = (16, 16, 1);
        cfg.layers =
            parse_layer_chain("untied:field=8x8,stride=8,block=2x2x2 | dense:k=6").unwrap();
        cfg.seed = seed;
        cfg.minibatch_size = 8;
        cfg.block_size = 32;
        let net = Network::init(&cfg).unwrap();
        Checkpoint::new(cfg, net)
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let ckpt = desk_checkpoint(5);
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.network, ckpt.network);
    }

    #[test]
    fn checkpoint_detects_corruption() {
        let ckpt = desk_checkpoint(6);
        let mut bytes = ckpt.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn checkpoint_config_echo_must_match() {
        let ckpt = desk_checkpoint(7);
        let mut other = ckpt.config.clone();
        other.seed += 1;
        assert!(ckpt.verify_config(&ckpt.config).is_ok());
        assert!(matches!(
            ckpt.verify_config(&other),
            Err(Error::Checkpoint(_))
        ));
    }

    fn synthetic_source(n: usize, seed: u64) -> BlockSource {
        let (container, _) = gen_synthetic(n, 16, 4, 0.1, seed).unwrap();
        BlockSource::from_container(&container, 32, 8, true).unwrap()
    }

    #[test]
    fn zero_images_forward_to_zero_activations() {
        let ckpt = desk_checkpoint(8);
        let mut container = DatasetContainer::new(16, 16, 1).unwrap();
        for _ in 0..4 {
            container.push_image(&[0.0; 256]).unwrap();
        }
        let source = BlockSource::from_container(&container, 4, 2, false).unwrap();
        let acts = forward_dataset(&ckpt.network, &source).unwrap();
        assert!(acts.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_image_matrix_equals_direct_forward() {
        let ckpt = desk_checkpoint(9);
        let (container, _) = gen_synthetic(1, 16, 4, 0.2, 3).unwrap();
        let source = BlockSource::from_container(&container, 1, 1, true).unwrap();
        let acts = forward_dataset(&ckpt.network, &source).unwrap();

        let single = source.image_range(0..1).unwrap();
        let direct = ckpt.network.forward(&single).unwrap();
        assert_eq!(acts.data(), direct.data());
    }

    #[test]
    fn streaming_forward_matches_whole_dataset_oracle() {
        let ckpt = desk_checkpoint(10);
        let source = synthetic_source(256, 11);
        let streamed = forward_dataset(&ckpt.network, &source).unwrap();

        // Oracle: one giant batch through the same network.
        let all = source.image_range(0..256).unwrap();
        let whole = ckpt.network.forward(&all).unwrap();
        assert_eq!(streamed.shape(), whole.shape());
        for (a, b) in streamed.data().iter().zip(whole.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn top_k_single_neuron() {
        let acts = Tensor::new(vec![3, 1], vec![0.1, 0.9, 0.5]).unwrap();
        let records = top_k_stimuli(&acts, 1).unwrap();
        assert_eq!(records[0].top, vec![(1, 0.9)]);
    }

    #[test]
    fn top_k_breaks_ties_toward_lower_image_id() {
        let acts = Tensor::new(vec![5, 1], vec![1.0; 5]).unwrap();
        let records = top_k_stimuli(&acts, 3).unwrap();
        assert_eq!(records[0].top, vec![(0, 1.0), (1, 1.0), (2, 1.0)]);
    }

    #[test]
    fn top_k_larger_than_n_returns_everything_sorted() {
        let acts = Tensor::new(vec![3, 1], vec![0.2, 0.8, 0.5]).unwrap();
        let records = top_k_stimuli(&acts, 10).unwrap();
        assert_eq!(records[0].top, vec![(1, 0.8), (2, 0.5), (0, 0.2)]);
    }

    /// Full-sort oracle with the same tie rule.
    fn full_sort_oracle(acts: &Tensor, k: usize) -> Vec<Vec<(usize, f64)>> {
        let (n, d) = (acts.rows(), acts.cols());
        (0..d)
            .map(|j| {
                let mut col: Vec<(usize, f64)> = (0..n).map(|i| (i, acts.at(i, j))).collect();
                col.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
                col.truncate(k);
                col
            })
            .collect()
    }

    #[test]
    fn top_k_matches_full_sort_on_seeded_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let data: Vec<f64> = (0..5000 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let acts = Tensor::new(vec![5000, 64], data).unwrap();
        let records = top_k_stimuli(&acts, 5).unwrap();
        let oracle = full_sort_oracle(&acts, 5);
        for (r, o) in records.iter().zip(&oracle) {
            assert_eq!(&r.top, o, "neuron {}", r.neuron);
        }
    }

    #[test]
    fn streaming_top_k_equals_batch_top_k() {
        let ckpt = desk_checkpoint(12);
        let source = synthetic_source(96, 13);
        let streamed = top_k_streaming(&ckpt.network, &source, 5).unwrap();
        let matrix = forward_dataset(&ckpt.network, &source).unwrap();
        let batch = top_k_stimuli(&matrix, 5).unwrap();
        assert_eq!(streamed, batch);
    }

    #[test]
    fn modal_rate_counts_the_majority_label() {
        let labels = vec![0u32, 1, 1, 2, 1, 0];
        let top = vec![(1, 0.9), (2, 0.8), (4, 0.7), (0, 0.6), (3, 0.5)];
        // Labels of the top set: 1, 1, 1, 0, 2 -> modal count 3 of 5.
        assert_eq!(modal_label_rate(&top, &labels), 0.6);
    }

    #[test]
    fn constant_filter_renders_mid_gray() {
        let w = Tensor::new(vec![1, 9], vec![2.5; 9]).unwrap();
        let img = render_filter_grid(&w, (3, 3, 1), (1, 1)).unwrap();
        assert_eq!((img.height, img.width), (5, 5));
        // Interior tile is uniformly 128, frame stays 0.
        for y in 0..5 {
            for x in 0..5 {
                let expected = if y == 0 || y == 4 || x == 0 || x == 4 {
                    0
                } else {
                    128
                };
                assert_eq!(img.pixels[y * 5 + x], expected, "({y},{x})");
            }
        }
    }

    #[test]
    fn two_by_two_grid_of_3x3_filters_is_9x9() {
        let w = Tensor::new(vec![4, 9], (0..36).map(|v| v as f64).collect()).unwrap();
        let img = render_filter_grid(&w, (3, 3, 1), (2, 2)).unwrap();
        assert_eq!((img.height, img.width), (9, 9));
    }

    #[test]
    fn each_tile_spans_the_full_byte_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let data: Vec<f64> = (0..6 * 12).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let w = Tensor::new(vec![6, 12], data).unwrap();
        let img = render_filter_grid(&w, (4, 3, 1), (2, 3)).unwrap();
        for tile in 0..6 {
            let (tr, tc) = (tile / 3, tile % 3);
            let (y0, x0) = (tr * 5 + 1, tc * 4 + 1);
            let mut lo = u8::MAX;
            let mut hi = u8::MIN;
            for dy in 0..4 {
                for dx in 0..3 {
                    let b = img.pixels[(y0 + dy) * img.width + x0 + dx];
                    lo = lo.min(b);
                    hi = hi.max(b);
                }
            }
            assert_eq!(lo, 0, "tile {tile} min byte");
            assert_eq!(hi, 255, "tile {tile} max byte");
        }
    }

    #[test]
    fn non_reshapable_rows_are_a_shape_error() {
        let w = Tensor::new(vec![2, 8], vec![0.0; 16]).unwrap();
        assert!(matches!(
            render_filter_grid(&w, (3, 3, 1), (1, 2)),
            Err(Error::Shape { .. })
        ));
    }

    proptest! {
        #[test]
        fn top_k_equals_full_sort(seed in 0u64..128, n in 1usize..40, d in 1usize..6, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Coarse values force plenty of ties.
            let data: Vec<f64> = (0..n * d).map(|_| (rng.gen_range(-3i32..4)) as f64).collect();
            let acts = Tensor::new(vec![n, d], data).unwrap();
            let records = top_k_stimuli(&acts, k).unwrap();
            let oracle = full_sort_oracle(&acts, k);
            for (r, o) in records.iter().zip(&oracle) {
                prop_assert_eq!(&r.top, o);
            }
        }
    }
}
