//! Receptive-field geometry, untied layers, the dense top layer, local
//! contrast normalization, and parameter counting.
//!
//! Untied means every grid cell carries its own independent [`RicaParams`]
//! bundle: no weight sharing between fields, and no coupling between fields
//! during training. A field at grid cell (r, c) sees the input window
//! starting at (r * stride, c * stride), flattened in (row, col, channel)
//! order, and emits `oh * ow * oc` activation values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rica::{sgd_step, OptimizerState, RicaParams};
use crate::tensor::{matvec, Tensor};

/// Distinct deterministic RNG streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RngPurpose {
    LayerInit = 0,
    Optimizer = 1,
    DataGen = 2,
}

/// ChaCha stream for (purpose, layer, field); collision-free by construction.
pub(crate) fn derived_rng(
    seed: u64,
    purpose: RngPurpose,
    layer: usize,
    field: usize,
) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | ((layer as u64) << 32) | field as u64);
    rng
}

/// Receptive-field grid layout over an input volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldGeometry {
    /// Input volume (height, width, channels).
    pub input_dims: (usize, usize, usize),
    /// Window extent (field height, field width); all channels included.
    pub field_size: (usize, usize),
    pub stride: usize,
    /// Derived grid (rows, cols).
    pub grid: (usize, usize),
}

impl FieldGeometry {
    pub fn grid_rows(&self) -> usize {
        self.grid.0
    }

    pub fn grid_cols(&self) -> usize {
        self.grid.1
    }

    pub fn field_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Flattened window length: field height x width x channels.
    pub fn window_len(&self) -> usize {
        self.field_size.0 * self.field_size.1 * self.input_dims.2
    }

    /// Top-left input offset of the field at grid cell (r, c).
    pub fn field_offset(&self, r: usize, c: usize) -> (usize, usize) {
        (r * self.stride, c * self.stride)
    }
}

/// Lay a field grid over an input volume. Requires exact tiling: the stride
/// must divide the leftover extent in both dimensions, so there are no
/// fractional fields. Fields enumerate row-major.
pub fn compute_field_grid(
    input_dims: (usize, usize, usize),
    field_size: (usize, usize),
    stride: usize,
) -> Result<FieldGeometry> {
    let (h, w, ch) = input_dims;
    let (fh, fw) = field_size;
    if ch == 0 {
        return Err(Error::Config("input must have at least one channel".into()));
    }
    if fh == 0 || fw == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "field size and stride must be positive, got field {fh}x{fw}, stride {stride}"
        )));
    }
    if fh > h || fw > w {
        return Err(Error::Config(format!(
            "field {fh}x{fw} exceeds input {h}x{w}"
        )));
    }
    let rem_h = (h - fh) % stride;
    let rem_w = (w - fw) % stride;
    if rem_h != 0 || rem_w != 0 {
        return Err(Error::Config(format!(
            "field grid does not tile input exactly: residues ({rem_h}, {rem_w}) for input {h}x{w}, field {fh}x{fw}, stride {stride}"
        )));
    }
    Ok(FieldGeometry {
        input_dims,
        field_size,
        stride,
        grid: ((h - fh) / stride + 1, (w - fw) / stride + 1),
    })
}

/// Local contrast normalization settings: uniform square window, divisor
/// floored at `floor_c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LcnConfig {
    /// Odd window side length.
    pub window: usize,
    /// Lower bound on the divisive denominator.
    pub floor_c: f64,
}

impl LcnConfig {
    pub fn new(window: usize, floor_c: f64) -> Result<Self> {
        if window == 0 || window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "lcn window must be odd and positive, got {window}"
            )));
        }
        if floor_c.is_nan() || floor_c <= 0.0 {
            return Err(Error::Config(format!(
                "lcn floor must be positive, got {floor_c}"
            )));
        }
        Ok(Self { window, floor_c })
    }
}

impl Default for LcnConfig {
    fn default() -> Self {
        Self {
            window: 9,
            floor_c: 1e-4,
        }
    }
}

/// Local contrast normalization on an (H, W, C) map.
///
/// Per channel: subtract the uniform-window local mean, then divide the
/// centered value by `max(floor_c, local_std)` where `local_std` is the
/// square root of the windowed mean of squared centered values. Windows at
/// the edges are zero-padded with count-correct divisors: sums divide by the
/// number of in-bounds cells, so a constant map maps to exactly zero
/// everywhere including corners.
pub fn lcn_apply(map: &Tensor, cfg: &LcnConfig) -> Result<Tensor> {
    if map.shape().len() != 3 {
        return Err(Error::Shape {
            context: "lcn expects an (H, W, C) map".into(),
            left: map.shape().to_vec(),
            right: vec![],
        });
    }
    let (h, w, ch) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    if h < cfg.window || w < cfg.window {
        return Err(Error::Config(format!(
            "lcn window {} exceeds map spatial dims {}x{}",
            cfg.window, h, w
        )));
    }
    let half = cfg.window / 2;
    let data = map.data();
    let idx = |r: usize, c: usize, k: usize| (r * w + c) * ch + k;

    // Subtractive stage. The centered value x - mean(window) is accumulated
    // as mean(x - x_q) over the window, which is exactly zero on a constant
    // map for any constant.
    let mut centered = vec![0.0; data.len()];
    for r in 0..h {
        let r0 = r.saturating_sub(half);
        let r1 = (r + half).min(h - 1);
        for c in 0..w {
            let c0 = c.saturating_sub(half);
            let c1 = (c + half).min(w - 1);
            let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
            for k in 0..ch {
                let center = data[idx(r, c, k)];
                let mut dev_sum = 0.0;
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        dev_sum += center - data[idx(rr, cc, k)];
                    }
                }
                centered[idx(r, c, k)] = dev_sum / count;
            }
        }
    }

    // Divisive stage on the centered values.
    let mut out = vec![0.0; data.len()];
    for r in 0..h {
        let r0 = r.saturating_sub(half);
        let r1 = (r + half).min(h - 1);
        for c in 0..w {
            let c0 = c.saturating_sub(half);
            let c1 = (c + half).min(w - 1);
            let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
            for k in 0..ch {
                let mut sq = 0.0;
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        let v = centered[idx(rr, cc, k)];
                        sq += v * v;
                    }
                }
                let std = (sq / count).sqrt();
                out[idx(r, c, k)] = centered[idx(r, c, k)] / std.max(cfg.floor_c);
            }
        }
    }
    Tensor::new(vec![h, w, ch], out)
}

/// One untied layer: a grid of independent RICA fields plus optional LCN on
/// the assembled output.
#[derive(Debug, Clone, PartialEq)]
pub struct UntiedLayer {
    pub geometry: FieldGeometry,
    /// Per-field output block (oh, ow, oc); the field emits oh*ow*oc values.
    pub output_block: (usize, usize, usize),
    /// Row-major grid of parameter bundles, one per cell.
    pub fields: Vec<RicaParams>,
    pub lcn: Option<LcnConfig>,
}

impl UntiedLayer {
    pub fn new(
        geometry: FieldGeometry,
        output_block: (usize, usize, usize),
        fields: Vec<RicaParams>,
        lcn: Option<LcnConfig>,
    ) -> Result<Self> {
        let (oh, ow, oc) = output_block;
        if oh * ow * oc == 0 {
            return Err(Error::Config(
                "output block extents must be positive".into(),
            ));
        }
        if fields.len() != geometry.field_count() {
            return Err(Error::Config(format!(
                "layer needs {} fields for a {}x{} grid, got {}",
                geometry.field_count(),
                geometry.grid_rows(),
                geometry.grid_cols(),
                fields.len()
            )));
        }
        let k = oh * ow * oc;
        let n = geometry.window_len();
        for (i, f) in fields.iter().enumerate() {
            if f.k() != k || f.n() != n {
                return Err(Error::Shape {
                    context: format!("field {i} weight shape"),
                    left: vec![f.k(), f.n()],
                    right: vec![k, n],
                });
            }
        }
        Ok(Self {
            geometry,
            output_block,
            fields,
            lcn,
        })
    }

    /// Seeded random initialization, one independent ChaCha stream per field.
    pub fn init(
        geometry: FieldGeometry,
        output_block: (usize, usize, usize),
        lambda: f64,
        eps_sparsity: f64,
        lcn: Option<LcnConfig>,
        seed: u64,
        layer_index: usize,
    ) -> Result<Self> {
        let k = output_block.0 * output_block.1 * output_block.2;
        let n = geometry.window_len();
        let mut fields = Vec::with_capacity(geometry.field_count());
        for fi in 0..geometry.field_count() {
            let mut rng = derived_rng(seed, RngPurpose::LayerInit, layer_index, fi);
            fields.push(RicaParams::init(k, n, lambda, eps_sparsity, &mut rng)?);
        }
        Self::new(geometry, output_block, fields, lcn)
    }

    /// Activation values per field: k = oh * ow * oc.
    pub fn outputs_per_field(&self) -> usize {
        let (oh, ow, oc) = self.output_block;
        oh * ow * oc
    }

    /// Output volume (grid rows, grid cols, outputs per field).
    pub fn output_dims(&self) -> (usize, usize, usize) {
        (
            self.geometry.grid_rows(),
            self.geometry.grid_cols(),
            self.outputs_per_field(),
        )
    }

    pub fn field(&self, r: usize, c: usize) -> &RicaParams {
        &self.fields[r * self.geometry.grid_cols() + c]
    }

    pub fn field_mut(&mut self, r: usize, c: usize) -> &mut RicaParams {
        let cols = self.geometry.grid_cols();
        &mut self.fields[r * cols + c]
    }
}

fn check_batch_dims(geometry: &FieldGeometry, batch: &Tensor) -> Result<usize> {
    let (h, w, ch) = geometry.input_dims;
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != h || shape[2] != w || shape[3] != ch {
        return Err(Error::Shape {
            context: "batch dims must match layer geometry (m, H, W, C)".into(),
            left: shape.to_vec(),
            right: vec![0, h, w, ch],
        });
    }
    Ok(shape[0])
}

/// Gather the (m x window_len) input slice matrix for the field at (r, c),
/// windows flattened in (row, col, channel) order.
pub fn field_batch(geometry: &FieldGeometry, batch: &Tensor, r: usize, c: usize) -> Result<Tensor> {
    let m = check_batch_dims(geometry, batch)?;
    let (h, w, ch) = geometry.input_dims;
    let _ = h;
    let (fh, fw) = geometry.field_size;
    let (r0, c0) = geometry.field_offset(r, c);
    let n = geometry.window_len();
    let data = batch.data();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let img = i * batch.shape()[1] * w * ch;
        for rr in r0..r0 + fh {
            let row = img + (rr * w + c0) * ch;
            out.extend_from_slice(&data[row..row + fw * ch]);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Forward a batch through an untied layer.
///
/// Output shape (m, grid rows, grid cols, outputs per field); fields are
/// evaluated in row-major order, each as `alpha * W * window`, and LCN (when
/// configured) is applied per image over the assembled (gridR, gridC, K)
/// map.
pub fn untied_forward(layer: &UntiedLayer, batch: &Tensor) -> Result<Tensor> {
    let m = check_batch_dims(&layer.geometry, batch)?;
    let (gr, gc) = layer.geometry.grid;
    let k = layer.outputs_per_field();
    let mut out = vec![0.0; m * gr * gc * k];
    for r in 0..gr {
        for c in 0..gc {
            let f = layer.field(r, c);
            let slab = field_batch(&layer.geometry, batch, r, c)?;
            for i in 0..m {
                let z = matvec(&f.w, slab.row(i))?;
                let base = ((i * gr + r) * gc + c) * k;
                for (j, &zj) in z.iter().enumerate() {
                    out[base + j] = f.alpha * zj;
                }
            }
        }
    }
    let raw = Tensor::new(vec![m, gr, gc, k], out)?;
    match &layer.lcn {
        None => Ok(raw),
        Some(cfg) => {
            let mut normalized = vec![0.0; raw.len()];
            let per_image = gr * gc * k;
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

/// One training step over the minibatch for every field independently.
///
/// Each field runs [`sgd_step`] on its own window slices; there is no
/// cross-field coupling. Returns the summed pre-step objective across
/// fields. Errors come back with the field's grid coordinates attached.
pub fn untied_train_step(
    layer: &mut UntiedLayer,
    states: &mut [OptimizerState],
    batch: &Tensor,
) -> Result<f64> {
    check_batch_dims(&layer.geometry, batch)?;
    let (gr, gc) = layer.geometry.grid;
    if states.len() != gr * gc {
        return Err(Error::Config(format!(
            "need {} optimizer states, got {}",
            gr * gc,
            states.len()
        )));
    }
    let mut total = 0.0;
    for r in 0..gr {
        for c in 0..gc {
            let slab = field_batch(&layer.geometry, batch, r, c)?;
            let fi = r * gc + c;
            let obj = sgd_step(&mut layer.fields[fi], &mut states[fi], &slab).map_err(|e| {
                Error::Field {
                    row: r,
                    col: c,
                    source: Box::new(e),
                }
            })?;
            total += obj;
        }
    }
    Ok(total)
}

/// Fully connected top layer: one RICA bundle over the flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub params: RicaParams,
}

impl DenseLayer {
    pub fn new(params: RicaParams) -> Result<Self> {
        if params.k() == 0 {
            return Err(Error::Config(
                "dense layer needs at least one neuron".into(),
            ));
        }
        Ok(Self { params })
    }

    pub fn init(
        input_len: usize,
        neurons: usize,
        lambda: f64,
        eps_sparsity: f64,
        seed: u64,
        layer_index: usize,
    ) -> Result<Self> {
        let mut rng = derived_rng(seed, RngPurpose::LayerInit, layer_index, 0);
        Self::new(RicaParams::init(
            neurons,
            input_len,
            lambda,
            eps_sparsity,
            &mut rng,
        )?)
    }

    /// Encode a (m x n) batch of flattened inputs to (m x k) activations.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.shape().len() != 2 || batch.cols() != self.params.n() {
            return Err(Error::Shape {
                context: "dense forward input".into(),
                left: batch.shape().to_vec(),
                right: vec![0, self.params.n()],
            });
        }
        let m = batch.rows();
        let k = self.params.k();
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let z = matvec(&self.params.w, batch.row(i))?;
            for (j, &zj) in z.iter().enumerate() {
                out[i * k + j] = self.params.alpha * zj;
            }
        }
        Tensor::new(vec![m, k], out)
    }
}

/// Trainable parameters of one (k, n) RICA bundle: k*n weights, n offsets,
/// one scaling.
pub fn bundle_param_count(k: usize, n: usize) -> u64 {
    (k as u64) * (n as u64) + (n as u64) + 1
}

/// Per-layer slice of a parameter-count report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParamCount {
    pub label: String,
    pub fields: usize,
    pub per_field: u64,
    pub total: u64,
}

/// Parameter-count report for a layer chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCountReport {
    pub layers: Vec<LayerParamCount>,
    pub total: u64,
    /// Documented inconsistencies or caveats; printed with the report.
    pub notes: Vec<String>,
}

impl ParamCountReport {
    pub fn render(&self) -> String {
        let mut out = String::from("layer\tfields\tparams_per_field\tparams_total\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                l.label, l.fields, l.per_field, l.total
            ));
        }
        out.push_str(&format!("total\t\t\t{}\n", self.total));
        for n in &self.notes {
            out.push_str(&format!("# {n}\n"));
        }
        out
    }
}
