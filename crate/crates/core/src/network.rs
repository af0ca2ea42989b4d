//! The layer chain: geometry resolution, seeded initialization, forward
//! propagation, per-layer training, and parameter counting.
//!
//! An untied layer's output grid (rows, cols, outputs-per-field) is the next
//! layer's input volume: grid cells act as pixels whose channel vector is
//! the field's output block. Dense layers flatten whatever volume reaches
//! them and may appear only at the tail of the chain.

use crate::config::{LayerSpec, RunConfig};
use crate::error::{Error, Result};
use crate::layers::{
    bundle_param_count, compute_field_grid, DenseLayer, LayerParamCount, LcnConfig,
    ParamCountReport, UntiedLayer,
};
use crate::rica::{sgd_step, OptimizerState};
use crate::tensor::Tensor;

/// One resolved layer of the chain.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Untied(UntiedLayer),
    Dense(DenseLayer),
}

impl Layer {
    /// Output element count per image.
    pub fn output_len(&self) -> usize {
        match self {
            Layer::Untied(u) => {
                let (gr, gc, k) = u.output_dims();
                gr * gc * k
            }
            Layer::Dense(d) => d.params.k(),
        }
    }
}

/// A resolved, initialized network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_dims: (usize, usize, usize),
    pub layers: Vec<Layer>,
}

/// Shape bookkeeping while resolving a chain.
fn chain_dims(
    input: (usize, usize, usize),
    specs: &[LayerSpec],
) -> Result<Vec<(usize, usize, usize)>> {
    let mut dims = vec![input];
    let mut seen_dense = false;
    for (i, spec) in specs.iter().enumerate() {
        let cur = *dims.last().expect("non-empty");
        match spec {
            LayerSpec::Untied {
                field,
                stride,
                block,
                ..
            } => {
                if seen_dense {
                    return Err(Error::Config(format!(
                        "layer {i}: untied layers cannot follow a dense layer"
                    )));
                }
                let g = compute_field_grid(cur, *field, *stride)?;
                let k = block.0 * block.1 * block.2;
                dims.push((g.grid_rows(), g.grid_cols(), k));
            }
            LayerSpec::Dense { neurons, .. } => {
                seen_dense = true;
                let _ = cur;
                dims.push((1, 1, *neurons));
            }
        }
    }
    Ok(dims)
}

impl Network {
    /// Resolve geometry and initialize every layer from the run seed, one
    /// ChaCha stream per (layer, field).
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        if cfg.layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let dims = chain_dims(cfg.input, &cfg.layers)?;
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for (i, spec) in cfg.layers.iter().enumerate() {
            let cur = dims[i];
            match spec {
                LayerSpec::Untied {
                    field,
                    stride,
                    block,
                    lcn_window,
                    ..
                } => {
                    let g = compute_field_grid(cur, *field, *stride)?;
                    let lcn = lcn_window
                        .map(|w| LcnConfig::new(w, cfg.lcn_floor))
                        .transpose()?;
                    layers.push(Layer::Untied(UntiedLayer::init(
                        g,
                        *block,
                        spec.lambda(),
                        cfg.eps_sparsity,
                        lcn,
                        cfg.seed,
                        i,
                    )?));
                }
                LayerSpec::Dense { neurons, .. } => {
                    let n = cur.0 * cur.1 * cur.2;
                    layers.push(Layer::Dense(DenseLayer::init(
                        n,
                        *neurons,
                        spec.lambda(),
                        cfg.eps_sparsity,
                        cfg.seed,
                        i,
                    )?));
                }
            }
        }
        Ok(Self {
            input_dims: cfg.input,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Forward a raw batch through layers `0..upto` (exclusive), returning
    /// the input for layer `upto`. `upto == 0` returns the batch itself.
    pub fn forward_to(&self, batch: &Tensor, upto: usize) -> Result<Tensor> {
        let mut cur = batch.clone();
        for l in 0..upto {
            cur = layer_forward(&self.layers[l], &cur)?;
        }
        Ok(cur)
    }

    /// Forward a raw batch through the whole chain to final activations,
    /// flattened to (m, output_len).
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let out = self.forward_to(batch, self.num_layers())?;
        let m = out.shape()[0];
        let len: usize = out.shape()[1..].iter().product();
        out.reshape(vec![m, len])
    }
}

/// Forward one layer; untied output keeps its (m, rows, cols, k) shape,
/// dense input gets flattened.
pub fn layer_forward(layer: &Layer, input: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Untied(u) => crate::layers::untied_forward(u, input),
        Layer::Dense(d) => {
            let m = input.shape()[0];
            let n: usize = input.shape()[1..].iter().product();
            d.forward(&input.reshape(vec![m, n])?)
        }
    }
}

/// Optimizer state bundles, one per field per layer, each with its own
/// deterministic RNG stream.
#[derive(Debug, Clone)]
pub struct NetworkOptimizer {
    pub per_layer: Vec<Vec<OptimizerState>>,
}

impl NetworkOptimizer {
    pub fn init(net: &Network, cfg: &RunConfig) -> Result<Self> {
        let mut per_layer = Vec::with_capacity(net.layers.len());
        for (i, layer) in net.layers.iter().enumerate() {
            let states = match layer {
                Layer::Untied(u) => {
                    let k = u.outputs_per_field();
                    let n = u.geometry.window_len();
                    (0..u.fields.len())
                        .map(|fi| {
                            OptimizerState::new(
                                cfg.learning_rate,
                                cfg.momentum,
                                k,
                                n,
                                crate::layers::derived_rng(
                                    cfg.seed,
                                    crate::layers::RngPurpose::Optimizer,
                                    i,
                                    fi,
                                ),
                            )
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                Layer::Dense(d) => vec![OptimizerState::new(
                    cfg.learning_rate,
                    cfg.momentum,
                    d.params.k(),
                    d.params.n(),
                    crate::layers::derived_rng(
                        cfg.seed,
                        crate::layers::RngPurpose::Optimizer,
                        i,
                        0,
                    ),
                )?],
            };
            per_layer.push(states);
        }
        Ok(Self { per_layer })
    }
}

/// One training step of layer `l` on its (already forwarded) input
/// minibatch. Returns the summed pre-step objective.
pub fn train_layer_step(
    net: &mut Network,
    opt: &mut NetworkOptimizer,
    l: usize,
    input: &Tensor,
) -> Result<f64> {
    match &mut net.layers[l] {
        Layer::Untied(u) => crate::layers::untied_train_step(u, &mut opt.per_layer[l], input),
        Layer::Dense(d) => {
            let m = input.shape()[0];
            let n: usize = input.shape()[1..].iter().product();
            let flat = input.reshape(vec![m, n])?;
            sgd_step(&mut d.params, &mut opt.per_layer[l][0], &flat)
        }
    }
}

fn push_bundle_bytes(p: &crate::rica::RicaParams, out: &mut Vec<u8>) {
    out.extend_from_slice(&(p.k() as u32).to_le_bytes());
    out.extend_from_slice(&(p.n() as u32).to_le_bytes());
    for v in p.w.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&p.alpha.to_le_bytes());
    for v in p.b.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Deterministic little-endian serialization of one layer's parameters.
pub fn layer_param_bytes(layer: &Layer, out: &mut Vec<u8>) {
    match layer {
        Layer::Untied(u) => {
            out.extend_from_slice(&(u.fields.len() as u32).to_le_bytes());
            for f in &u.fields {
                push_bundle_bytes(f, out);
            }
        }
        Layer::Dense(d) => {
            out.extend_from_slice(&1u32.to_le_bytes());
            push_bundle_bytes(&d.params, out);
        }
    }
}

/// Deterministic serialization of every parameter in the network; equal
/// bytes mean equal parameters.
pub fn network_param_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for layer in &net.layers {
        layer_param_bytes(layer, &mut out);
    }
    out
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(Error::Data("truncated parameter bytes".into()));
        }
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn f64(&mut self) -> Result<f64> {
        if self.pos + 8 > self.bytes.len() {
            return Err(Error::Data("truncated parameter bytes".into()));
        }
        let v = f64::from_le_bytes(self.bytes[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        Ok(v)
    }

    fn f64_vec(&mut self, len: usize) -> Result<Vec<f64>> {
        (0..len).map(|_| self.f64()).collect()
    }
}

fn read_bundle(
    r: &mut ByteReader,
    lambda: f64,
    eps_sparsity: f64,
) -> Result<crate::rica::RicaParams> {
    let k = r.u32()? as usize;
    let n = r.u32()? as usize;
    let w = Tensor::new(vec![k, n], r.f64_vec(k * n)?)?;
    let alpha = r.f64()?;
    let b = Tensor::new(vec![n], r.f64_vec(n)?)?;
    crate::rica::RicaParams::from_raw_parts(w, alpha, b, lambda, eps_sparsity)
}

/// Rebuild a network from a config (for architecture, lambda, LCN) and the
/// serialized parameter bytes produced by [`network_param_bytes`].
pub fn network_from_param_bytes(cfg: &RunConfig, bytes: &[u8]) -> Result<Network> {
    let template = Network::init(cfg)?;
    let mut r = ByteReader { bytes, pos: 0 };
    let layer_count = r.u32()? as usize;
    if layer_count != template.layers.len() {
        return Err(Error::Data(format!(
            "parameter bytes describe {layer_count} layers, config has {}",
            template.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for (i, spec_layer) in template.layers.into_iter().enumerate() {
        let lambda = cfg.layers[i].lambda();
        match spec_layer {
            Layer::Untied(u) => {
                let fields_len = r.u32()? as usize;
                if fields_len != u.fields.len() {
                    return Err(Error::Data(format!(
                        "layer {i}: {fields_len} serialized fields, geometry expects {}",
                        u.fields.len()
                    )));
                }
                let mut fields = Vec::with_capacity(fields_len);
                for _ in 0..fields_len {
                    let f = read_bundle(&mut r, lambda, cfg.eps_sparsity)?;
                    if f.k() != u.outputs_per_field() || f.n() != u.geometry.window_len() {
                        return Err(Error::Data(format!(
                            "layer {i}: serialized field shape ({}, {}) does not match geometry",
                            f.k(),
                            f.n()
                        )));
                    }
                    fields.push(f);
                }
                layers.push(Layer::Untied(UntiedLayer::new(
                    u.geometry,
                    u.output_block,
                    fields,
                    u.lcn,
                )?));
            }
            Layer::Dense(d) => {
                let count = r.u32()? as usize;
                if count != 1 {
                    return Err(Error::Data(format!(
                        "layer {i}: dense layer expects one bundle, found {count}"
                    )));
                }
                let p = read_bundle(&mut r, lambda, cfg.eps_sparsity)?;
                if p.k() != d.params.k() || p.n() != d.params.n() {
                    return Err(Error::Data(format!(
                        "layer {i}: serialized dense shape ({}, {}) does not match config",
                        p.k(),
                        p.n()
                    )));
                }
                layers.push(Layer::Dense(DenseLayer::new(p)?));
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(
            "trailing bytes after network parameters".into(),
        ));
    }
    Ok(Network {
        input_dims: cfg.input,
        layers,
    })
}

/// Parameter counts for a configured chain, layer by layer.
pub fn param_count(input: (usize, usize, usize), specs: &[LayerSpec]) -> Result<ParamCountReport> {
    let mut layers = Vec::with_capacity(specs.len());
    let mut total: u64 = 0;
    let mut cur = input;
    let mut seen_dense = false;
    for (i, spec) in specs.iter().enumerate() {
        match spec {
            LayerSpec::Untied {
                field,
                stride,
                block,
                ..
            } => {
                if seen_dense {
                    return Err(Error::Config(format!(
                        "layer {i}: untied layers cannot follow a dense layer"
                    )));
                }
                let g = compute_field_grid(cur, *field, *stride)?;
                let k = block.0 * block.1 * block.2;
                let n = g.window_len();
                let per_field = bundle_param_count(k, n);
                let fields = g.field_count();
                let subtotal = per_field * fields as u64;
                layers.push(LayerParamCount {
                    label: format!("untied-{}", i + 1),
                    fields,
                    per_field,
                    total: subtotal,
                });
                total += subtotal;
                cur = (g.grid_rows(), g.grid_cols(), k);
            }
            LayerSpec::Dense { neurons, .. } => {
                seen_dense = true;
                let n = cur.0 * cur.1 * cur.2;
                let subtotal = bundle_param_count(*neurons, n);
                layers.push(LayerParamCount {
                    label: format!("dense-{}", i + 1),
                    fields: 1,
                    per_field: subtotal,
                    total: subtotal,
                });
                total += subtotal;
                cur = (1, 1, *neurons);
            }
        }
    }
    Ok(ParamCountReport {
        layers,
        total,
        notes: Vec::new(),
    })
}

/// Best-effort parameter report for the published three-layer topology,
/// with the arithmetic gaps documented instead of forced.
///
/// Layer 1 follows directly from its stated geometry: a 72x72 grid of
/// fields with 16x16x3 windows and 4x4x24 outputs. The stated layer-2
/// description (4x4 groups of layer-1 blocks, stride 4) does not chain to
/// the stated 62x62x24 layer-3 input under any consistent reading, and no
/// breakdown reaches the headline 15e9 total; the report carries both
/// figures and says so.
pub fn published_param_report() -> ParamCountReport {
    // Layer 1: 72x72 fields, n = 16*16*3, k = 4*4*24.
    let l1_per = bundle_param_count(384, 768);
    let l1 = LayerParamCount {
        label: "untied-1".into(),
        fields: 5184,
        per_field: l1_per,
        total: 5184 * l1_per,
    };
    // Layer 2 best effort: fields of 4x4 layer-1 blocks (n = 16 * 384) with
    // stride one block give a 69x69 grid, k = 384.
    let l2_per = bundle_param_count(384, 6144);
    let l2 = LayerParamCount {
        label: "untied-2".into(),
        fields: 69 * 69,
        per_field: l2_per,
        total: (69 * 69) as u64 * l2_per,
    };
    // Layer 3 from its stated figures: 4096 neurons over 62*62*24 inputs.
    let l3_per = bundle_param_count(4096, 62 * 62 * 24);
    let l3 = LayerParamCount {
        label: "dense-3".into(),
        fields: 1,
        per_field: l3_per,
        total: l3_per,
    };
    let total = l1.total + l2.total + l3.total;
    ParamCountReport {
        layers: vec![l1, l2, l3],
        total,
        notes: vec![
            "layer-2 figure is a best-effort reading (4x4 blocks, stride one block -> 69x69 grid); \
             the stated second-layer description does not chain to the stated 62x62x24 third-layer input"
                .into(),
            format!(
                "total {total} does not close to the advertised 15e9; no consistent per-layer \
                 breakdown reaches that figure"
            ),
        ],
    }
}
