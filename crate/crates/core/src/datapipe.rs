//! Image preprocessing, block/mini-batch packing, the binary dataset
//! container, and the synthetic oriented-edge corpus generator.
//!
//! Container layout (little-endian): magic `UFD1`, then six u32 header
//! fields (format version, image count, height, width, channels, element
//! type code), then the payload of `count * H * W * C` f32 values in
//! row-major (image, row, col, channel) order. Element type code 1 = f32.
//! The optional manifest is a separate tab-separated text file of
//! `index<TAB>class` lines.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{derived_rng, RngPurpose};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"UFD1";
pub const CONTAINER_VERSION: u32 = 1;
pub const ELEM_TYPE_F32: u32 = 1;

/// In-memory dataset: fixed-shape f32 images. Double precision is used for
/// all math; f32 appears only in this on-disk container.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetContainer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl DatasetContainer {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "container dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data: Vec::new(),
        })
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Number of images.
    pub fn len(&self) -> usize {
        self.data.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push_image(&mut self, img: &[f32]) -> Result<()> {
        if img.len() != self.image_len() {
            return Err(Error::Shape {
                context: "container image length".into(),
                left: vec![img.len()],
                right: vec![self.image_len()],
            });
        }
        if let Some(pos) = img.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: "non-finite pixel".into(),
                index: pos,
            });
        }
        self.data.extend_from_slice(img);
        Ok(())
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Image `i` as an f64 (H, W, C) tensor.
    pub fn image_tensor(&self, i: usize) -> Tensor {
        let v: Vec<f64> = self.image(i).iter().map(|&x| x as f64).collect();
        Tensor::new(vec![self.height, self.width, self.channels], v)
            .expect("container images are finite by construction")
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CONTAINER_MAGIC)?;
        for field in [
            CONTAINER_VERSION,
            self.len() as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            ELEM_TYPE_F32,
        ] {
            w.write_all(&field.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::Data(format!(
                "bad container magic {:?}, expected {:?}",
                magic, CONTAINER_MAGIC
            )));
        }
        let mut header = [0u32; 6];
        for h in &mut header {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            *h = u32::from_le_bytes(buf);
        }
        let [version, count, height, width, channels, elem] = header;
        if version != CONTAINER_VERSION {
            return Err(Error::Data(format!(
                "unsupported container version {version}"
            )));
        }
        if elem != ELEM_TYPE_F32 {
            return Err(Error::Data(format!("unsupported element type code {elem}")));
        }
        let mut c = Self::new(height as usize, width as usize, channels as usize)?;
        let total = count as usize * c.image_len();
        let mut payload = vec![0u8; total * 4];
        r.read_exact(&mut payload).map_err(|e| {
            Error::Data(format!(
                "container payload truncated: expected {} bytes for {} images: {e}",
                total * 4,
                count
            ))
        })?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Data("trailing bytes after container payload".into()));
        }
        c.data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(pos) = c.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite pixel at flat index {pos}")));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// Write a class manifest: one `index<TAB>class` line per image.
pub fn write_manifest<W: Write>(w: &mut W, labels: &[u32]) -> Result<()> {
    for (i, c) in labels.iter().enumerate() {
        writeln!(w, "{i}\t{c}")?;
    }
    Ok(())
}

pub fn read_manifest<R: std::io::BufRead>(r: R) -> Result<Vec<u32>> {
    let mut labels = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let idx: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("manifest line {lineno}: bad index")))?;
        let class: u32 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("manifest line {lineno}: bad class")))?;
        if idx != labels.len() {
            return Err(Error::Data(format!(
                "manifest line {lineno}: index {idx} out of order"
            )));
        }
        labels.push(class);
    }
    Ok(labels)
}

/// One data block: a contiguous run of images split into equal mini-batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataBlock {
    pub block_index: usize,
    /// Image-index ranges, one per mini-batch.
    pub minibatches: Vec<std::ops::Range<usize>>,
}

/// Split `count` images into full blocks of `block_size`, each holding
/// `block_size / minibatch_size` mini-batches. The trailing remainder that
/// cannot fill a block is dropped and reported back.
pub fn pack_blocks(
    count: usize,
    block_size: usize,
    minibatch_size: usize,
) -> Result<(Vec<DataBlock>, usize)> {
    if count == 0 {
        return Err(Error::Data("cannot pack an empty image set".into()));
    }
    if block_size == 0 || minibatch_size == 0 {
        return Err(Error::Config(
            "block and mini-batch sizes must be positive".into(),
        ));
    }
    if !block_size.is_multiple_of(minibatch_size) {
        return Err(Error::Config(format!(
            "block size {block_size} is not divisible by mini-batch size {minibatch_size}"
        )));
    }
    let full = count / block_size;
    let dropped = count - full * block_size;
    let per_block = block_size / minibatch_size;
    let mut blocks = Vec::with_capacity(full);
    for b in 0..full {
        let start = b * block_size;
        let minibatches = (0..per_block)
            .map(|m| start + m * minibatch_size..start + (m + 1) * minibatch_size)
            .collect();
        blocks.push(DataBlock {
            block_index: b,
            minibatches,
        });
    }
    Ok((blocks, dropped))
}

/// A container packed into blocks and served as (m, H, W, C) minibatch
/// tensors, optionally standardized per image. Immutable once built, so
/// concurrent readers are safe.
#[derive(Debug, Clone)]
pub struct BlockSource {
    dims: (usize, usize, usize),
    minibatch_size: usize,
    blocks: Vec<DataBlock>,
    dropped: usize,
    /// All images, already converted to f64 (and standardized when asked).
    pixels: Vec<f64>,
}

impl BlockSource {
    pub fn from_container(
        c: &DatasetContainer,
        block_size: usize,
        minibatch_size: usize,
        standardize: bool,
    ) -> Result<Self> {
        let (blocks, dropped) = pack_blocks(c.len(), block_size, minibatch_size)?;
        let n = c.image_len();
        let mut pixels = Vec::with_capacity(c.len() * n);
        for i in 0..c.len() {
            let img = c.image_tensor(i);
            let img = if standardize {
                standardize_image(&img)?
            } else {
                img
            };
            pixels.extend_from_slice(img.data());
        }
        Ok(Self {
            dims: (c.height, c.width, c.channels),
            minibatch_size,
            blocks,
            dropped,
            pixels,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn minibatches_per_block(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.minibatches.len())
    }

    pub fn minibatch_size(&self) -> usize {
        self.minibatch_size
    }

    /// Images dropped from the trailing partial block.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Total images available (packed or not).
    pub fn num_images(&self) -> usize {
        let (h, w, c) = self.dims;
        self.pixels.len() / (h * w * c)
    }

    /// Minibatch `mb` of block `block` as an (m, H, W, C) tensor.
    pub fn minibatch(&self, block: usize, mb: usize) -> Result<Tensor> {
        let b = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::Data(format!("block {block} out of range")))?;
        let range = b
            .minibatches
            .get(mb)
            .ok_or_else(|| Error::Data(format!("mini-batch {mb} out of range in block {block}")))?
            .clone();
        self.image_range(range)
    }

    /// Arbitrary image range as a batch tensor; used by streaming forward
    /// passes that also cover the images outside full blocks.
    pub fn image_range(&self, range: std::ops::Range<usize>) -> Result<Tensor> {
        let (h, w, c) = self.dims;
        let n = h * w * c;
        if range.end > self.num_images() || range.start >= range.end {
            return Err(Error::Data(format!(
                "image range {range:?} out of bounds for {} images",
                self.num_images()
            )));
        }
        let m = range.len();
        let data = self.pixels[range.start * n..range.end * n].to_vec();
        Tensor::new(vec![m, h, w, c], data)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Resize so the smaller dimension equals `target` (bilinear, half-pixel
/// centers, round-half-up output extents), then center-crop the longer
/// dimension to `target`.
pub fn preprocess_image(img: &Tensor, target: usize) -> Result<Tensor> {
    if img.shape().len() != 3 {
        return Err(Error::Shape {
            context: "preprocess expects an (H, W, C) image".into(),
            left: img.shape().to_vec(),
            right: vec![],
        });
    }
    let (h, w, ch) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if h == 0 || w == 0 || target == 0 {
        return Err(Error::Data(format!(
            "degenerate image {h}x{w} or target {target}"
        )));
    }
    let scale = target as f64 / h.min(w) as f64;
    let (out_h, out_w) = if h <= w {
        (target, round_half_up(w as f64 * scale))
    } else {
        (round_half_up(h as f64 * scale), target)
    };
    let scaled = bilinear_resize(img, out_h, out_w)?;

    let row_off = (out_h - target) / 2;
    let col_off = (out_w - target) / 2;
    let mut out = Vec::with_capacity(target * target * ch);
    for r in 0..target {
        for c in 0..target {
            for k in 0..ch {
                out.push(scaled.data()[((r + row_off) * out_w + (c + col_off)) * ch + k]);
            }
        }
    }
    Tensor::new(vec![target, target, ch], out)
}

/// Bilinear resample with half-pixel source mapping
/// `src = (dst + 0.5) * in/out - 0.5`, clamped at the borders.
pub fn bilinear_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, ch) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let data = img.data();
    let mut out = vec![0.0; out_h * out_w * ch];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for r in 0..out_h {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for c in 0..out_w {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for k in 0..ch {
                let p00 = data[(y0 * w + x0) * ch + k];
                let p01 = data[(y0 * w + x1) * ch + k];
                let p10 = data[(y1 * w + x0) * ch + k];
                let p11 = data[(y1 * w + x1) * ch + k];
                let top = p00 + (p01 - p00) * wx;
                let bottom = p10 + (p11 - p10) * wx;
                out[(r * out_w + c) * ch + k] = top + (bottom - top) * wy;
            }
        }
    }
    Tensor::new(vec![out_h, out_w, ch], out)
}

/// Per-image standardization: subtract the channel mean, divide by the
/// channel's population std floored at 1e-8.
pub fn standardize_image(img: &Tensor) -> Result<Tensor> {
    if img.shape().len() != 3 {
        return Err(Error::Shape {
            context: "standardize expects an (H, W, C) image".into(),
            left: img.shape().to_vec(),
            right: vec![],
        });
    }
    let (h, w, ch) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let pixels = (h * w) as f64;
    let data = img.data();
    let mut out = vec![0.0; data.len()];
    for k in 0..ch {
        let mut mean = 0.0;
        for p in 0..h * w {
            mean += data[p * ch + k];
        }
        mean /= pixels;
        let mut var = 0.0;
        for p in 0..h * w {
            let d = data[p * ch + k] - mean;
            var += d * d;
        }
        let std = (var / pixels).sqrt().max(1e-8);
        for p in 0..h * w {
            out[p * ch + k] = (data[p * ch + k] - mean) / std;
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

fn standard_normal_f64(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Generate the synthetic oriented-edge corpus: grayscale `side x side`
/// images, each a half-plane step edge at one of the class orientations
/// (two classes: 0 and 90 degrees; four: 0, 45, 90, 135) plus Gaussian
/// noise. Classes cycle round-robin, so counts are exactly stratified when
/// `classes` divides `n`. Fully determined by the seed.
pub fn gen_synthetic(
    n: usize,
    side: usize,
    classes: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(DatasetContainer, Vec<u32>)> {
    if classes != 2 && classes != 4 {
        return Err(Error::Config(format!(
            "classes must be 2 or 4, got {classes}"
        )));
    }
    if side < 8 {
        return Err(Error::Config(format!(
            "side must be at least 8, got {side}"
        )));
    }
    if noise_sigma.is_nan() || noise_sigma < 0.0 {
        return Err(Error::Config(format!(
            "noise sigma must be non-negative, got {noise_sigma}"
        )));
    }
    let mut container = DatasetContainer::new(side, side, 1)?;
    let mut labels = Vec::with_capacity(n);
    let mut rng = derived_rng(seed, RngPurpose::DataGen, 0, 0);
    let center = (side as f64 - 1.0) / 2.0;
    let mut img = vec![0.0f32; side * side];
    for i in 0..n {
        let class = (i % classes) as u32;
        let theta = class as f64 * std::f64::consts::PI / classes as f64;
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        for r in 0..side {
            for c in 0..side {
                let d = (r as f64 - center) * cos_t + (c as f64 - center) * sin_t;
                let base = if d < 0.0 { 0.0 } else { 1.0 };
                let noise = if noise_sigma > 0.0 {
                    noise_sigma * standard_normal_f64(&mut rng)
                } else {
                    0.0
                };
                img[r * side + c] = (base + noise) as f32;
            }
        }
        container.push_image(&img)?;
        labels.push(class);
    }
    Ok((container, labels))
}
