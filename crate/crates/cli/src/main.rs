//! Command-line driver: dataset generation, preprocessing, pipelined
//! training, dataset forwarding, top-K stimuli, filter visualization, and
//! the communication report.
//!
//! Configuration comes from plain-text `key=value` files; command-line
//! flags override file values, and `--print-config` prints the effective
//! configuration and exits. Exit codes: 0 success, 2 config error, 3 data
//! error, 4 numeric error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ufl_core::analysis::{
    forward_dataset, modal_label_rate, render_filter_grid, top_k_streaming, Checkpoint, RasterImage,
};
use ufl_core::config::{parse_layer_chain, RunConfig};
use ufl_core::datapipe::{
    gen_synthetic, preprocess_image, read_manifest, standardize_image, write_manifest, BlockSource,
    DatasetContainer,
};
use ufl_core::distsim::{
    dist_forward, partition_network, predicted_comm_bytes, render_comm_report,
};
use ufl_core::error::{Error, Result};
use ufl_core::network::{param_count, published_param_report, Layer, Network};
use ufl_core::pipeline::{run_pipeline, train_sequential};

#[derive(Parser)]
#[command(name = "ufl", version, about = "Desk-scale RICA feature learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Plain-text key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic oriented-edge dataset container.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output container path.
        #[arg(long)]
        out: PathBuf,
        /// Class manifest path (tab-separated index, class).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Number of images.
        #[arg(long, default_value_t = 4000)]
        n: usize,
        /// Image side length.
        #[arg(long, default_value_t = 32)]
        side: usize,
        /// Orientation classes (2 or 4).
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Gaussian pixel noise sigma.
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        /// Generator seed; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Resize-and-crop a container to a square target size.
    Preprocess {
        /// Input container.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output container.
        #[arg(long)]
        out: PathBuf,
        /// Target side length.
        #[arg(long, default_value_t = 300)]
        target: usize,
        /// Also standardize each image per channel.
        #[arg(long)]
        standardize: bool,
    },
    /// Train the configured network with the pipelined layer-wise trainer.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training data container.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train-log output path (tab-separated records).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override warmup_blocks.
        #[arg(long)]
        warmup_blocks: Option<usize>,
        /// Override sync_period_blocks.
        #[arg(long)]
        sync_period: Option<usize>,
        /// Override the layer chain spec.
        #[arg(long)]
        layers: Option<String>,
        /// Use strict sequential layer-wise training instead of the pipeline.
        #[arg(long)]
        sequential: bool,
        /// Print the parameter-count report for the configured chain
        /// ('config') or the published topology ('published') and exit.
        #[arg(long, value_name = "WHICH")]
        param_count: Option<String>,
    },
    /// Forward a dataset through a checkpoint into an activation matrix.
    Forward {
        /// Checkpoint path.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset container.
        #[arg(long)]
        data: PathBuf,
        /// Activation matrix output (TSV); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional config that must match the checkpoint's embedded config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Report the top-K stimulus images per top-layer neuron.
    TopStimuli {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Stimuli per neuron.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Class manifest; adds a class column and modal-rate summary.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output TSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render an untied layer field's filters as a tiled image.
    VizFilters {
        #[arg(long)]
        ckpt: PathBuf,
        /// Output image path (PNG).
        #[arg(long)]
        out: PathBuf,
        /// Layer index to visualize.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Field grid cell as `row,col`.
        #[arg(long, default_value = "0,0")]
        field: String,
    },
    /// Predicted vs logged communication volume per layer boundary.
    CommReport {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Logical worker count.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Checkpoint to analyze; a fresh seeded network is used otherwise.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Mini-batch size for the probe; defaults to the config value.
        #[arg(long)]
        minibatch: Option<usize>,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_output(path: &Option<PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            std::fs::write(p, text)?;
            Ok(())
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_source(cfg: &RunConfig, path: &Path) -> Result<BlockSource> {
    let container = DatasetContainer::load(path)?;
    BlockSource::from_container(
        &container,
        cfg.block_size,
        cfg.minibatch_size,
        cfg.standardize,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_gen_data(
    cfg: ConfigArgs,
    out: PathBuf,
    manifest: Option<PathBuf>,
    n: usize,
    side: usize,
    classes: usize,
    sigma: f64,
    seed: Option<u64>,
) -> Result<()> {
    let run = cfg.load()?;
    if cfg.print_config {
        print!("{}", run.render());
        return Ok(());
    }
    let seed = seed.unwrap_or(run.seed);
    let (container, labels) = gen_synthetic(n, side, classes, sigma, seed)?;
    container.save(&out)?;
    if let Some(mpath) = manifest {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&mpath)?);
        write_manifest(&mut f, &labels)?;
        f.flush()?;
    }
    println!(
        "wrote {n} images ({side}x{side}x1, {classes} classes) to {}",
        out.display()
    );
    Ok(())
}

fn run_preprocess(input: PathBuf, out: PathBuf, target: usize, standardize: bool) -> Result<()> {
    let src = DatasetContainer::load(&input)?;
    let mut dst = DatasetContainer::new(target, target, src.channels)?;
    for i in 0..src.len() {
        let img = src.image_tensor(i);
        let mut processed = preprocess_image(&img, target)?;
        if standardize {
            processed = standardize_image(&processed)?;
        }
        let pixels: Vec<f32> = processed.data().iter().map(|&v| v as f32).collect();
        dst.push_image(&pixels)?;
    }
    dst.save(&out)?;
    println!(
        "preprocessed {} images to {target}x{target} -> {}",
        src.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    cfg: ConfigArgs,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    log_path: Option<PathBuf>,
    seed: Option<u64>,
    warmup_blocks: Option<usize>,
    sync_period: Option<usize>,
    layers: Option<String>,
    sequential: bool,
    which_param_count: Option<String>,
) -> Result<()> {
    let mut run = cfg.load()?;
    if let Some(s) = seed {
        run.seed = s;
    }
    if let Some(w) = warmup_blocks {
        run.warmup_blocks = w;
    }
    if let Some(s) = sync_period {
        run.sync_period_blocks = s;
    }
    if let Some(spec) = &layers {
        run.layers = parse_layer_chain(spec)?;
    }
    if cfg.print_config {
        print!("{}", run.render());
        return Ok(());
    }
    if let Some(which) = which_param_count {
        let report = match which.as_str() {
            "published" => published_param_report(),
            "config" => param_count(run.input, &run.layers)?,
            other => {
                return Err(Error::Config(format!(
                    "--param-count takes 'config' or 'published', got '{other}'"
                )))
            }
        };
        print!("{}", report.render());
        return Ok(());
    }
    let data = data.ok_or_else(|| Error::Config("train needs --data".into()))?;
    let source = load_source(&run, &data)?;
    if source.dropped() > 0 {
        eprintln!(
            "note: {} trailing images did not fill a block and were dropped",
            source.dropped()
        );
    }
    let (network, log) = if sequential {
        train_sequential(&run, &source)?
    } else {
        run_pipeline(&run, &source)?
    };
    if let Some(p) = &log_path {
        std::fs::write(p, log.render())?;
    }
    let ckpt = Checkpoint::new(run, network);
    match out {
        Some(p) => {
            ckpt.save(&p)?;
            let hash = ckpt.content_hash();
            println!("checkpoint {} (sha256 {})", p.display(), hex_string(&hash));
        }
        None => println!("training finished (no --out given, checkpoint discarded)"),
    }
    Ok(())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_checkpoint(ckpt: &Path, config: &Option<PathBuf>) -> Result<Checkpoint> {
    let loaded = Checkpoint::load(ckpt)?;
    if let Some(cfg_path) = config {
        let expected = RunConfig::load(cfg_path)?;
        loaded.verify_config(&expected)?;
    }
    Ok(loaded)
}

fn run_forward(
    ckpt: PathBuf,
    data: PathBuf,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<()> {
    let ckpt = load_checkpoint(&ckpt, &config)?;
    let source = load_source(&ckpt.config, &data)?;
    let acts = forward_dataset(&ckpt.network, &source)?;
    let mut text = String::new();
    for i in 0..acts.rows() {
        text.push_str(&i.to_string());
        for j in 0..acts.cols() {
            text.push('\t');
            text.push_str(&acts.at(i, j).to_string());
        }
        text.push('\n');
    }
    write_output(&out, &text)
}

fn run_top_stimuli(
    ckpt: PathBuf,
    data: PathBuf,
    k: usize,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<()> {
    let ckpt = load_checkpoint(&ckpt, &config)?;
    let source = load_source(&ckpt.config, &data)?;
    let records = top_k_streaming(&ckpt.network, &source, k)?;
    let labels = manifest
        .map(|p| -> Result<Vec<u32>> {
            read_manifest(std::io::BufReader::new(std::fs::File::open(&p)?))
        })
        .transpose()?;
    let mut text = String::from(match &labels {
        Some(_) => "neuron\trank\timage\tactivation\tclass\n",
        None => "neuron\trank\timage\tactivation\n",
    });
    for rec in &records {
        for (rank, (image, value)) in rec.top.iter().enumerate() {
            match &labels {
                Some(l) => text.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    rec.neuron, rank, image, value, l[*image]
                )),
                None => text.push_str(&format!("{}\t{}\t{}\t{}\n", rec.neuron, rank, image, value)),
            }
        }
    }
    if let Some(l) = &labels {
        let selective = records
            .iter()
            .filter(|r| modal_label_rate(&r.top, l) > 0.25)
            .count();
        text.push_str(&format!(
            "# {selective}/{} neurons with modal-label rate above chance 0.25\n",
            records.len()
        ));
    }
    write_output(&out, &text)
}

fn save_raster(img: &RasterImage, path: &Path) -> Result<()> {
    let w = img.width as u32;
    let h = img.height as u32;
    let saved = match img.channels {
        1 => image::GrayImage::from_raw(w, h, img.pixels.clone())
            .expect("raster buffer sized by construction")
            .save(path),
        3 => image::RgbImage::from_raw(w, h, img.pixels.clone())
            .expect("raster buffer sized by construction")
            .save(path),
        other => return Err(Error::Config(format!("cannot save {other}-channel raster"))),
    };
    saved.map_err(|e| Error::Data(format!("failed to save image: {e}")))
}

fn run_viz_filters(ckpt: PathBuf, out: PathBuf, layer: usize, field: String) -> Result<()> {
    let ckpt = Checkpoint::load(&ckpt)?;
    let (r, c) = field
        .split_once(',')
        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
        .ok_or_else(|| Error::Config(format!("--field expects 'row,col', got '{field}'")))?;
    let layer = ckpt
        .network
        .layers
        .get(layer)
        .ok_or_else(|| Error::Config(format!("layer {layer} out of range")))?;
    let (w, dims) = match layer {
        Layer::Untied(u) => {
            let (gr, gc) = u.geometry.grid;
            if r >= gr || c >= gc {
                return Err(Error::Config(format!(
                    "field ({r}, {c}) outside the {gr}x{gc} grid"
                )));
            }
            let (fh, fw) = u.geometry.field_size;
            (&u.field(r, c).w, (fh, fw, u.geometry.input_dims.2))
        }
        Layer::Dense(_) => {
            return Err(Error::Config(
                "dense layers have no spatial filters to render; pick an untied layer".into(),
            ))
        }
    };
    if dims.2 != 1 && dims.2 != 3 {
        return Err(Error::Config(format!(
            "filters with {} channels cannot be rendered",
            dims.2
        )));
    }
    let k = w.rows();
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let raster = render_filter_grid(w, dims, (rows, cols))?;
    save_raster(&raster, &out)?;
    println!(
        "rendered {k} filters ({}x{} tiles) to {}",
        rows,
        cols,
        out.display()
    );
    Ok(())
}

fn run_comm_report(
    cfg: ConfigArgs,
    workers: usize,
    ckpt: Option<PathBuf>,
    minibatch: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (run, network) = match ckpt {
        Some(p) => {
            let c = Checkpoint::load(&p)?;
            (c.config, c.network)
        }
        None => {
            let run = cfg.load()?;
            let network = Network::init(&run)?;
            (run, network)
        }
    };
    if cfg.print_config {
        print!("{}", run.render());
        return Ok(());
    }
    let m = minibatch.unwrap_or(run.minibatch_size).max(1);
    let partition = partition_network(&network, workers)?;
    let predictions = predicted_comm_bytes(&network, &partition, m, run.comm_elem_bytes)?;

    // Drive one zero minibatch through the simulator so the report shows
    // logged bytes next to the prediction; traffic depends only on the
    // partition, not the pixel values.
    let (h, w, c) = run.input;
    let batch = ufl_core::tensor::Tensor::zeros(vec![m, h, w, c]);
    let (_, log) = dist_forward(&network, &partition, &batch, run.comm_elem_bytes)?;
    write_output(&out, &render_comm_report(workers, &predictions, &log))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            cfg,
            out,
            manifest,
            n,
            side,
            classes,
            sigma,
            seed,
        } => run_gen_data(cfg, out, manifest, n, side, classes, sigma, seed),
        Command::Preprocess {
            input,
            out,
            target,
            standardize,
        } => run_preprocess(input, out, target, standardize),
        Command::Train {
            cfg,
            data,
            out,
            log,
            seed,
            warmup_blocks,
            sync_period,
            layers,
            sequential,
            param_count,
        } => run_train(
            cfg,
            data,
            out,
            log,
            seed,
            warmup_blocks,
            sync_period,
            layers,
            sequential,
            param_count,
        ),
        Command::Forward {
            ckpt,
            data,
            out,
            config,
        } => run_forward(ckpt, data, out, config),
        Command::TopStimuli {
            ckpt,
            data,
            k,
            manifest,
            out,
            config,
        } => run_top_stimuli(ckpt, data, k, manifest, out, config),
        Command::VizFilters {
            ckpt,
            out,
            layer,
            field,
        } => run_viz_filters(ckpt, out, layer, field),
        Command::CommReport {
            cfg,
            workers,
            ckpt,
            minibatch,
            out,
        } => run_comm_report(cfg, workers, ckpt, minibatch, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
