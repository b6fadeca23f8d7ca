use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use s4fusion::bench::{self, BenchConfig};
use s4fusion::cmsa::{delta_rows, write_delta_csv, BlockDeltaTrace};
use s4fusion::io::config::RunConfig;
use s4fusion::io::pnm::{self, Image};
use s4fusion::io::{atomic_write, weights};
use s4fusion::loss::{entropy_histogram, loss_report, quality_metrics, PooledLinearProvider};
use s4fusion::network::{fuse_forward_with, FusionMode, ModelWeights};
use s4fusion::verify::{self, Suite, VerifyOptions};
use s4fusion::Tensor;

macro_rules! config_help {
    () => {
        "JSON run configuration. Every key is optional; unknown keys are rejected.
Keys: n_layers, k_blocks, vss_counts, channels, patch_size, overlap, hidden,
mode (\"euler\"|\"zoh\"), seed, skip_d, chunk, fusion (\"cmsa\"|\"add\"),
provider_seed, classes, alpha1, alpha2, alpha3, ir, vis, weights, out."
    };
}

#[derive(Parser)]
#[command(name = "s4fusion", version, about = "Infrared/visible image fusion with cross-modal selective state spaces")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded S4FW weight file for a configuration.
    #[command(after_help = config_help!())]
    InitWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse an infrared and a visible image.
    ///
    /// Inputs are binary PGM (P5) or PPM (P6) with maxval 255 and equal extents.
    /// Only luminance is fused; when the visible input is colour its chroma is
    /// carried into a P6 output, otherwise the output is P5.
    #[command(after_help = concat!("Metrics JSON: {\"sf\": f64, \"ag\": f64} on a 0..255 scale.
Feature dumps: layer<l>_<ir|vi|fused>.pgm per encoder layer (l from 1), the
channel mean of each grid rescaled to the full gray range.

", config_help!()))]
    Fuse {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write an SF/AG report of the fused image.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Directory for per-layer feature maps.
        #[arg(long)]
        dump_features: Option<PathBuf>,
        /// Fusion module: cmsa or add (ablation).
        #[arg(long)]
        fusion: Option<FusionMode>,
    },
    /// Run the built-in oracle suites; exits 1 when any check fails.
    #[command(after_help = "Prints one line per check: PASS|FAIL <suite>/<name>: worst <err> (bound <b>, <n> cases).")]
    Verify {
        #[arg(long, default_value = "all", value_parser = ["scan", "grad", "roundtrip", "all"])]
        suite: String,
        /// Random cases for the scan comparison.
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the chunked scan across sequence lengths.
    #[command(after_help = "CSV: header `L,ns_per_element`, one row per length. ns_per_element is the best
wall time divided by L * channels * hidden.")]
    BenchScan {
        #[arg(long, value_delimiter = ',', default_values_t = [4096usize, 8192, 16384, 32768, 65536])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        #[arg(long, default_value_t = 64)]
        chunk: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average step sizes of the fusion blocks over one or more image pairs.
    #[command(after_help = "CSV: header `layer,block,modality,pre_mean,post_mean`. layer and block count
from 1; block `all` aggregates every block of the layer. pre_mean averages the
step size before softplus, post_mean after it.")]
    StatsDelta {
        #[command(flatten)]
        run: RunArgs,
        /// Additional infrared/visible pairs, aligned with --more-vis.
        #[arg(long)]
        more_ir: Vec<PathBuf>,
        #[arg(long)]
        more_vis: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spatial frequency and average gradient of an image.
    #[command(after_help = "JSON: {\"sf\": f64, \"ag\": f64} on a 0..255 scale, computed on luminance.")]
    Metrics {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every objective term for a fused image against its sources.
    #[command(after_help = "JSON: {\"components\": {\"perception\", \"l1\", \"ssim\", \"grad\"},
\"weights\": {\"alpha1\", \"alpha2\", \"alpha3\"}, \"omega_ir\", \"omega_vi\", \"total\"}.
The perception term uses a seeded pooled linear classifier (provider_seed, classes).")]
    Loss {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of classifier entropies over a set of images.
    #[command(after_help = "CSV: header `entropy,count`, one row per bin at the bin centre, bins spanning
[0, ln classes].")]
    EntropyHist {
        #[arg(long, required = true, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Infrared image; falls back to the configuration's `ir`.
    #[arg(long)]
    ir: Option<PathBuf>,
    /// Visible image; falls back to the configuration's `vis`.
    #[arg(long)]
    vis: Option<PathBuf>,
    /// S4FW weight file; falls back to the configuration's `weights`.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn pick(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone()).with_context(|| format!("missing --{what}"))
}

/// Writes to `path` atomically, or to stdout when absent.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => atomic_write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<Image> {
    pnm::read_image(path).with_context(|| format!("reading {}", path.display()))
}

fn column(luma: &Tensor) -> Result<Tensor> {
    let (h, w) = luma.dims2()?;
    Ok(luma.clone().reshape(&[h, w, 1])?)
}

fn same_extent(a: &Image, b: &Image) -> Result<()> {
    if a.luma.shape() != b.luma.shape() {
        bail!("infrared is {:?} but visible is {:?}", a.luma.shape(), b.luma.shape());
    }
    Ok(())
}

/// Channel mean of a `[h, w, c]` grid, min-max rescaled to `[0, 1]`.
fn feature_map(grid: &Tensor) -> Result<Tensor> {
    let (h, w, c) = grid.dims3()?;
    let mean: Vec<f64> = grid.data().chunks_exact(c).map(|px| px.iter().sum::<f64>() / c as f64).collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(Tensor::new(vec![h, w], mean.into_iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect())?)
}

fn json(value: &impl serde::Serialize) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn metrics_json(luma: &Tensor) -> Result<Vec<u8>> {
    let m = quality_metrics(luma, 255.0)?;
    json(&serde_json::json!({ "sf": m.sf, "ag": m.ag }))
}

fn init_weights(config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = pick(out, &cfg.weights, "out")?;
    let w = ModelWeights::init(&cfg.fusion_config())?;
    weights::weights_save(&out, &w).with_context(|| format!("writing {}", out.display()))
}

struct Loaded {
    cfg: RunConfig,
    weights: ModelWeights,
    ir: Image,
    vis: Image,
}

fn load_run(run: RunArgs) -> Result<Loaded> {
    let cfg = load_config(run.config.as_deref())?;
    let wp = pick(run.weights, &cfg.weights, "weights")?;
    let weights = weights::weights_load(&wp, &cfg.fusion_config()).with_context(|| format!("loading weights {}", wp.display()))?;
    let ir = read(&pick(run.ir, &cfg.ir, "ir")?)?;
    let vis = read(&pick(run.vis, &cfg.vis, "vis")?)?;
    same_extent(&ir, &vis)?;
    Ok(Loaded { cfg, weights, ir, vis })
}

fn fuse(run: RunArgs, out: Option<PathBuf>, metrics: Option<PathBuf>, dump: Option<PathBuf>, fusion: Option<FusionMode>) -> Result<()> {
    let Loaded { mut cfg, weights, ir, vis } = load_run(run)?;
    if let Some(f) = fusion {
        cfg.fusion = f;
    }
    let out = pick(out, &cfg.out, "out")?;
    let res = fuse_forward_with(&column(&ir.luma)?, &column(&vis.luma)?, &weights, &cfg.fusion_config(), &cfg.forward_options())?;
    let (h, w) = ir.luma.dims2()?;
    let luma = res.image.reshape(&[h, w])?;
    if let Some(dir) = dump {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (l, f) in res.layers.iter().enumerate() {
            for (tag, grid) in [("ir", &f.ir), ("vi", &f.vi), ("fused", &f.fused)] {
                let p = dir.join(format!("layer{}_{tag}.pgm", l + 1));
                pnm::write_image(&p, &Image::gray(feature_map(grid)?)).with_context(|| format!("writing {}", p.display()))?;
            }
        }
    }
    if let Some(m) = metrics {
        emit(Some(&m), &metrics_json(&luma)?)?;
    }
    let img = Image { luma, chroma: vis.chroma };
    pnm::write_image(&out, &img).with_context(|| format!("writing {}", out.display()))
}

fn stats_delta(run: RunArgs, more_ir: Vec<PathBuf>, more_vis: Vec<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    if more_ir.len() != more_vis.len() {
        bail!("--more-ir and --more-vis must be given the same number of times");
    }
    let Loaded { cfg, weights, ir, vis } = load_run(run)?;
    if cfg.fusion == FusionMode::Add {
        bail!("step-size statistics need the cmsa fusion module");
    }
    let mut opts = cfg.forward_options();
    opts.trace_delta = true;
    let fc = cfg.fusion_config();
    let mut pairs = vec![(ir, vis)];
    for (i, v) in more_ir.iter().zip(&more_vis) {
        let (i, v) = (read(i)?, read(v)?);
        same_extent(&i, &v)?;
        pairs.push((i, v));
    }
    let mut total: Vec<Vec<BlockDeltaTrace>> = Vec::new();
    for (i, v) in &pairs {
        let res = fuse_forward_with(&column(&i.luma)?, &column(&v.luma)?, &weights, &fc, &opts)?;
        if total.is_empty() {
            total = res.delta;
            continue;
        }
        for (acc, layer) in total.iter_mut().zip(&res.delta) {
            for (a, b) in acc.iter_mut().zip(layer) {
                a.ir.merge(&b.ir);
                a.vi.merge(&b.vi);
            }
        }
    }
    let mut buf = Vec::new();
    write_delta_csv(&delta_rows(&total), &mut buf)?;
    emit(out.as_deref(), &buf)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::InitWeights { config, seed, out } => init_weights(config, seed, out)?,
        Cmd::Fuse { run, out, metrics, dump_features, fusion } => fuse(run, out, metrics, dump_features, fusion)?,
        Cmd::Verify { suite, cases, seed } => {
            let suite: Suite = suite.parse()?;
            let checks = verify::run(suite, &VerifyOptions { cases, seed });
            for c in &checks {
                println!("{c}");
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::BenchScan { lengths, channels, hidden, chunk, repeats, threads, out } => {
            let cfg = BenchConfig { lengths, channels, hidden, chunk, repeats, threads, ..BenchConfig::default() };
            let rows = bench::bench_scan(&cfg)?;
            let mut buf = Vec::new();
            bench::write_csv(&rows, &mut buf)?;
            emit(out.as_deref(), &buf)?;
        }
        Cmd::StatsDelta { run, more_ir, more_vis, out } => stats_delta(run, more_ir, more_vis, out)?,
        Cmd::Metrics { image, out } => emit(out.as_deref(), &metrics_json(&read(&image)?.luma)?)?,
        Cmd::Loss { fused, ir, vis, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let (f, i, v) = (read(&fused)?, read(&ir)?, read(&vis)?);
            same_extent(&i, &v)?;
            same_extent(&f, &i)?;
            let provider = PooledLinearProvider::new(cfg.provider_seed, cfg.classes);
            let report = loss_report(&f.luma, &i.luma, &v.luma, &provider, &cfg.loss_weights())?;
            emit(out.as_deref(), &json(&report)?)?;
        }
        Cmd::EntropyHist { images, bins, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let lumas = images.iter().map(|p| read(p).map(|i| i.luma)).collect::<Result<Vec<_>>>()?;
            let provider = PooledLinearProvider::new(cfg.provider_seed, cfg.classes);
            let hist = entropy_histogram(&lumas, &provider, bins)?;
            let mut buf = Vec::new();
            hist.write_csv(&mut buf)?;
            emit(out.as_deref(), &buf)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors before reaching here.
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
