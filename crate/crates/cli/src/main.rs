//! `planefit` command-line tool: render synthetic depth frames, fit planes,
//! segment depth images and run the timing benchmark.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on data errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use planefit::bench::{run_bench, BenchConfig};
use planefit::camera::{compute_tan_maps, CameraIntrinsics, NoiseModel, TanAngleMaps};
use planefit::fitting::{fit_rect_integral, fit_rect_naive, Backend, FitResult, Formulation};
use planefit::integral::{build_constant_channels, build_frame_channels, Rect, StackOptions};
use planefit::io::write_pgm8;
use planefit::segment::{ErrorMetric, SegConfig, Segmenter, TileStatus};
use planefit::synth::{render_scene, DepthImage, DepthNoise, RenderOptions, SyntheticScene};

#[derive(Parser, Debug)]
#[command(name = "planefit", version, about = "Plane fitting on organized depth images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a plane scene to a depth image and a ground-truth label image.
    Synth(SynthArgs),
    /// Fit one plane to a rectangle of a depth image; prints a CSV row.
    Fit(FitArgs),
    /// Quadtree plane segmentation; writes a colour PPM and a tile CSV.
    Segment(SegmentArgs),
    /// Time channel builds and fits for every formulation; writes CSV.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CameraPreset {
    /// 640x480, f = 525
    Vga,
    /// 512x424, f = 365
    Tof,
}

#[derive(Args, Debug)]
struct CameraArgs {
    /// Intrinsics file (key = value lines: fx, fy, cx, cy, width, height,
    /// optional distortion).
    #[arg(long, value_name = "PATH")]
    intrinsics: Option<PathBuf>,
    /// Built-in camera used when no intrinsics file is given.
    #[arg(long, value_enum, default_value = "vga")]
    camera: CameraPreset,
}

impl CameraArgs {
    fn load(&self) -> Result<CameraIntrinsics> {
        match &self.intrinsics {
            Some(p) => CameraIntrinsics::load(p).with_context(|| format!("intrinsics file {}", p.display())),
            None => Ok(match self.camera {
                CameraPreset::Vga => CameraIntrinsics::vga_default(),
                CameraPreset::Tof => CameraIntrinsics::tof_default(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DepthFormat {
    /// 16-bit PGM in millimetres, 0 = invalid
    Pgm,
    /// Lossless float64 lattice
    Raw,
}

/// `off`, `quadratic[:coefficient]` or `fixed:<sigma metres>`.
fn parse_noise(s: &str) -> Result<DepthNoise, String> {
    let (kind, arg) = match s.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (s, None),
    };
    let num = |a: &str| a.parse::<f64>().map_err(|_| format!("bad number {a:?}"));
    match (kind, arg) {
        ("off", None) => Ok(DepthNoise::Off),
        ("quadratic", None) => Ok(DepthNoise::Quadratic(NoiseModel::default())),
        ("quadratic", Some(a)) => NoiseModel::new(num(a)?).map(DepthNoise::Quadratic).map_err(|e| e.to_string()),
        ("fixed", Some(a)) => {
            let s = num(a)?;
            if s.is_finite() && s >= 0.0 {
                Ok(DepthNoise::Fixed(s))
            } else {
                Err(format!("fixed sigma must be non-negative, got {s}"))
            }
        }
        _ => Err("expected off, quadratic[:coefficient] or fixed:<sigma>".into()),
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("bad number {s:?}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("bad number {s:?}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not positive"))
    }
}

fn parse_formulation(s: &str) -> Result<Formulation, String> {
    s.parse().map_err(|e: planefit::Error| e.to_string())
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse().map_err(|e: planefit::Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<ErrorMetric, String> {
    s.parse().map_err(|e: planefit::Error| e.to_string())
}

fn parse_rect(s: &str) -> Result<Rect, String> {
    s.parse().map_err(|e: planefit::Error| e.to_string())
}

const FORMULATIONS: &str = "implicit-standard, implicit-rgbd, explicit-standard, explicit-rgbd";

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    camera: CameraArgs,
    /// Scene file, one plane per line: `a b c d [x0,y0,x1,y1]`. Defaults to
    /// a three-plane room corner.
    #[arg(long, value_name = "PATH")]
    scene: Option<PathBuf>,
    /// Depth noise: off, quadratic[:coefficient] or fixed:<sigma>.
    #[arg(long, default_value = "quadratic", value_parser = parse_noise)]
    noise: DepthNoise,
    /// Fraction of pixels randomly invalidated.
    #[arg(long, default_value = "0", value_parser = parse_fraction)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "pgm")]
    format: DepthFormat,
    /// Depth output file.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Label output (8-bit PGM, 255 = no plane). Defaults to
    /// `<out>.labels.pgm`.
    #[arg(long, value_name = "PATH")]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    camera: CameraArgs,
    /// Depth image (16-bit PGM or raw float64).
    #[arg(long, value_name = "PATH")]
    depth: PathBuf,
    #[arg(long, value_parser = parse_formulation, help = format!("One of: {FORMULATIONS}"))]
    formulation: Formulation,
    /// naive or integral
    #[arg(long, default_value = "integral", value_parser = parse_backend)]
    backend: Backend,
    /// Half-open rectangle x0,y0,x1,y1; defaults to the whole image.
    #[arg(long, value_parser = parse_rect)]
    rect: Option<Rect>,
    /// Print the CSV header first.
    #[arg(long)]
    header: bool,
    /// Unused by fitting; accepted for a uniform command line.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the row here instead of standard output.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[command(flatten)]
    camera: CameraArgs,
    /// Depth image (16-bit PGM or raw float64).
    #[arg(long, value_name = "PATH")]
    depth: PathBuf,
    #[arg(long, default_value = "implicit-rgbd", value_parser = parse_formulation, help = format!("One of: {FORMULATIONS}"))]
    formulation: Formulation,
    /// naive or integral
    #[arg(long, default_value = "integral", value_parser = parse_backend)]
    backend: Backend,
    /// Initial tile side in pixels.
    #[arg(long, default_value_t = 64)]
    tile: usize,
    /// Subdivision levels below the initial grid.
    #[arg(long, default_value_t = 3)]
    max_depth: usize,
    /// Residual threshold in the formulation's metric (default: 0.02 m for
    /// explicit-standard, 8e-3 otherwise).
    #[arg(long, value_parser = parse_positive)]
    threshold: Option<f64>,
    /// rms or max
    #[arg(long, default_value = "rms", value_parser = parse_metric)]
    metric: ErrorMetric,
    /// Tiles with fewer valid pixels than this fraction are rejected.
    #[arg(long, default_value = "0.5", value_parser = parse_fraction)]
    min_valid: f64,
    /// Cluster count.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..=255))]
    k: u64,
    /// Offset scale for clustering features, metres.
    #[arg(long, default_value = "5", value_parser = parse_positive)]
    d_scale: f64,
    /// k-means restarts.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    restarts: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Colour label image (PPM).
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Leaf tile CSV; defaults to `<out>.csv`.
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    camera: CameraArgs,
    /// Fit window side in pixels.
    #[arg(long, default_value_t = 50)]
    tile: usize,
    /// Comma-separated plane counts.
    #[arg(long, value_delimiter = ',', default_value = "0,1,10,50,100,200,500")]
    plane_counts: Vec<usize>,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(3..))]
    reps: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    warmup: u64,
    /// Comma-separated formulations; all by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_formulation)]
    formulations: Vec<Formulation>,
    /// Comma-separated backends; both by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_backend)]
    backends: Vec<Backend>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output; standard output when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Plot-friendly median summary.
    #[arg(long, value_name = "PATH")]
    summary: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_depth(path: &Path, maps: &TanAngleMaps) -> Result<DepthImage> {
    let depth = DepthImage::read(path).with_context(|| format!("depth image {}", path.display()))?;
    if depth.dims() != maps.dims() {
        bail!(
            "depth image {} is {}x{} but the camera is {}x{}",
            path.display(),
            depth.width(),
            depth.height(),
            maps.width(),
            maps.height()
        );
    }
    Ok(depth)
}

fn synth(args: &SynthArgs) -> Result<()> {
    let intrinsics = args.camera.load()?;
    let maps = compute_tan_maps(&intrinsics);
    let scene = match &args.scene {
        Some(p) => SyntheticScene::load(p).with_context(|| format!("scene file {}", p.display()))?,
        None => SyntheticScene::room_corner(),
    };
    let options = RenderOptions {
        noise: args.noise,
        dropout: args.dropout,
        seed: args.seed,
    };
    let rendered = render_scene(&scene, &maps, &options)?;
    let write = match args.format {
        DepthFormat::Pgm => DepthImage::write_pgm,
        DepthFormat::Raw => DepthImage::write_raw,
    };
    write(&rendered.depth, &args.out).with_context(|| format!("cannot write {}", args.out.display()))?;
    let labels_path = args.labels.clone().unwrap_or_else(|| with_suffix(&args.out, ".labels.pgm"));
    let mut w = create(&labels_path)?;
    write_pgm8(&mut w, &rendered.labels)?;
    w.flush()?;
    eprintln!(
        "rendered {} planes, {} of {} pixels valid",
        scene.planes().len(),
        rendered.depth.valid_count(),
        intrinsics.width() * intrinsics.height()
    );
    Ok(())
}

fn fit(args: &FitArgs) -> Result<()> {
    let maps = compute_tan_maps(&args.camera.load()?);
    let depth = load_depth(&args.depth, &maps)?;
    let rect = args.rect.unwrap_or_else(|| Rect::full(depth.width(), depth.height()));
    let f = args.formulation;
    let result = match args.backend {
        Backend::Naive => fit_rect_naive(&depth, &maps, &rect, f),
        Backend::Integral => {
            let frame = build_frame_channels(f, &depth, &maps, StackOptions { residual: true })?;
            let constant = f.is_rgbd().then(|| build_constant_channels(&maps));
            fit_rect_integral(&frame, constant.as_ref(), &rect, f)
        }
    }
    .with_context(|| format!("fitting rect {rect} of {}", args.depth.display()))?;
    if result.degenerate {
        eprintln!("warning: degenerate fit on rect {rect}");
    }
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    if args.header {
        writeln!(out, "{}", FitResult::CSV_HEADER)?;
    }
    writeln!(out, "{}", result.csv_row(args.backend, &rect))?;
    out.flush()?;
    Ok(())
}

fn segment(args: &SegmentArgs) -> Result<()> {
    let maps = compute_tan_maps(&args.camera.load()?);
    let depth = load_depth(&args.depth, &maps)?;
    let mut config = SegConfig::new(args.formulation, args.backend);
    config.initial_tile = args.tile;
    config.max_depth = args.max_depth;
    if let Some(t) = args.threshold {
        config.threshold = t;
    }
    config.metric = args.metric;
    config.min_valid_fraction = args.min_valid;
    config.k = args.k as usize;
    config.d_scale = args.d_scale;
    config.restarts = args.restarts as usize;
    config.seed = args.seed;
    let seg = Segmenter::new(config, maps)?.segment(&depth)?;
    seg.write_ppm(&depth, &args.out)
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    let csv_path = args.csv.clone().unwrap_or_else(|| with_suffix(&args.out, ".csv"));
    let mut w = create(&csv_path)?;
    seg.write_csv(&mut w)?;
    w.flush()?;
    if seg.k_clamped {
        eprintln!("warning: k clamped to {} fitted tiles", seg.centroids.len());
    }
    eprintln!(
        "{} leaf tiles: {} fitted, {} too invalid, {} high error; {} clusters",
        seg.tiles.len(),
        seg.count(TileStatus::Fitted),
        seg.count(TileStatus::TooInvalid),
        seg.count(TileStatus::HighErrorLeaf),
        seg.centroids.len()
    );
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    let formulations = if args.formulations.is_empty() {
        Formulation::ALL.to_vec()
    } else {
        args.formulations.clone()
    };
    let backends = if args.backends.is_empty() {
        Backend::ALL.to_vec()
    } else {
        args.backends.clone()
    };
    let config = BenchConfig {
        intrinsics: args.camera.load()?,
        tile: args.tile,
        plane_counts: args.plane_counts.clone(),
        repetitions: args.reps as usize,
        warmup: args.warmup as usize,
        methods: formulations
            .iter()
            .flat_map(|&f| backends.iter().map(move |&b| (f, b)))
            .collect(),
        seed: args.seed,
    };
    let report = run_bench(&config)?;
    match &args.out {
        Some(p) => {
            let mut w = create(p)?;
            report.write_csv(&mut w)?;
            w.flush()?;
        }
        None => report.write_csv(&mut std::io::stdout().lock())?,
    }
    if let Some(p) = &args.summary {
        let mut w = create(p)?;
        report.write_summary(&mut w)?;
        w.flush()?;
    }
    for r in &report.ratios {
        eprintln!("{}: median {:.3} (min {:.3}, max {:.3})", r.name, r.median, r.min, r.max);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::Segment(a) => segment(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
