//! Timing harness: per-frame channel build, per-fit cost and totals for
//! every formulation and backend, reported as medians and ratios.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use crate::camera::{compute_tan_maps, CameraIntrinsics, NoiseModel, TanAngleMaps};
use crate::error::{Error, Result};
use crate::fitting::{fit_rect_integral, fit_rect_naive, Backend, Formulation, PrecomputedRgbd};
use crate::integral::{build_constant_channels, build_frame_channels, per_frame_monomials, ChannelStack, Rect, StackOptions};
use crate::synth::{render_scene, DepthImage, DepthNoise, RenderOptions, SyntheticScene};

/// Per-frame channel count and per-pixel operation estimate for building
/// a formulation's integral images: each channel costs its monomial's
/// multiplies/divides plus four adds/lookups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCount {
    pub channels: usize,
    pub ops_per_pixel: usize,
}

pub fn op_count_audit(formulation: Formulation) -> OpCount {
    let monomials = per_frame_monomials(formulation);
    OpCount {
        channels: monomials.len(),
        ops_per_pixel: monomials.iter().map(|m| m.op_cost() + 4).sum(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Build,
    Fit,
    Total,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Build => "build",
            Phase::Fit => "fit",
            Phase::Total => "total",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub intrinsics: CameraIntrinsics,
    pub tile: usize,
    pub plane_counts: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    pub methods: Vec<(Formulation, Backend)>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::vga_default(),
            tile: 50,
            plane_counts: vec![0, 1, 10, 50, 100, 200, 500],
            repetitions: 5,
            warmup: 2,
            methods: Formulation::ALL
                .into_iter()
                .flat_map(|f| Backend::ALL.map(|b| (f, b)))
                .collect(),
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.repetitions < 3 {
            return bad(format!("repetitions must be at least 3, got {}", self.repetitions));
        }
        if self.warmup < 1 {
            return bad("warmup must be at least 1".into());
        }
        let (w, h) = self.intrinsics.dims();
        if self.tile < 2 || self.tile > w.min(h) {
            return bad(format!("tile {} does not fit a {w}x{h} image", self.tile));
        }
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        if self.plane_counts.is_empty() {
            return bad("no plane counts selected".into());
        }
        Ok(())
    }

    /// Non-overlapping `tile x tile` rects covering the image interior.
    pub fn fit_rects(&self) -> Vec<Rect> {
        let (w, h) = self.intrinsics.dims();
        let t = self.tile;
        (0..h / t)
            .flat_map(|j| (0..w / t).map(move |i| Rect::new(i * t, j * t, (i + 1) * t, (j + 1) * t).expect("ordered")))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub formulation: Formulation,
    pub backend: Backend,
    pub phase: Phase,
    pub plane_count: usize,
    pub rep: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Summary {
            min: v.first().copied().unwrap_or(f64::NAN),
            median,
            max: v.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodTimings {
    pub formulation: Formulation,
    pub backend: Backend,
    /// Channel build seconds per repetition; zero for the naive backend.
    pub build: Vec<f64>,
    /// Fit seconds per repetition, keyed by plane count.
    pub fit: BTreeMap<usize, Vec<f64>>,
}

impl MethodTimings {
    pub fn total(&self, plane_count: usize) -> Option<Vec<f64>> {
        let fit = self.fit.get(&plane_count)?;
        Some(self.build.iter().zip(fit).map(|(b, f)| b + f).collect())
    }

    /// Seconds per fit at the largest plane count, per repetition.
    pub fn per_fit(&self) -> Option<Vec<f64>> {
        let (&count, fit) = self.fit.iter().next_back()?;
        (count > 0).then(|| fit.iter().map(|t| t / count as f64).collect())
    }
}

/// `numerator / denominator` for one timing quantity: median over medians,
/// min and max over per-repetition ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct Ratio {
    pub name: String,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Ratio {
    fn from_series(name: String, num: &[f64], den: &[f64]) -> Self {
        let per_rep: Vec<f64> = num.iter().zip(den).map(|(a, b)| a / b).collect();
        let s = Summary::of(&per_rep);
        Ratio {
            name,
            median: Summary::of(num).median / Summary::of(den).median,
            min: s.min,
            max: s.max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub width: usize,
    pub height: usize,
    pub tile: usize,
    pub methods: Vec<MethodTimings>,
    pub samples: Vec<Sample>,
    pub ratios: Vec<Ratio>,
}

impl BenchReport {
    pub fn method(&self, formulation: Formulation, backend: Backend) -> Option<&MethodTimings> {
        self.methods
            .iter()
            .find(|m| m.formulation == formulation && m.backend == backend)
    }

    pub fn ratio(&self, name: &str) -> Option<&Ratio> {
        self.ratios.iter().find(|r| r.name == name)
    }

    pub const CSV_HEADER: &'static str = "method,backend,phase,plane_count,rep,seconds";

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for s in &self.samples {
            writeln!(
                w,
                "{},{},{},{},{},{:e}",
                s.formulation,
                s.backend,
                s.phase.name(),
                s.plane_count,
                s.rep,
                s.seconds
            )?;
        }
        Ok(())
    }

    /// Whitespace-separated medians, one line per method and plane count,
    /// for plotting.
    pub fn write_summary<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# method backend plane_count build_median fit_median total_median")?;
        for m in &self.methods {
            let build = Summary::of(&m.build).median;
            for (count, fit) in &m.fit {
                let fit = Summary::of(fit).median;
                let total = Summary::of(&m.total(*count).unwrap_or_default()).median;
                writeln!(w, "{} {} {count} {build:e} {fit:e} {total:e}", m.formulation, m.backend)?;
            }
        }
        writeln!(w, "# ratio median min max")?;
        for r in &self.ratios {
            writeln!(w, "# {} {:.4} {:.4} {:.4}", r.name, r.median, r.min, r.max)?;
        }
        Ok(())
    }
}

/// The benchmark frame: the room corner seen by the configured camera with
/// quadratic depth noise.
pub fn bench_frame(maps: &TanAngleMaps, seed: u64) -> Result<DepthImage> {
    let opts = RenderOptions {
        noise: DepthNoise::Quadratic(NoiseModel::default()),
        dropout: 0.0,
        seed,
    };
    Ok(render_scene(&SyntheticScene::room_corner(), maps, &opts)?.depth)
}

struct Workload<'a> {
    formulation: Formulation,
    backend: Backend,
    depth: &'a DepthImage,
    maps: &'a TanAngleMaps,
    constant: &'a ChannelStack,
    rects: &'a [Rect],
    precomputed: &'a [PrecomputedRgbd],
}

impl Workload<'_> {
    fn build(&self) -> Result<(Option<ChannelStack>, f64)> {
        if self.backend == Backend::Naive {
            return Ok((None, 0.0));
        }
        let t = Instant::now();
        let stack = build_frame_channels(self.formulation, self.depth, self.maps, StackOptions::default())?;
        let secs = t.elapsed().as_secs_f64();
        Ok((Some(black_box(stack)), secs))
    }

    fn fit(&self, frame: Option<&ChannelStack>, count: usize) -> Result<f64> {
        if count == 0 {
            return Ok(0.0);
        }
        let n = self.rects.len();
        let t = Instant::now();
        for i in 0..count {
            let rect = &self.rects[i % n];
            let r = match (self.backend, frame) {
                (Backend::Naive, _) => fit_rect_naive(self.depth, self.maps, rect, self.formulation)?,
                (Backend::Integral, Some(frame)) if self.formulation == Formulation::ExplicitRgbd => {
                    self.precomputed[i % n].fit(frame, self.constant)?
                }
                (Backend::Integral, Some(frame)) => {
                    fit_rect_integral(frame, Some(self.constant), rect, self.formulation)?
                }
                (Backend::Integral, None) => unreachable!("integral workload always builds"),
            };
            black_box(r);
        }
        Ok(t.elapsed().as_secs_f64())
    }
}

/// Run the benchmark single-threaded. Workloads are deterministic for a
/// seed; only the timings vary.
pub fn run_bench(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let maps = compute_tan_maps(&config.intrinsics);
    let depth = bench_frame(&maps, config.seed)?;
    // camera-only precomputation, outside every timed section
    let constant = build_constant_channels(&maps);
    let rects = config.fit_rects();
    let precomputed = rects
        .iter()
        .map(|r| PrecomputedRgbd::new(&constant, *r))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = config.plane_counts.clone();
    counts.sort_unstable();
    counts.dedup();

    let mut methods: Vec<MethodTimings> = config
        .methods
        .iter()
        .map(|&(formulation, backend)| MethodTimings {
            formulation,
            backend,
            build: Vec::new(),
            fit: counts.iter().map(|&c| (c, Vec::new())).collect(),
        })
        .collect();
    let mut samples = Vec::new();

    for rep in 0..config.warmup + config.repetitions {
        let record = rep >= config.warmup;
        // interleave methods within a repetition so drift hits all alike
        for m in methods.iter_mut() {
            let w = Workload {
                formulation: m.formulation,
                backend: m.backend,
                depth: &depth,
                maps: &maps,
                constant: &constant,
                rects: &rects,
                precomputed: &precomputed,
            };
            let (frame, build) = w.build()?;
            let mut fits = Vec::with_capacity(counts.len());
            for &c in &counts {
                fits.push(w.fit(frame.as_ref(), c)?);
            }
            if !record {
                continue;
            }
            let r = rep - config.warmup;
            m.build.push(build);
            let sample = |phase, plane_count, seconds| Sample {
                formulation: m.formulation,
                backend: m.backend,
                phase,
                plane_count,
                rep: r,
                seconds,
            };
            samples.push(sample(Phase::Build, 0, build));
            for (&c, &f) in counts.iter().zip(&fits) {
                m.fit.get_mut(&c).expect("count registered").push(f);
                samples.push(sample(Phase::Fit, c, f));
                samples.push(sample(Phase::Total, c, build + f));
            }
        }
    }

    let ratios = derive_ratios(&methods);
    let (width, height) = config.intrinsics.dims();
    Ok(BenchReport {
        width,
        height,
        tile: config.tile,
        methods,
        samples,
        ratios,
    })
}

fn derive_ratios(methods: &[MethodTimings]) -> Vec<Ratio> {
    let find = |f, b| methods.iter().find(|m| m.formulation == f && m.backend == b);
    let mut out = Vec::new();
    for (rgbd, std_) in [
        (Formulation::ImplicitRgbd, Formulation::ImplicitStandard),
        (Formulation::ExplicitRgbd, Formulation::ExplicitStandard),
    ] {
        if let (Some(a), Some(b)) = (find(rgbd, Backend::Integral), find(std_, Backend::Integral)) {
            out.push(Ratio::from_series(format!("build:{rgbd}/{std_}"), &a.build, &b.build));
            if let (Some(x), Some(y)) = (a.per_fit(), b.per_fit()) {
                out.push(Ratio::from_series(format!("fit:{rgbd}/{std_}:integral"), &x, &y));
            }
            if let Some((&count, _)) = a.fit.iter().next_back() {
                if let (Some(x), Some(y)) = (a.total(count), b.total(count)) {
                    out.push(Ratio::from_series(format!("total@{count}:{rgbd}/{std_}:integral"), &x, &y));
                }
            }
        }
        if let (Some(a), Some(b)) = (find(rgbd, Backend::Naive), find(std_, Backend::Naive)) {
            if let (Some(x), Some(y)) = (a.per_fit(), b.per_fit()) {
                out.push(Ratio::from_series(format!("fit:{rgbd}/{std_}:naive"), &x, &y));
            }
        }
    }
    out
}
