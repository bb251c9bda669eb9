//! Quadtree planar segmentation.
//!
//! The image is cut into a grid of square tiles. Each tile with enough
//! valid pixels is fitted; tiles whose residual exceeds the threshold are
//! split into four and refitted, down to `max_depth` levels. The fitted
//! leaves are then clustered by plane coefficients.

pub mod kmeans;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::camera::TanAngleMaps;
use crate::error::{Error, Result};
use crate::fitting::{Backend, Fitter, FitResult, Formulation, Plane, RgbdFactorCache};
use crate::grid::Grid;
use crate::integral::{build_constant_channels, build_frame_channels, ChannelStack, Rect, StackOptions};
use crate::io;
use crate::synth::DepthImage;

pub use kmeans::{kmeans, kmeans_restarts, KMeans};

/// Per-pixel label for pixels outside any fitted tile, or without depth.
pub const LABEL_NONE: u8 = u8::MAX;
pub const MAX_CLUSTERS: usize = LABEL_NONE as usize;

/// Smallest rect side that can still carry a fit (2x2 = 4 samples).
const MIN_FIT_SIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorMetric {
    Rms,
    Max,
}

impl FromStr for ErrorMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rms" => Ok(ErrorMetric::Rms),
            "max" => Ok(ErrorMetric::Max),
            _ => Err(Error::Parse(format!("unknown error metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegConfig {
    pub formulation: Formulation,
    pub backend: Backend,
    pub initial_tile: usize,
    pub max_depth: usize,
    /// Residual threshold in the formulation's own metric.
    pub threshold: f64,
    pub metric: ErrorMetric,
    pub min_valid_fraction: f64,
    pub k: usize,
    /// Depth scale dividing the plane offset in cluster features, metres.
    pub d_scale: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl SegConfig {
    pub fn new(formulation: Formulation, backend: Backend) -> Self {
        Self {
            formulation,
            backend,
            initial_tile: 64,
            max_depth: 3,
            threshold: Self::default_threshold(formulation),
            metric: ErrorMetric::Rms,
            min_valid_fraction: 0.5,
            k: 8,
            d_scale: 5.0,
            seed: 0,
            restarts: 5,
        }
    }

    /// Metres for the explicit standard fit (errors along Z); algebraic
    /// units otherwise.
    pub fn default_threshold(formulation: Formulation) -> f64 {
        match formulation {
            Formulation::ExplicitStandard => 0.02,
            _ => 8e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let need = MIN_FIT_SIDE.checked_shl(self.max_depth as u32).unwrap_or(usize::MAX);
        if self.max_depth >= usize::BITS as usize || self.initial_tile < need {
            return bad(format!(
                "initial tile {} too small for {} subdivision levels (need >= {need})",
                self.initial_tile, self.max_depth
            ));
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return bad(format!("threshold must be positive, got {}", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return bad(format!("min valid fraction {} outside [0, 1]", self.min_valid_fraction));
        }
        if self.k == 0 || self.k > MAX_CLUSTERS {
            return bad(format!("k must be in 1..={MAX_CLUSTERS}, got {}", self.k));
        }
        if !(self.d_scale.is_finite() && self.d_scale > 0.0) {
            return bad(format!("depth scale must be positive, got {}", self.d_scale));
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TileStatus {
    Fitted,
    TooInvalid,
    HighErrorLeaf,
}

impl TileStatus {
    pub fn name(self) -> &'static str {
        match self {
            TileStatus::Fitted => "fitted",
            TileStatus::TooInvalid => "too_invalid",
            TileStatus::HighErrorLeaf => "high_error_leaf",
        }
    }
}

impl fmt::Display for TileStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub rect: Rect,
    pub level: usize,
    pub status: TileStatus,
    /// Last fit attempted on this rect, if it produced one.
    pub fit: Option<FitResult>,
    pub error: Option<f64>,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub tiles: Vec<Tile>,
    pub labels: Grid<u8>,
    pub centroids: Vec<[f64; 4]>,
    /// Requested `k` exceeded the fitted-tile count.
    pub k_clamped: bool,
}

impl Segmentation {
    pub fn count(&self, status: TileStatus) -> usize {
        self.tiles.iter().filter(|t| t.status == status).count()
    }

    pub const CSV_HEADER: &'static str = "rect,level,status,a,b,c,d,error,n_points,cluster";

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for t in &self.tiles {
            let coeffs = match &t.fit {
                Some(f) if t.status == TileStatus::Fitted => {
                    let [a, b, c, d] = f.implicit().coefficients();
                    format!("{a},{b},{c},{d}")
                }
                _ => ",,,".into(),
            };
            let opt = |v: Option<String>| v.unwrap_or_default();
            writeln!(
                w,
                "\"{}\",{},{},{coeffs},{},{},{}",
                t.rect,
                t.level,
                t.status,
                opt(t.error.map(|e| e.to_string())),
                opt(t.fit.map(|f| f.n_points.to_string())),
                opt(t.cluster.map(|c| c.to_string())),
            )?;
        }
        Ok(())
    }

    /// Colour image: cluster colours for fitted tiles, dark grey for tiles
    /// with too few valid pixels, blue for high-error leaves, black where
    /// depth is missing.
    pub fn render(&self, depth: &DepthImage) -> Grid<[u8; 3]> {
        let mut img = Grid::filled(self.labels.width(), self.labels.height(), [0u8; 3]);
        for t in &self.tiles {
            let colour = match t.status {
                TileStatus::Fitted => palette(t.cluster.unwrap_or(0)),
                TileStatus::TooInvalid => [48, 48, 48],
                TileStatus::HighErrorLeaf => [0, 0, 255],
            };
            for (x, y) in t.rect.pixels() {
                if depth.is_valid(x, y) {
                    img[(x, y)] = colour;
                }
            }
        }
        img
    }

    pub fn write_ppm(&self, depth: &DepthImage, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        io::write_ppm(&mut f, &self.render(depth))?;
        f.flush()?;
        Ok(())
    }
}

const BASE_PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
    [128, 0, 0],
];

/// Fixed cluster colours; beyond the base table, hues step by the golden
/// angle.
pub fn palette(cluster: usize) -> [u8; 3] {
    if let Some(c) = BASE_PALETTE.get(cluster) {
        return *c;
    }
    let hue = (cluster as f64 * 137.507_764) % 360.0;
    let (s, v) = (0.65, 0.9);
    let c = v * s;
    let h = hue / 60.0;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

/// Clustering features: unit normal with non-negative offset, offset
/// divided by `d_scale`.
pub fn tile_features(result: &FitResult, d_scale: f64) -> [f64; 4] {
    let (n, d) = result.implicit().unit_normal_form();
    let s = if d < 0.0 { -1.0 } else { 1.0 };
    [s * n[0], s * n[1], s * n[2], s * d / d_scale]
}

/// Residual of the fitted objective at one pixel.
fn pixel_residual(fit: &FitResult, tx: f64, ty: f64, z: f64) -> f64 {
    match (&fit.plane, fit.formulation) {
        (Plane::Implicit(p), Formulation::ImplicitStandard) => {
            let [a, b, c, d] = p.coefficients();
            a * z * tx + b * z * ty + c * z + d
        }
        (Plane::Implicit(p), _) => {
            let [a, b, c, d] = p.coefficients();
            a * tx + b * ty + c + d / z
        }
        (Plane::Explicit(p), Formulation::ExplicitStandard) => {
            let [a, b, c] = p.coefficients;
            a * z * tx + b * z * ty + c - z
        }
        (Plane::Explicit(p), _) => {
            let [a, b, c] = p.coefficients;
            a * tx + b * ty + c - 1.0 / z
        }
    }
}

fn max_residual(fit: &FitResult, rect: &Rect, depth: &DepthImage, maps: &TanAngleMaps) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in rect.pixels() {
        if let Some(z) = depth.get(x, y) {
            let (tx, ty) = maps.at(x, y);
            worst = worst.max(pixel_residual(fit, tx, ty, z).abs());
        }
    }
    worst
}

fn top_level_tiles(width: usize, height: usize, tile: usize) -> Vec<Rect> {
    let mut out = Vec::new();
    for y0 in (0..height).step_by(tile) {
        for x0 in (0..width).step_by(tile) {
            out.push(Rect {
                x0,
                y0,
                x1: (x0 + tile).min(width),
                y1: (y0 + tile).min(height),
            });
        }
    }
    out
}

fn children(rect: &Rect) -> impl Iterator<Item = Rect> {
    rect.quadrants().into_iter().filter(|r| !r.is_empty())
}

/// Every rect the quadtree can visit.
pub fn quadtree_rects(width: usize, height: usize, config: &SegConfig) -> Vec<Rect> {
    let mut out = Vec::new();
    let mut level = top_level_tiles(width, height, config.initial_tile);
    for depth in 0..=config.max_depth {
        out.extend_from_slice(&level);
        if depth < config.max_depth {
            level = level.iter().flat_map(children).collect();
        }
    }
    out
}

/// Per-camera state for segmenting a stream of frames: the constant
/// channel stack and, for explicit range-space fits, one cached
/// factorization per quadtree rect.
#[derive(Debug, Clone)]
pub struct Segmenter {
    config: SegConfig,
    maps: TanAngleMaps,
    constant: Option<ChannelStack>,
    cache: Option<RgbdFactorCache>,
}

impl Segmenter {
    pub fn new(config: SegConfig, maps: TanAngleMaps) -> Result<Self> {
        config.validate()?;
        let (w, h) = maps.dims();
        if w < config.initial_tile || h < config.initial_tile {
            return Err(Error::InvalidConfig(format!(
                "image {w}x{h} smaller than one {t}x{t} tile",
                t = config.initial_tile
            )));
        }
        let integral = config.backend == Backend::Integral;
        let constant = (integral && config.formulation.is_rgbd()).then(|| build_constant_channels(&maps));
        let cache = match (&constant, config.formulation) {
            (Some(c), Formulation::ExplicitRgbd) => Some(RgbdFactorCache::new(c, quadtree_rects(w, h, &config))?),
            _ => None,
        };
        Ok(Self {
            config,
            maps,
            constant,
            cache,
        })
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    pub fn maps(&self) -> &TanAngleMaps {
        &self.maps
    }

    /// Per-frame integral channels; `None` for the naive backend.
    pub fn build_channels(&self, depth: &DepthImage) -> Result<Option<ChannelStack>> {
        if self.config.backend == Backend::Naive {
            return Ok(None);
        }
        let options = StackOptions {
            residual: self.config.metric == ErrorMetric::Rms,
        };
        build_frame_channels(self.config.formulation, depth, &self.maps, options).map(Some)
    }

    pub fn segment(&self, depth: &DepthImage) -> Result<Segmentation> {
        let frame = self.build_channels(depth)?;
        self.segment_with(depth, frame.as_ref())
    }

    /// Segment with per-frame channels built by [`Segmenter::build_channels`].
    pub fn segment_with(&self, depth: &DepthImage, frame: Option<&ChannelStack>) -> Result<Segmentation> {
        let (w, h) = self.maps.dims();
        if depth.dims() != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                got: depth.dims(),
            });
        }
        let cfg = &self.config;
        let fitter = match (cfg.backend, frame) {
            (Backend::Naive, _) => Fitter::Naive {
                formulation: cfg.formulation,
                depth,
                maps: &self.maps,
            },
            (Backend::Integral, Some(frame)) => {
                if frame.dims() != (w, h) {
                    return Err(Error::DimensionMismatch {
                        expected: (w, h),
                        got: frame.dims(),
                    });
                }
                Fitter::Integral {
                    formulation: cfg.formulation,
                    frame,
                    constant: self.constant.as_ref(),
                    cache: self.cache.as_ref(),
                }
            }
            (Backend::Integral, None) => {
                return Err(Error::InvalidConfig("integral backend needs per-frame channels".into()));
            }
        };
        let count_valid = |r: &Rect| -> usize {
            match frame {
                Some(f) => f.count().box_sum_unchecked(r).round() as usize,
                None => (r.y0..r.y1)
                    .map(|y| depth.mask().row(y)[r.x0..r.x1].iter().filter(|&&v| v).count())
                    .sum(),
            }
        };

        let mut tiles = Vec::new();
        let mut stack: Vec<(Rect, usize)> = top_level_tiles(w, h, cfg.initial_tile)
            .into_iter()
            .rev()
            .map(|r| (r, 0))
            .collect();
        while let Some((rect, level)) = stack.pop() {
            let valid = count_valid(&rect);
            if (valid as f64) < cfg.min_valid_fraction * rect.area() as f64 {
                tiles.push(Tile {
                    rect,
                    level,
                    status: TileStatus::TooInvalid,
                    fit: None,
                    error: None,
                    cluster: None,
                });
                continue;
            }
            let fit = fitter.fit(&rect).ok();
            let error = fit.filter(|f| !f.degenerate).and_then(|f| match cfg.metric {
                ErrorMetric::Rms => f.rms_residual,
                ErrorMetric::Max => Some(max_residual(&f, &rect, depth, &self.maps)),
            });
            match error {
                Some(e) if e <= cfg.threshold => tiles.push(Tile {
                    rect,
                    level,
                    status: TileStatus::Fitted,
                    fit,
                    error,
                    cluster: None,
                }),
                _ if level < cfg.max_depth => {
                    let kids: Vec<Rect> = children(&rect).collect();
                    stack.extend(kids.into_iter().rev().map(|r| (r, level + 1)));
                }
                _ => tiles.push(Tile {
                    rect,
                    level,
                    status: TileStatus::HighErrorLeaf,
                    fit,
                    error,
                    cluster: None,
                }),
            }
        }

        let fitted: Vec<usize> = (0..tiles.len()).filter(|&i| tiles[i].status == TileStatus::Fitted).collect();
        let mut centroids = Vec::new();
        let k_clamped;
        if !fitted.is_empty() {
            let features: Vec<[f64; 4]> = fitted
                .iter()
                .map(|&i| tile_features(tiles[i].fit.as_ref().expect("fitted tile has a fit"), cfg.d_scale))
                .collect();
            let km = kmeans_restarts(&features, cfg.k, cfg.seed, cfg.restarts)?;
            for (&i, &label) in fitted.iter().zip(&km.labels) {
                tiles[i].cluster = Some(label);
            }
            centroids = km.centroids;
            k_clamped = km.k_clamped;
        } else {
            k_clamped = true;
        }

        let mut labels = Grid::filled(w, h, LABEL_NONE);
        for t in &tiles {
            if let Some(c) = t.cluster {
                for (x, y) in t.rect.pixels() {
                    if depth.is_valid(x, y) {
                        labels[(x, y)] = c as u8;
                    }
                }
            }
        }
        Ok(Segmentation {
            tiles,
            labels,
            centroids,
            k_clamped,
        })
    }
}

/// One-shot segmentation of a single frame.
pub fn segment(depth: &DepthImage, maps: &TanAngleMaps, config: &SegConfig) -> Result<Segmentation> {
    Segmenter::new(config.clone(), maps.clone())?.segment(depth)
}
