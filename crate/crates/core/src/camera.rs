//! Pinhole camera model, back-projection and the per-pixel tan-angle maps.
//!
//! Pixel coordinates are zero-indexed with pixel centers at integer
//! coordinates. Depth is in meters. The tan-angle maps
//!
//! ```text
//! tan_x(x, y) = (x + delta_x(x, y) - cx) / fx
//! tan_y(x, y) = (y + delta_y(x, y) - cy) / fy
//! ```
//!
//! depend only on the intrinsics, so everything built from them can be
//! computed once per camera and shared across frames.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io;

/// Millimeters to meters, for 16-bit depth images.
pub const MM_TO_M: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Pinhole intrinsics with dense per-pixel distortion offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    delta_x: Grid<f64>,
    delta_y: Grid<f64>,
}

impl CameraIntrinsics {
    /// Intrinsics with all-zero distortion maps.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx.is_finite() && fx > 0.0 && fy.is_finite() && fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidIntrinsics(format!(
                "empty image {width}x{height}"
            )));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            delta_x: Grid::filled(width, height, 0.0),
            delta_y: Grid::filled(width, height, 0.0),
        })
    }

    /// Replace the distortion offset maps.
    pub fn with_distortion(mut self, delta_x: Grid<f64>, delta_y: Grid<f64>) -> Result<Self> {
        let (w, h) = self.dims();
        delta_x.check_dims(w, h)?;
        delta_y.check_dims(w, h)?;
        if delta_x
            .as_slice()
            .iter()
            .chain(delta_y.as_slice())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidIntrinsics("non-finite distortion offset".into()));
        }
        self.delta_x = delta_x;
        self.delta_y = delta_y;
        Ok(self)
    }

    /// 640x480 structured-light sensor.
    pub fn vga_default() -> Self {
        Self::new(525.0, 525.0, 319.5, 239.5, 640, 480).expect("valid constants")
    }

    /// 512x424 time-of-flight sensor.
    pub fn tof_default() -> Self {
        Self::new(365.0, 365.0, 255.5, 211.5, 512, 424).expect("valid constants")
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> usize {
        self.delta_x.width()
    }
    pub fn height(&self) -> usize {
        self.delta_x.height()
    }
    pub fn dims(&self) -> (usize, usize) {
        self.delta_x.dims()
    }
    pub fn delta_x(&self) -> &Grid<f64> {
        &self.delta_x
    }
    pub fn delta_y(&self) -> &Grid<f64> {
        &self.delta_y
    }

    /// Forward pinhole projection `x = fx X/Z + cx - delta_x`, using the
    /// distortion offsets stored at `pixel`.
    pub fn project(&self, p: &Point3, pixel: (usize, usize)) -> (f64, f64) {
        let dx = self.delta_x[pixel];
        let dy = self.delta_y[pixel];
        (
            self.fx * p.x / p.z + self.cx - dx,
            self.fy * p.y / p.z + self.cy - dy,
        )
    }

    /// Parse a `key=value` intrinsics description.
    ///
    /// Required keys: `fx`, `fy`, `cx`, `cy`, `width`, `height`. The optional
    /// `distortion` key names a raw float64 file holding the `delta_x` and
    /// `delta_y` lattices back to back; relative paths resolve against
    /// `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut fx = None;
        let mut fy = None;
        let mut cx = None;
        let mut cy = None;
        let mut width = None;
        let mut height = None;
        let mut distortion = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let float = || {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: bad number for {key}: {value:?}", lineno + 1)))
            };
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("line {}: bad integer for {key}: {value:?}", lineno + 1)))
            };
            match key {
                "fx" => fx = Some(float()?),
                "fy" => fy = Some(float()?),
                "cx" => cx = Some(float()?),
                "cy" => cy = Some(float()?),
                "width" => width = Some(int()?),
                "height" => height = Some(int()?),
                "distortion" => distortion = Some(value.to_string()),
                other => {
                    return Err(Error::Parse(format!(
                        "line {}: unknown intrinsics key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        let missing = |k: &str| Error::Parse(format!("intrinsics missing required key {k:?}"));
        let intrinsics = Self::new(
            fx.ok_or_else(|| missing("fx"))?,
            fy.ok_or_else(|| missing("fy"))?,
            cx.ok_or_else(|| missing("cx"))?,
            cy.ok_or_else(|| missing("cy"))?,
            width.ok_or_else(|| missing("width"))?,
            height.ok_or_else(|| missing("height"))?,
        )?;
        match distortion {
            None => Ok(intrinsics),
            Some(rel) => {
                let path = match base_dir {
                    Some(dir) => dir.join(&rel),
                    None => rel.into(),
                };
                let mut reader = std::io::BufReader::new(std::fs::File::open(&path)?);
                let (_, dx) = io::read_raw_lattice(&mut reader)?;
                let (_, dy) = io::read_raw_lattice(&mut reader)?;
                intrinsics.with_distortion(dx, dy)
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }

    /// Inverse of [`CameraIntrinsics::parse`], without distortion.
    pub fn to_key_value(&self) -> String {
        format!(
            "fx={}\nfy={}\ncx={}\ncy={}\nwidth={}\nheight={}\n",
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width(),
            self.height()
        )
    }
}

/// Per-pixel `tan(theta_x)`, `tan(theta_y)` lattices.
#[derive(Debug, Clone, PartialEq)]
pub struct TanAngleMaps {
    pub tan_x: Grid<f64>,
    pub tan_y: Grid<f64>,
}

impl TanAngleMaps {
    pub fn from_grids(tan_x: Grid<f64>, tan_y: Grid<f64>) -> Result<Self> {
        tan_x.check_dims(tan_y.width(), tan_y.height())?;
        Ok(Self { tan_x, tan_y })
    }

    pub fn width(&self) -> usize {
        self.tan_x.width()
    }

    pub fn height(&self) -> usize {
        self.tan_x.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.tan_x.dims()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        (self.tan_x[(x, y)], self.tan_y[(x, y)])
    }

    pub(crate) fn check_pixel(&self, x: usize, y: usize) -> Result<()> {
        if !self.tan_x.contains(x, y) {
            return Err(Error::OutOfBounds {
                x,
                y,
                width: self.width(),
                height: self.height(),
            });
        }
        Ok(())
    }
}

pub fn compute_tan_maps(intrinsics: &CameraIntrinsics) -> TanAngleMaps {
    let (w, h) = intrinsics.dims();
    let (fx, fy, cx, cy) = (intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy);
    let tan_x = Grid::from_fn(w, h, |x, y| {
        (x as f64 + intrinsics.delta_x[(x, y)] - cx) / fx
    });
    let tan_y = Grid::from_fn(w, h, |x, y| {
        (y as f64 + intrinsics.delta_y[(x, y)] - cy) / fy
    });
    TanAngleMaps { tan_x, tan_y }
}

/// `(X, Y, Z) = (Z tan_x, Z tan_y, Z)`.
pub fn back_project(pixel: (usize, usize), depth: f64, maps: &TanAngleMaps) -> Result<Point3> {
    let (x, y) = pixel;
    maps.check_pixel(x, y)?;
    if !(depth.is_finite() && depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    let (tx, ty) = maps.at(x, y);
    Ok(Point3::new(depth * tx, depth * ty, depth))
}

/// Linearized disparity slope `m / (fx b)` of the structured-light sensor
/// model. The depth sigma coefficient is half its magnitude.
pub const DISPARITY_SLOPE: f64 = -2.85e-3;

/// Quadratic depth noise: `sigma_z = k Z^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// `k`, in 1/meters.
    pub slope_coefficient: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::from_disparity_slope(DISPARITY_SLOPE)
    }
}

impl NoiseModel {
    pub fn new(slope_coefficient: f64) -> Result<Self> {
        if !(slope_coefficient.is_finite() && slope_coefficient > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise slope coefficient must be positive, got {slope_coefficient}"
            )));
        }
        Ok(Self { slope_coefficient })
    }

    pub fn from_disparity_slope(m_over_fb: f64) -> Self {
        Self {
            slope_coefficient: m_over_fb.abs() / 2.0,
        }
    }

    #[inline]
    pub fn sigma_z(&self, depth: f64) -> f64 {
        self.slope_coefficient * depth * depth
    }
}

/// Per-axis standard deviations. The lateral terms carry the sign of the
/// tan angle, so `sigma_x = tan_x * sigma_z` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSigma {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub fn noise_sigma(
    depth: f64,
    pixel: (usize, usize),
    maps: &TanAngleMaps,
    model: &NoiseModel,
) -> Result<NoiseSigma> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    maps.check_pixel(pixel.0, pixel.1)?;
    let (tx, ty) = maps.at(pixel.0, pixel.1);
    let z = model.sigma_z(depth);
    Ok(NoiseSigma {
        x: tx * z,
        y: ty * z,
        z,
    })
}
