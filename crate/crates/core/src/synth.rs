//! Virtual depth sensor: per-pixel rays intersected with ground-truth planes,
//! optionally perturbed along the ray by the quadratic depth-noise model.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::camera::{NoiseModel, TanAngleMaps, MM_TO_M};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::integral::Rect;
use crate::io;

/// Organized depth image in meters. Invalid pixels store `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    depth: Grid<f64>,
    valid: Grid<bool>,
}

impl DepthImage {
    /// Every pixel whose depth is finite and positive is valid.
    pub fn from_depths(depth: Grid<f64>) -> Self {
        let (w, h) = depth.dims();
        let mut depth = depth;
        let mut valid = Grid::filled(w, h, false);
        for (z, v) in depth.as_mut_slice().iter_mut().zip(valid.as_mut_slice()) {
            if z.is_finite() && *z > 0.0 {
                *v = true;
            } else {
                *z = 0.0;
            }
        }
        Self { depth, valid }
    }

    pub fn new(depth: Grid<f64>, valid: Grid<bool>) -> Result<Self> {
        valid.check_dims(depth.width(), depth.height())?;
        let mut depth = depth;
        for (z, &v) in depth.as_mut_slice().iter_mut().zip(valid.as_slice()) {
            if v {
                if !(z.is_finite() && *z > 0.0) {
                    return Err(Error::InvalidDepth(*z));
                }
            } else {
                *z = 0.0;
            }
        }
        Ok(Self { depth, valid })
    }

    /// 16-bit millimeter depths, `0` meaning invalid.
    pub fn from_millimeters(mm: &Grid<u16>) -> Self {
        let (w, h) = mm.dims();
        let depth = Grid::from_fn(w, h, |x, y| f64::from(mm[(x, y)]) * MM_TO_M);
        Self::from_depths(depth)
    }

    /// Rounded millimeters, clamped to `1..=65535` for valid pixels.
    pub fn to_millimeters(&self) -> Grid<u16> {
        let (w, h) = self.dims();
        Grid::from_fn(w, h, |x, y| {
            if self.valid[(x, y)] {
                (self.depth[(x, y)] / MM_TO_M).round().clamp(1.0, 65535.0) as u16
            } else {
                0
            }
        })
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.depth.dims()
    }

    /// Depth at a valid pixel.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        if self.valid.get(x, y).copied().unwrap_or(false) {
            Some(self.depth[(x, y)])
        } else {
            None
        }
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid.get(x, y).copied().unwrap_or(false)
    }

    pub fn depths(&self) -> &Grid<f64> {
        &self.depth
    }

    pub fn mask(&self) -> &Grid<bool> {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.as_slice().iter().filter(|&&v| v).count()
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        self.valid[(x, y)] = false;
        self.depth[(x, y)] = 0.0;
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        io::write_pgm16(&mut w, &self.to_millimeters())
    }

    /// Lossless float64 output.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        io::write_raw_lattice(&mut w, "depth", &self.depth)
    }

    /// Read either a raw float64 lattice or a 16-bit millimeter PGM.
    pub fn read(path: &Path) -> Result<Self> {
        let raw = io::is_raw_lattice_file(path)?;
        let mut r = BufReader::new(std::fs::File::open(path)?);
        if raw {
            let (_, grid) = io::read_raw_lattice(&mut r)?;
            Ok(Self::from_depths(grid))
        } else {
            let pgm = io::read_pgm(&mut r)?;
            Ok(Self::from_millimeters(&pgm.pixels))
        }
    }
}

/// Implicit plane `aX + bY + cZ + d = 0` with unit normal, optionally
/// restricted to a pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthPlane {
    coefficients: [f64; 4],
    mask: Option<Rect>,
}

impl GroundTruthPlane {
    /// Scales the coefficients so that `|(a, b, c)| = 1`.
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let norm = (a * a + b * b + c * c).sqrt();
        if !(norm.is_finite() && norm > 0.0 && d.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "plane ({a}, {b}, {c}, {d}) has no valid normal"
            )));
        }
        Ok(Self {
            coefficients: [a / norm, b / norm, c / norm, d / norm],
            mask: None,
        })
    }

    pub fn with_mask(mut self, rect: Rect) -> Self {
        self.mask = Some(rect);
        self
    }

    pub fn coefficients(&self) -> [f64; 4] {
        self.coefficients
    }

    pub fn mask(&self) -> Option<Rect> {
        self.mask
    }

    #[inline]
    pub fn covers(&self, x: usize, y: usize) -> bool {
        self.mask.is_none_or(|r| r.contains(x, y))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    planes: Vec<GroundTruthPlane>,
}

/// Label of pixels that no plane covers.
pub const LABEL_INVALID: u8 = u8::MAX;

impl SyntheticScene {
    pub fn new(planes: Vec<GroundTruthPlane>) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::InvalidConfig("scene has no planes".into()));
        }
        if planes.len() >= LABEL_INVALID as usize {
            return Err(Error::InvalidConfig(format!(
                "scene has {} planes, at most {} supported",
                planes.len(),
                LABEL_INVALID
            )));
        }
        Ok(Self { planes })
    }

    pub fn planes(&self) -> &[GroundTruthPlane] {
        &self.planes
    }

    /// Concave three-plane room corner: two walls meeting at 2.2 m on the
    /// optical axis, both at 45 degrees to it, and a floor seen by a camera
    /// pitched 20 degrees down.
    pub fn room_corner() -> Self {
        let pitch = 20f64.to_radians();
        let planes = vec![
            GroundTruthPlane::new(1.0, 0.0, -1.0, 2.2).expect("left wall"),
            GroundTruthPlane::new(1.0, 0.0, 1.0, -2.2).expect("right wall"),
            GroundTruthPlane::new(0.0, pitch.cos(), pitch.sin(), -1.06).expect("floor"),
        ];
        Self { planes }
    }

    /// One plane per line: `a b c d [x0 y0 x1 y1]` or `a b c d [x0,y0,x1,y1]`.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut planes = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("scene line {}: {what}: {raw:?}", lineno + 1));
            let tokens: Vec<&str> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .collect();
            if tokens.len() != 4 && tokens.len() != 8 {
                return Err(bad("expected `a b c d` with an optional 4-value mask rect"));
            }
            let mut coef = [0.0; 4];
            for (slot, tok) in coef.iter_mut().zip(&tokens[..4]) {
                *slot = tok.parse().map_err(|_| bad("bad coefficient"))?;
            }
            let mut plane = GroundTruthPlane::new(coef[0], coef[1], coef[2], coef[3])
                .map_err(|_| bad("degenerate normal"))?;
            if tokens.len() == 8 {
                let mut r = [0usize; 4];
                for (slot, tok) in r.iter_mut().zip(&tokens[4..]) {
                    *slot = tok.parse().map_err(|_| bad("bad mask rect"))?;
                }
                let rect = Rect::new(r[0], r[1], r[2], r[3]).map_err(|_| bad("inverted mask rect"))?;
                plane = plane.with_mask(rect);
            }
            planes.push(plane);
        }
        Self::new(planes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Unnormalized viewing-ray direction `(tan_x, tan_y, 1)` from the camera
/// origin through the pixel center.
pub fn ray_for_pixel(maps: &TanAngleMaps, pixel: (usize, usize)) -> Result<[f64; 3]> {
    maps.check_pixel(pixel.0, pixel.1)?;
    let (tx, ty) = maps.at(pixel.0, pixel.1);
    Ok([tx, ty, 1.0])
}

/// Depth along `ray` where it meets the plane, if in front of the camera.
#[inline]
pub fn intersect_plane(ray: [f64; 3], plane: &GroundTruthPlane) -> Option<f64> {
    let [a, b, c, d] = plane.coefficients;
    let denom = a * ray[0] + b * ray[1] + c * ray[2];
    if denom == 0.0 {
        return None;
    }
    let z = -d / denom * ray[2];
    (z.is_finite() && z > 0.0).then_some(z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthNoise {
    Off,
    /// Depth sigma from the quadratic model at the true depth.
    Quadratic(NoiseModel),
    /// Constant depth sigma in meters.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub noise: DepthNoise,
    /// Fraction of pixels randomly invalidated.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            noise: DepthNoise::Off,
            dropout: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub depth: DepthImage,
    /// Index of the visible plane, or [`LABEL_INVALID`].
    pub labels: Grid<u8>,
}

/// Render the nearest positive intersection per pixel.
///
/// With noise enabled the point slides along its viewing ray, so it stays
/// on the pixel of incidence and only the stored depth changes. Each row
/// draws from its own ChaCha stream keyed by the seed, so output does not
/// depend on thread scheduling.
pub fn render_scene(
    scene: &SyntheticScene,
    maps: &TanAngleMaps,
    options: &RenderOptions,
) -> Result<Rendered> {
    if !(0.0..=1.0).contains(&options.dropout) {
        return Err(Error::InvalidConfig(format!(
            "dropout fraction {} outside [0, 1]",
            options.dropout
        )));
    }
    if let DepthNoise::Fixed(s) = options.noise {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::InvalidConfig(format!("fixed noise sigma {s} invalid")));
        }
    }
    let (w, h) = maps.dims();
    let rows: Vec<(Vec<f64>, Vec<bool>, Vec<u8>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(y as u64);
            let mut depth = vec![0.0; w];
            let mut valid = vec![false; w];
            let mut labels = vec![LABEL_INVALID; w];
            for x in 0..w {
                let (tx, ty) = maps.at(x, y);
                let ray = [tx, ty, 1.0];
                let mut best: Option<(f64, u8)> = None;
                for (i, plane) in scene.planes.iter().enumerate() {
                    if !plane.covers(x, y) {
                        continue;
                    }
                    if let Some(z) = intersect_plane(ray, plane) {
                        if best.is_none_or(|(bz, _)| z < bz) {
                            best = Some((z, i as u8));
                        }
                    }
                }
                let Some((z, label)) = best else { continue };
                let sigma = match options.noise {
                    DepthNoise::Off => 0.0,
                    DepthNoise::Quadratic(model) => model.sigma_z(z),
                    DepthNoise::Fixed(s) => s,
                };
                let z = if sigma > 0.0 {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    z + sigma * eps
                } else {
                    z
                };
                if options.dropout > 0.0 && rng.random::<f64>() < options.dropout {
                    continue;
                }
                if z.is_finite() && z > 0.0 {
                    depth[x] = z;
                    valid[x] = true;
                    labels[x] = label;
                }
            }
            (depth, valid, labels)
        })
        .collect();

    let mut depth = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    for (d, v, l) in rows {
        depth.extend(d);
        valid.extend(v);
        labels.extend(l);
    }
    Ok(Rendered {
        depth: DepthImage::new(Grid::from_vec(w, h, depth)?, Grid::from_vec(w, h, valid)?)?,
        labels: Grid::from_vec(w, h, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{back_project, compute_tan_maps, CameraIntrinsics};

    fn small_maps() -> TanAngleMaps {
        compute_tan_maps(&CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap())
    }

    #[test]
    fn ray_examples() {
        let maps = compute_tan_maps(&CameraIntrinsics::new(100.0, 100.0, 10.0, 20.0, 64, 48).unwrap());
        assert_eq!(ray_for_pixel(&maps, (10, 20)).unwrap(), [0.0, 0.0, 1.0]);
        let custom = TanAngleMaps::from_grids(Grid::filled(2, 2, 0.25), Grid::filled(2, 2, -0.1)).unwrap();
        assert_eq!(ray_for_pixel(&custom, (1, 1)).unwrap(), [0.25, -0.1, 1.0]);
        let ones = TanAngleMaps::from_grids(Grid::filled(2, 2, 1.0), Grid::filled(2, 2, 1.0)).unwrap();
        assert_eq!(ray_for_pixel(&ones, (0, 0)).unwrap(), [1.0, 1.0, 1.0]);
        assert!(ray_for_pixel(&maps, (64, 0)).is_err());
    }

    #[test]
    fn intersect_examples() {
        let z2 = GroundTruthPlane::new(0.0, 0.0, 1.0, -2.0).unwrap();
        assert_eq!(intersect_plane([0.0, 0.0, 1.0], &z2), Some(2.0));
        assert_eq!(intersect_plane([0.5, 0.3, 1.0], &z2), Some(2.0));
        let x_eq_1 = GroundTruthPlane::new(1.0, 0.0, 0.0, -1.0).unwrap();
        assert_eq!(intersect_plane([0.0, 0.0, 1.0], &x_eq_1), None);
        // behind the camera
        let z_neg = GroundTruthPlane::new(0.0, 0.0, 1.0, 2.0).unwrap();
        assert_eq!(intersect_plane([0.0, 0.0, 1.0], &z_neg), None);
    }

    #[test]
    fn plane_normalized() {
        let p = GroundTruthPlane::new(3.0, 0.0, 4.0, -10.0).unwrap();
        assert_eq!(p.coefficients(), [0.6, 0.0, 0.8, -2.0]);
        assert!(GroundTruthPlane::new(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn noiseless_frontal_plane_is_exact() {
        let maps = small_maps();
        let scene = SyntheticScene::new(vec![GroundTruthPlane::new(0.0, 0.0, 1.0, -2.0).unwrap()]).unwrap();
        let out = render_scene(&scene, &maps, &RenderOptions::default()).unwrap();
        assert_eq!(out.depth.valid_count(), 64 * 48);
        assert!(out.depth.depths().as_slice().iter().all(|&z| z == 2.0));
        assert!(out.labels.as_slice().iter().all(|&l| l == 0));
    }

    #[test]
    fn noiseless_points_satisfy_plane() {
        let maps = small_maps();
        let plane = GroundTruthPlane::new(0.2, -0.3, 1.0, -2.5).unwrap();
        let scene = SyntheticScene::new(vec![plane]).unwrap();
        let out = render_scene(&scene, &maps, &RenderOptions::default()).unwrap();
        let [a, b, c, d] = plane.coefficients();
        for y in 0..48 {
            for x in 0..64 {
                let z = out.depth.get(x, y).unwrap();
                let p = back_project((x, y), z, &maps).unwrap();
                assert!((a * p.x + b * p.y + c * p.z + d).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn two_plane_masks_split_labels() {
        let maps = small_maps();
        let left = GroundTruthPlane::new(0.0, 0.0, 1.0, -2.0)
            .unwrap()
            .with_mask(Rect::new(0, 0, 32, 48).unwrap());
        let right = GroundTruthPlane::new(0.0, 0.0, 1.0, -3.0)
            .unwrap()
            .with_mask(Rect::new(32, 0, 64, 48).unwrap());
        let scene = SyntheticScene::new(vec![left, right]).unwrap();
        let out = render_scene(&scene, &maps, &RenderOptions::default()).unwrap();
        for y in 0..48 {
            for x in 0..64 {
                assert_eq!(out.labels[(x, y)], u8::from(x >= 32));
            }
        }
    }

    #[test]
    fn nearest_plane_wins() {
        let maps = small_maps();
        let near = GroundTruthPlane::new(0.0, 0.0, 1.0, -1.0).unwrap();
        let far = GroundTruthPlane::new(0.0, 0.0, 1.0, -3.0).unwrap();
        let scene = SyntheticScene::new(vec![far, near]).unwrap();
        let out = render_scene(&scene, &maps, &RenderOptions::default()).unwrap();
        assert!(out.labels.as_slice().iter().all(|&l| l == 1));
    }

    #[test]
    fn uncovered_pixels_invalid() {
        let maps = small_maps();
        let p = GroundTruthPlane::new(0.0, 0.0, 1.0, -1.0)
            .unwrap()
            .with_mask(Rect::new(0, 0, 10, 10).unwrap());
        let out = render_scene(&SyntheticScene::new(vec![p]).unwrap(), &maps, &RenderOptions::default()).unwrap();
        assert_eq!(out.depth.valid_count(), 100);
        assert_eq!(out.labels[(20, 20)], LABEL_INVALID);
        assert_eq!(out.depth.get(20, 20), None);
    }

    #[test]
    fn seeded_render_is_bit_identical() {
        let maps = small_maps();
        let opts = RenderOptions {
            noise: DepthNoise::Quadratic(NoiseModel::default()),
            dropout: 0.1,
            seed: 42,
        };
        let scene = SyntheticScene::room_corner();
        let a = render_scene(&scene, &maps, &opts).unwrap();
        let b = render_scene(&scene, &maps, &opts).unwrap();
        assert!(a
            .depth
            .depths()
            .as_slice()
            .iter()
            .zip(b.depth.depths().as_slice())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
        assert_eq!(a.labels, b.labels);
        let c = render_scene(&scene, &maps, &RenderOptions { seed: 43, ..opts }).unwrap();
        assert_ne!(a.depth, c.depth);
    }

    #[test]
    fn perturbed_point_projects_to_same_pixel() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap();
        let maps = compute_tan_maps(&intr);
        let opts = RenderOptions {
            noise: DepthNoise::Fixed(0.05),
            dropout: 0.0,
            seed: 7,
        };
        let scene = SyntheticScene::new(vec![GroundTruthPlane::new(0.1, 0.2, 1.0, -2.0).unwrap()]).unwrap();
        let out = render_scene(&scene, &maps, &opts).unwrap();
        for (x, y) in [(0, 0), (63, 47), (10, 30), (40, 5)] {
            let p = back_project((x, y), out.depth.get(x, y).unwrap(), &maps).unwrap();
            let (u, v) = intr.project(&p, (x, y));
            assert!((u - x as f64).abs() < 1e-9 && (v - y as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_fraction_roughly_respected() {
        let maps = small_maps();
        let scene = SyntheticScene::new(vec![GroundTruthPlane::new(0.0, 0.0, 1.0, -2.0).unwrap()]).unwrap();
        let opts = RenderOptions {
            dropout: 0.25,
            ..Default::default()
        };
        let out = render_scene(&scene, &maps, &opts).unwrap();
        let frac = 1.0 - out.depth.valid_count() as f64 / (64.0 * 48.0);
        assert!((frac - 0.25).abs() < 0.04, "dropout fraction {frac}");
        assert!(render_scene(&scene, &maps, &RenderOptions { dropout: 1.5, ..opts }).is_err());
    }

    #[test]
    fn room_corner_shows_all_three_planes() {
        let maps = compute_tan_maps(&CameraIntrinsics::tof_default());
        let out = render_scene(&SyntheticScene::room_corner(), &maps, &RenderOptions::default()).unwrap();
        let mut counts = [0usize; 3];
        for &l in out.labels.as_slice() {
            counts[l as usize] += 1;
        }
        let total = 512 * 424;
        assert_eq!(counts.iter().sum::<usize>(), total);
        assert!(counts.iter().all(|&c| c > total / 10), "{counts:?}");
    }

    #[test]
    fn scene_parsing() {
        let text = "# two planes\n0 0 1 -2\n1 0 0 -1 0,0,10,10\n0 1 0 -1 5 5 20 20\n";
        let scene = SyntheticScene::parse(text).unwrap();
        assert_eq!(scene.planes().len(), 3);
        assert_eq!(scene.planes()[1].mask(), Some(Rect::new(0, 0, 10, 10).unwrap()));
        assert_eq!(scene.planes()[2].mask(), Some(Rect::new(5, 5, 20, 20).unwrap()));
        assert!(SyntheticScene::parse("").is_err());
        assert!(SyntheticScene::parse("0 0 1\n").is_err());
        assert!(SyntheticScene::parse("0 0 0 1\n").is_err());
        assert!(SyntheticScene::parse("0 0 1 -2 5,5,1,1\n").is_err());
    }

    #[test]
    fn millimeter_conversion() {
        let depth = Grid::from_vec(3, 1, vec![2.0, 0.0, 1.2344]).unwrap();
        let img = DepthImage::from_depths(depth);
        let mm = img.to_millimeters();
        assert_eq!(mm.as_slice(), &[2000, 0, 1234]);
        let back = DepthImage::from_millimeters(&mm);
        assert_eq!(back.get(0, 0), Some(2.0));
        assert_eq!(back.get(1, 0), None);
    }
}
