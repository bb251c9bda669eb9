//! Summed-area tables over scatter-matrix monomials.
//!
//! Every channel is a planar `(W+1) x (H+1)` lattice with a zero first row
//! and column, so any rectangular sum is four lookups. Invalid depth pixels
//! contribute zero to every channel and to the count.
//!
//! Channels that depend only on the tan-angle maps live in a constant stack
//! built once per camera. A per-frame stack holds only what the depth
//! image changes: nine monomials for the standard implicit scatter, four
//! for the range-space implicit scatter, eight and three for the explicit
//! forms.

use std::io::BufWriter;
use std::path::Path;

use crate::camera::TanAngleMaps;
use crate::error::{Error, Result};
use crate::fitting::Formulation;
use crate::grid::Grid;
use crate::io;
use crate::synth::DepthImage;

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 > x1 || y0 > y1 {
            return Err(Error::InvalidConfig(format!(
                "inverted rect [{x0},{x1})x[{y0},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub(crate) fn check(&self, width: usize, height: usize) -> Result<()> {
        if !self.fits_in(width, height) {
            return Err(Error::RectOutOfBounds {
                x0: self.x0,
                y0: self.y0,
                x1: self.x1,
                y1: self.y1,
                width,
                height,
            });
        }
        Ok(())
    }

    /// Split into four children with half the width and height. Odd sides
    /// give the extra pixel to the right/bottom child.
    pub fn quadrants(&self) -> [Rect; 4] {
        let xm = self.x0 + self.width() / 2;
        let ym = self.y0 + self.height() / 2;
        [
            Rect { x0: self.x0, y0: self.y0, x1: xm, y1: ym },
            Rect { x0: xm, y0: self.y0, x1: self.x1, y1: ym },
            Rect { x0: self.x0, y0: ym, x1: xm, y1: self.y1 },
            Rect { x0: xm, y0: ym, x1: self.x1, y1: self.y1 },
        ]
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| (x, y)))
    }
}

impl std::fmt::Display for Rect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.x0, self.y0, self.x1, self.y1)
    }
}

impl std::str::FromStr for Rect {
    type Err = Error;

    /// `x0,y0,x1,y1`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Parse(format!("rect {s:?} must be x0,y0,x1,y1")));
        }
        let mut v = [0usize; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| Error::Parse(format!("rect {s:?}: bad coordinate {p:?}")))?;
        }
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

/// Cumulative sums `I(x, y) = sum over [0, x) x [0, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl IntegralImage {
    fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), (width + 1) * (height + 1));
        Self {
            width,
            height,
            data,
        }
    }

    /// Source image width (the table is one wider).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `I(x, y)` for `x <= width`, `y <= height`.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * (self.width + 1) + x]
    }

    pub fn box_sum(&self, r: &Rect) -> Result<f64> {
        r.check(self.width, self.height)?;
        Ok(self.box_sum_unchecked(r))
    }

    /// Caller guarantees the rect lies inside the image.
    #[inline]
    pub fn box_sum_unchecked(&self, r: &Rect) -> f64 {
        let s = self.width + 1;
        let top = r.y0 * s;
        let bot = r.y1 * s;
        self.data[bot + r.x1] - self.data[bot + r.x0] - self.data[top + r.x1] + self.data[top + r.x0]
    }

    pub fn as_grid(&self) -> Grid<f64> {
        Grid::from_vec(self.width + 1, self.height + 1, self.data.clone()).expect("sized")
    }
}

/// Single-channel table over a masked lattice.
pub fn build_integral(channel: &Grid<f64>, mask: &Grid<bool>) -> Result<IntegralImage> {
    let (w, h) = channel.dims();
    mask.check_dims(w, h)?;
    let [data] = fused_pass::<1>(w, h, |x, y, out| {
        out[0] = if mask[(x, y)] { channel[(x, y)] } else { 0.0 };
    });
    Ok(IntegralImage::from_raw(w, h, data))
}

/// One pass over the image filling `K` planar tables. `f` writes the
/// monomial values for pixel `(x, y)` into its output slot; the running
/// row sum plus the cell above gives the table entry.
#[inline(always)]
fn fused_pass<const K: usize>(
    w: usize,
    h: usize,
    mut f: impl FnMut(usize, usize, &mut [f64; K]),
) -> [Vec<f64>; K] {
    let stride = w + 1;
    let mut tables: [Vec<f64>; K] = std::array::from_fn(|_| vec![0.0; stride * (h + 1)]);
    let mut vals = [0.0; K];
    for y in 0..h {
        let mut acc = [0.0; K];
        let above = y * stride;
        let here = (y + 1) * stride;
        for x in 0..w {
            f(x, y, &mut vals);
            for k in 0..K {
                acc[k] += vals[k];
                let t = &mut tables[k];
                t[here + x + 1] = t[above + x + 1] + acc[k];
            }
        }
    }
    tables
}

/// Scatter-matrix monomials a channel may hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Monomial {
    X2,
    XY,
    XZ,
    X,
    Y2,
    YZ,
    Y,
    Z2,
    Z,
    TanX2,
    TanXTanY,
    TanY2,
    TanX,
    TanY,
    TanXOverZ,
    TanYOverZ,
    InvZ,
    InvZ2,
    One,
}

const N_MONOMIALS: usize = Monomial::One as usize + 1;

impl Monomial {
    pub fn name(self) -> &'static str {
        match self {
            Monomial::X2 => "X^2",
            Monomial::XY => "XY",
            Monomial::XZ => "XZ",
            Monomial::X => "X",
            Monomial::Y2 => "Y^2",
            Monomial::YZ => "YZ",
            Monomial::Y => "Y",
            Monomial::Z2 => "Z^2",
            Monomial::Z => "Z",
            Monomial::TanX2 => "tan_x^2",
            Monomial::TanXTanY => "tan_x*tan_y",
            Monomial::TanY2 => "tan_y^2",
            Monomial::TanX => "tan_x",
            Monomial::TanY => "tan_y",
            Monomial::TanXOverZ => "tan_x/Z",
            Monomial::TanYOverZ => "tan_y/Z",
            Monomial::InvZ => "1/Z",
            Monomial::InvZ2 => "1/Z^2",
            Monomial::One => "1",
        }
    }

    /// Per-pixel arithmetic to form the monomial from already available
    /// per-pixel quantities (depth, tan maps, `X`/`Y`/`1/Z` where those are
    /// themselves channels).
    pub fn op_cost(self) -> usize {
        match self {
            Monomial::Z | Monomial::One => 0,
            _ => 1,
        }
    }

    /// Evaluate at one valid pixel, straight from the definition.
    pub fn eval(self, z: f64, tan_x: f64, tan_y: f64) -> f64 {
        let (x, y) = (z * tan_x, z * tan_y);
        match self {
            Monomial::X2 => x * x,
            Monomial::XY => x * y,
            Monomial::XZ => x * z,
            Monomial::X => x,
            Monomial::Y2 => y * y,
            Monomial::YZ => y * z,
            Monomial::Y => y,
            Monomial::Z2 => z * z,
            Monomial::Z => z,
            Monomial::TanX2 => tan_x * tan_x,
            Monomial::TanXTanY => tan_x * tan_y,
            Monomial::TanY2 => tan_y * tan_y,
            Monomial::TanX => tan_x,
            Monomial::TanY => tan_y,
            Monomial::TanXOverZ => tan_x / z,
            Monomial::TanYOverZ => tan_y / z,
            Monomial::InvZ => 1.0 / z,
            Monomial::InvZ2 => 1.0 / (z * z),
            Monomial::One => 1.0,
        }
    }
}

/// Depth-independent monomials of the range-space scatter matrices.
pub const CONSTANT_MONOMIALS: [Monomial; 5] = [
    Monomial::TanX2,
    Monomial::TanXTanY,
    Monomial::TanY2,
    Monomial::TanX,
    Monomial::TanY,
];

/// Per-frame monomials each formulation needs, in build order.
pub fn per_frame_monomials(formulation: Formulation) -> &'static [Monomial] {
    use Monomial::*;
    match formulation {
        Formulation::ImplicitStandard => &[X2, XY, XZ, X, Y2, YZ, Y, Z2, Z],
        Formulation::ImplicitRgbd => &[TanXOverZ, TanYOverZ, InvZ, InvZ2],
        Formulation::ExplicitStandard => &[X2, XY, X, Y2, Y, XZ, YZ, Z],
        Formulation::ExplicitRgbd => &[TanXOverZ, TanYOverZ, InvZ],
    }
}

/// Extra per-frame monomial giving `sum b^2` for the explicit residual.
pub fn residual_monomial(formulation: Formulation) -> Option<Monomial> {
    match formulation {
        Formulation::ExplicitStandard => Some(Monomial::Z2),
        Formulation::ExplicitRgbd => Some(Monomial::InvZ2),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    /// Depends only on the intrinsics; reusable across frames.
    Constant,
    /// Scatter monomial recomputed for every frame.
    PerFrame,
    /// Number of valid pixels.
    Count,
    /// `sum b^2` for explicit residuals; built on request.
    Residual,
    /// Constant monomial summed over this frame's invalid pixels, to be
    /// subtracted from the constant channel.
    HoleCorrection,
}

#[derive(Debug, Clone)]
pub struct Channel {
    pub monomial: Monomial,
    pub kind: ChannelKind,
    pub image: IntegralImage,
}

impl Channel {
    pub fn label(&self) -> String {
        let kind = match self.kind {
            ChannelKind::Constant => "constant",
            ChannelKind::PerFrame => "per_frame",
            ChannelKind::Count => "count",
            ChannelKind::Residual => "residual",
            ChannelKind::HoleCorrection => "hole",
        };
        format!("{kind}:{}", self.monomial.name())
    }
}

/// Set of integral channels sharing one image size.
#[derive(Debug, Clone)]
pub struct ChannelStack {
    width: usize,
    height: usize,
    channels: Vec<Channel>,
    slots: [Option<u8>; N_MONOMIALS],
    hole_slots: [Option<u8>; N_MONOMIALS],
}

impl ChannelStack {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            channels: Vec::new(),
            slots: [None; N_MONOMIALS],
            hole_slots: [None; N_MONOMIALS],
        }
    }

    fn push(&mut self, monomial: Monomial, kind: ChannelKind, data: Vec<f64>) {
        let idx = self.channels.len() as u8;
        let slot = if kind == ChannelKind::HoleCorrection {
            &mut self.hole_slots[monomial as usize]
        } else {
            &mut self.slots[monomial as usize]
        };
        debug_assert!(slot.is_none(), "duplicate channel {monomial:?}");
        *slot = Some(idx);
        self.channels.push(Channel {
            monomial,
            kind,
            image: IntegralImage::from_raw(self.width, self.height, data),
        });
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn count_of(&self, kind: ChannelKind) -> usize {
        self.channels.iter().filter(|c| c.kind == kind).count()
    }

    /// Non-hole channel holding `monomial`.
    #[inline]
    pub fn get(&self, monomial: Monomial) -> Option<&IntegralImage> {
        self.slots[monomial as usize].map(|i| &self.channels[i as usize].image)
    }

    #[inline]
    pub fn hole(&self, monomial: Monomial) -> Option<&IntegralImage> {
        self.hole_slots[monomial as usize].map(|i| &self.channels[i as usize].image)
    }

    pub fn has_hole_correction(&self) -> bool {
        self.hole_slots.iter().any(Option::is_some)
    }

    /// The count channel.
    #[inline]
    pub fn count(&self) -> &IntegralImage {
        self.get(Monomial::One).expect("every stack carries a count channel")
    }

    /// Write each channel as a raw float64 lattice `<prefix><index>.f64`.
    pub fn dump(&self, dir: &Path, prefix: &str) -> Result<()> {
        for (i, ch) in self.channels.iter().enumerate() {
            let path = dir.join(format!("{prefix}{i:02}.f64"));
            let mut w = BufWriter::new(std::fs::File::create(path)?);
            io::write_raw_lattice(&mut w, &ch.label(), &ch.image.as_grid())?;
        }
        Ok(())
    }
}

/// Builder options for per-frame stacks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StackOptions {
    /// Also build the explicit-residual channel.
    pub residual: bool,
}

/// Intrinsics-only channels: the five tan monomials plus the pixel count.
pub fn build_constant_channels(maps: &TanAngleMaps) -> ChannelStack {
    let (w, h) = maps.dims();
    let (tx, ty) = (maps.tan_x.as_slice(), maps.tan_y.as_slice());
    let [a, b, c, d, e, n] = fused_pass::<6>(w, h, |x, y, out| {
        let i = y * w + x;
        let (u, v) = (tx[i], ty[i]);
        *out = [u * u, u * v, v * v, u, v, 1.0];
    });
    let mut stack = ChannelStack::new(w, h);
    for (m, data) in CONSTANT_MONOMIALS.into_iter().zip([a, b, c, d, e]) {
        stack.push(m, ChannelKind::Constant, data);
    }
    stack.push(Monomial::One, ChannelKind::Count, n);
    stack
}

fn check_frame(depth: &DepthImage, maps: &TanAngleMaps) -> Result<()> {
    let (w, h) = maps.dims();
    if depth.dims() != (w, h) {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            got: depth.dims(),
        });
    }
    Ok(())
}

/// Nine per-frame monomials of `[X Y Z 1]` plus the count.
pub fn build_standard_implicit_channels(depth: &DepthImage, maps: &TanAngleMaps) -> Result<ChannelStack> {
    check_frame(depth, maps)?;
    let (w, h) = maps.dims();
    let (zs, valid) = (depth.depths().as_slice(), depth.mask().as_slice());
    let (tx, ty) = (maps.tan_x.as_slice(), maps.tan_y.as_slice());
    let tables = fused_pass::<10>(w, h, |x, y, out| {
        let i = y * w + x;
        if valid[i] {
            let z = zs[i];
            let (px, py) = (z * tx[i], z * ty[i]);
            *out = [px * px, px * py, px * z, px, py * py, py * z, py, z * z, z, 1.0];
        } else {
            *out = [0.0; 10];
        }
    });
    Ok(assemble(w, h, Formulation::ImplicitStandard, tables, None))
}

/// `tan_x/Z`, `tan_y/Z`, `1/Z`, `1/Z^2` plus the count.
pub fn build_rgbd_implicit_channels(depth: &DepthImage, maps: &TanAngleMaps) -> Result<ChannelStack> {
    check_frame(depth, maps)?;
    let (w, h) = maps.dims();
    let (zs, valid) = (depth.depths().as_slice(), depth.mask().as_slice());
    let (tx, ty) = (maps.tan_x.as_slice(), maps.tan_y.as_slice());
    let tables = fused_pass::<5>(w, h, |x, y, out| {
        let i = y * w + x;
        if valid[i] {
            let inv = 1.0 / zs[i];
            *out = [tx[i] * inv, ty[i] * inv, inv, inv * inv, 1.0];
        } else {
            *out = [0.0; 5];
        }
    });
    let mut stack = assemble(w, h, Formulation::ImplicitRgbd, tables, None);
    add_hole_correction(&mut stack, depth, maps);
    Ok(stack)
}

/// Eight per-frame monomials of the `[X Y 1]` normal equations plus the
/// count, and `Z^2` when residuals are requested.
pub fn build_standard_explicit_channels(
    depth: &DepthImage,
    maps: &TanAngleMaps,
    options: StackOptions,
) -> Result<ChannelStack> {
    check_frame(depth, maps)?;
    let (w, h) = maps.dims();
    let (zs, valid) = (depth.depths().as_slice(), depth.mask().as_slice());
    let (tx, ty) = (maps.tan_x.as_slice(), maps.tan_y.as_slice());
    let stack = if options.residual {
        let tables = fused_pass::<10>(w, h, |x, y, out| {
            let i = y * w + x;
            if valid[i] {
                let z = zs[i];
                let (px, py) = (z * tx[i], z * ty[i]);
                *out = [px * px, px * py, px, py * py, py, z * px, z * py, z, 1.0, z * z];
            } else {
                *out = [0.0; 10];
            }
        });
        assemble(w, h, Formulation::ExplicitStandard, tables, Some(Monomial::Z2))
    } else {
        let tables = fused_pass::<9>(w, h, |x, y, out| {
            let i = y * w + x;
            if valid[i] {
                let z = zs[i];
                let (px, py) = (z * tx[i], z * ty[i]);
                *out = [px * px, px * py, px, py * py, py, z * px, z * py, z, 1.0];
            } else {
                *out = [0.0; 9];
            }
        });
        assemble(w, h, Formulation::ExplicitStandard, tables, None)
    };
    Ok(stack)
}

/// `tan_x/Z`, `tan_y/Z`, `1/Z` plus the count, and `1/Z^2` when residuals
/// are requested.
pub fn build_rgbd_explicit_channels(
    depth: &DepthImage,
    maps: &TanAngleMaps,
    options: StackOptions,
) -> Result<ChannelStack> {
    check_frame(depth, maps)?;
    let (w, h) = maps.dims();
    let (zs, valid) = (depth.depths().as_slice(), depth.mask().as_slice());
    let (tx, ty) = (maps.tan_x.as_slice(), maps.tan_y.as_slice());
    let mut stack = if options.residual {
        let tables = fused_pass::<5>(w, h, |x, y, out| {
            let i = y * w + x;
            if valid[i] {
                let inv = 1.0 / zs[i];
                *out = [tx[i] * inv, ty[i] * inv, inv, 1.0, inv * inv];
            } else {
                *out = [0.0; 5];
            }
        });
        assemble(w, h, Formulation::ExplicitRgbd, tables, Some(Monomial::InvZ2))
    } else {
        let tables = fused_pass::<4>(w, h, |x, y, out| {
            let i = y * w + x;
            if valid[i] {
                let inv = 1.0 / zs[i];
                *out = [tx[i] * inv, ty[i] * inv, inv, 1.0];
            } else {
                *out = [0.0; 4];
            }
        });
        assemble(w, h, Formulation::ExplicitRgbd, tables, None)
    };
    add_hole_correction(&mut stack, depth, maps);
    Ok(stack)
}

/// Per-frame stack for any formulation.
pub fn build_frame_channels(
    formulation: Formulation,
    depth: &DepthImage,
    maps: &TanAngleMaps,
    options: StackOptions,
) -> Result<ChannelStack> {
    match formulation {
        Formulation::ImplicitStandard => build_standard_implicit_channels(depth, maps),
        Formulation::ImplicitRgbd => build_rgbd_implicit_channels(depth, maps),
        Formulation::ExplicitStandard => build_standard_explicit_channels(depth, maps, options),
        Formulation::ExplicitRgbd => build_rgbd_explicit_channels(depth, maps, options),
    }
}

/// Tables arrive as the formulation's per-frame monomials, then the count,
/// then the optional residual channel.
fn assemble<const K: usize>(
    w: usize,
    h: usize,
    formulation: Formulation,
    tables: [Vec<f64>; K],
    residual: Option<Monomial>,
) -> ChannelStack {
    let monomials = per_frame_monomials(formulation);
    debug_assert_eq!(monomials.len() + 1 + usize::from(residual.is_some()), K);
    let mut stack = ChannelStack::new(w, h);
    let mut tables = tables.into_iter();
    for &m in monomials {
        stack.push(m, ChannelKind::PerFrame, tables.next().expect("table per monomial"));
    }
    stack.push(Monomial::One, ChannelKind::Count, tables.next().expect("count table"));
    if let Some(m) = residual {
        stack.push(m, ChannelKind::Residual, tables.next().expect("residual table"));
    }
    stack
}

/// Range-space stacks read their tan sums from the constant stack, which
/// covers every pixel. When the frame has holes, sum the constant monomials
/// over the invalid pixels so they can be subtracted.
fn add_hole_correction(stack: &mut ChannelStack, depth: &DepthImage, maps: &TanAngleMaps) {
    let (w, h) = maps.dims();
    if depth.valid_count() == w * h {
        return;
    }
    let valid = depth.mask().as_slice();
    let (tx, ty) = (maps.tan_x.as_slice(), maps.tan_y.as_slice());
    let tables = fused_pass::<5>(w, h, |x, y, out| {
        let i = y * w + x;
        if valid[i] {
            *out = [0.0; 5];
        } else {
            let (u, v) = (tx[i], ty[i]);
            *out = [u * u, u * v, v * v, u, v];
        }
    });
    for (m, data) in CONSTANT_MONOMIALS.into_iter().zip(tables) {
        stack.push(m, ChannelKind::HoleCorrection, data);
    }
}
