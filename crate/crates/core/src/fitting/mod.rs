//! Plane fitting in four formulations, with naive and integral backends.
//!
//! Implicit fits minimize `sum (aX + bY + cZ + d)^2` subject to a unit
//! coefficient vector and take the smallest eigenvector of the scatter
//! matrix. Explicit fits solve normal equations for `Z = aX + bY + c`
//! (standard) or `1/Z = a tan_x + b tan_y + c` (range space).

pub mod linalg;
pub mod scatter;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::camera::TanAngleMaps;
use crate::error::{Error, Result};
use crate::integral::{ChannelStack, Monomial, Rect};
use crate::synth::DepthImage;

use linalg::{symmetric_eigen, Cholesky3, RANK_TOLERANCE};
pub use linalg::{smallest_eigenvector, solve_spd3};
pub use scatter::{accumulate_rect_naive, accumulate_scatter_naive, scatter_from_integrals, Scatter, Scatter3, Scatter4};

/// Coefficients at or below this magnitude count as zero for sign fixing.
pub const SIGN_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Formulation {
    ImplicitStandard,
    ImplicitRgbd,
    ExplicitStandard,
    ExplicitRgbd,
}

impl Formulation {
    pub const ALL: [Formulation; 4] = [
        Formulation::ImplicitStandard,
        Formulation::ImplicitRgbd,
        Formulation::ExplicitStandard,
        Formulation::ExplicitRgbd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Formulation::ImplicitStandard => "implicit-standard",
            Formulation::ImplicitRgbd => "implicit-rgbd",
            Formulation::ExplicitStandard => "explicit-standard",
            Formulation::ExplicitRgbd => "explicit-rgbd",
        }
    }

    pub fn is_rgbd(self) -> bool {
        matches!(self, Formulation::ImplicitRgbd | Formulation::ExplicitRgbd)
    }

    pub fn is_implicit(self) -> bool {
        matches!(self, Formulation::ImplicitStandard | Formulation::ImplicitRgbd)
    }

    pub fn min_samples(self) -> usize {
        if self.is_implicit() {
            4
        } else {
            3
        }
    }

    /// The other formulation with the same implicit/explicit kind.
    pub fn counterpart(self) -> Formulation {
        match self {
            Formulation::ImplicitStandard => Formulation::ImplicitRgbd,
            Formulation::ImplicitRgbd => Formulation::ImplicitStandard,
            Formulation::ExplicitStandard => Formulation::ExplicitRgbd,
            Formulation::ExplicitRgbd => Formulation::ExplicitStandard,
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Formulation::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown formulation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    Naive,
    Integral,
}

impl Backend {
    pub const ALL: [Backend; 2] = [Backend::Naive, Backend::Integral];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Naive => "naive",
            Backend::Integral => "integral",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Backend::Naive),
            "integral" => Ok(Backend::Integral),
            _ => Err(Error::Parse(format!("unknown backend {s:?}"))),
        }
    }
}

/// `aX + bY + cZ + d = 0` with unit 4-norm and a fixed sign: the first
/// nonzero of `(c, b, a, d)` is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitPlane {
    coefficients: [f64; 4],
}

impl ImplicitPlane {
    pub fn new(coefficients: [f64; 4]) -> Result<Self> {
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if coefficients.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateFit("zero coefficient vector"));
        }
        Ok(Self::canonical(coefficients))
    }

    fn canonical(v: [f64; 4]) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut c = v.map(|x| x / norm);
        let lead = [c[2], c[1], c[0], c[3]].into_iter().find(|x| x.abs() > SIGN_EPSILON);
        if lead.is_some_and(|x| x < 0.0) {
            c = c.map(|x| -x);
        }
        Self { coefficients: c }
    }

    pub fn coefficients(&self) -> [f64; 4] {
        self.coefficients
    }

    /// Unit normal `n` and offset `d` with `n . p + d = 0`.
    pub fn unit_normal_form(&self) -> ([f64; 3], f64) {
        let [a, b, c, d] = self.coefficients;
        let n = (a * a + b * b + c * c).sqrt();
        ([a / n, b / n, c / n], d / n)
    }

    /// Signed perpendicular distance of a point.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        let (n, d) = self.unit_normal_form();
        n[0] * p[0] + n[1] * p[1] + n[2] * p[2] + d
    }

    /// Angle between the (unoriented) normals.
    pub fn angle_to(&self, other: &ImplicitPlane) -> f64 {
        let (u, _) = self.unit_normal_form();
        let (v, _) = other.unit_normal_form();
        let cross = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let sin = cross.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).abs();
        sin.atan2(cos)
    }

    /// Offset difference in unit-normal form, relative to `other`'s offset
    /// (absolute when that offset is zero).
    pub fn offset_error_to(&self, other: &ImplicitPlane) -> f64 {
        let (u, d1) = self.unit_normal_form();
        let (v, d2) = other.unit_normal_form();
        let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
        let d1 = if dot < 0.0 { -d1 } else { d1 };
        let diff = (d1 - d2).abs();
        if d2 == 0.0 {
            diff
        } else {
            diff / d2.abs()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExplicitSpace {
    /// `Z = aX + bY + c`
    Standard,
    /// `1/Z = a tan_x + b tan_y + c`
    Rgbd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplicitPlane {
    pub coefficients: [f64; 3],
    pub space: ExplicitSpace,
}

impl ExplicitPlane {
    pub fn to_implicit(&self) -> ImplicitPlane {
        explicit_to_implicit(self)
    }
}

pub fn explicit_to_implicit(plane: &ExplicitPlane) -> ImplicitPlane {
    let [a, b, c] = plane.coefficients;
    match plane.space {
        ExplicitSpace::Standard => ImplicitPlane::canonical([a, b, -1.0, c]),
        // multiply through by Z: aX + bY + cZ - 1 = 0
        ExplicitSpace::Rgbd => ImplicitPlane::canonical([a, b, c, -1.0]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Plane {
    Implicit(ImplicitPlane),
    Explicit(ExplicitPlane),
}

impl Plane {
    pub fn implicit(&self) -> ImplicitPlane {
        match self {
            Plane::Implicit(p) => *p,
            Plane::Explicit(p) => p.to_implicit(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub formulation: Formulation,
    pub plane: Plane,
    /// Root-mean-square of the fitted objective's residual. `None` for
    /// integral explicit fits built without the residual channel.
    pub rms_residual: Option<f64>,
    pub n_points: usize,
    /// Smallest eigenvalue, implicit fits only.
    pub eigenvalue: Option<f64>,
    /// Ambiguous minimum eigenvalue (implicit) or rank-deficient normal
    /// equations (explicit, solved by pseudo-inverse).
    pub degenerate: bool,
}

impl FitResult {
    pub fn implicit(&self) -> ImplicitPlane {
        self.plane.implicit()
    }

    pub const CSV_HEADER: &'static str = "formulation,backend,rect,a,b,c,d,lambda,rms,n_points";

    /// One CSV row; `a..d` are always the canonical implicit coefficients.
    pub fn csv_row(&self, backend: Backend, rect: &Rect) -> String {
        let [a, b, c, d] = self.implicit().coefficients();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},\"{}\",{a},{b},{c},{d},{},{},{}",
            self.formulation,
            backend,
            rect,
            opt(self.eigenvalue),
            opt(self.rms_residual),
            self.n_points
        )
    }
}

fn fit_implicit(s: &Scatter4, formulation: Formulation) -> Result<FitResult> {
    let need = formulation.min_samples();
    if s.n < need {
        return Err(Error::InsufficientSamples { got: s.n, need });
    }
    let eig = symmetric_eigen(&s.m)?;
    let tr = linalg::trace(&s.m).abs();
    let lambda = eig.values[0].max(0.0);
    Ok(FitResult {
        formulation,
        plane: Plane::Implicit(ImplicitPlane::canonical(eig.vectors[0])),
        rms_residual: Some((lambda / s.n as f64).sqrt()),
        n_points: s.n,
        eigenvalue: Some(lambda),
        degenerate: eig.values[1] - eig.values[0] <= RANK_TOLERANCE * tr,
    })
}

pub fn fit_implicit_standard(scatter: &Scatter4) -> Result<FitResult> {
    fit_implicit(scatter, Formulation::ImplicitStandard)
}

/// The eigenvector of the range-space scatter is read directly as the
/// `(a, b, c, d)` of `aX + bY + cZ + d = 0`.
pub fn fit_implicit_rgbd(scatter: &Scatter4) -> Result<FitResult> {
    fit_implicit(scatter, Formulation::ImplicitRgbd)
}

/// Minimum-norm least squares through the eigen-decomposition, for
/// rank-deficient normal equations.
fn pseudo_solve(m: &[[f64; 3]; 3], rhs: &[f64; 3]) -> Result<[f64; 3]> {
    let eig = symmetric_eigen(m)?;
    let tol = RANK_TOLERANCE * linalg::trace(m).abs();
    let mut x = [0.0; 3];
    for (lambda, v) in eig.values.iter().zip(&eig.vectors) {
        if *lambda > tol {
            let w = (v[0] * rhs[0] + v[1] * rhs[1] + v[2] * rhs[2]) / lambda;
            for i in 0..3 {
                x[i] += w * v[i];
            }
        }
    }
    Ok(x)
}

fn explicit_rms(s: &Scatter3, alpha: &[f64; 3]) -> Option<f64> {
    let b_sq = s.b_sq?;
    let m_alpha = linalg::mat_vec(&s.m, alpha);
    let quad: f64 = (0..3).map(|i| alpha[i] * m_alpha[i]).sum();
    let cross: f64 = (0..3).map(|i| alpha[i] * s.rhs[i]).sum();
    Some(((b_sq - 2.0 * cross + quad).max(0.0) / s.n as f64).sqrt())
}

fn explicit_result(s: &Scatter3, formulation: Formulation, alpha: [f64; 3], degenerate: bool) -> Result<FitResult> {
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let space = if formulation.is_rgbd() {
        ExplicitSpace::Rgbd
    } else {
        ExplicitSpace::Standard
    };
    Ok(FitResult {
        formulation,
        plane: Plane::Explicit(ExplicitPlane {
            coefficients: alpha,
            space,
        }),
        rms_residual: explicit_rms(s, &alpha),
        n_points: s.n,
        eigenvalue: None,
        degenerate,
    })
}

fn fit_explicit(s: &Scatter3, formulation: Formulation) -> Result<FitResult> {
    let need = formulation.min_samples();
    if s.n < need {
        return Err(Error::InsufficientSamples { got: s.n, need });
    }
    match Cholesky3::factor(&s.m) {
        Ok(chol) => explicit_result(s, formulation, chol.solve(&s.rhs), false),
        Err(Error::DegenerateFit(_)) => explicit_result(s, formulation, pseudo_solve(&s.m, &s.rhs)?, true),
        Err(e) => Err(e),
    }
}

/// Normal equations for `Z = aX + bY + c`. Rank-deficient windows (such as
/// a plane containing the optical axis direction) come back flagged
/// `degenerate` with the minimum-norm solution.
pub fn fit_explicit_standard(scatter: &Scatter3) -> Result<FitResult> {
    fit_explicit(scatter, Formulation::ExplicitStandard)
}

/// Normal equations for `1/Z = a tan_x + b tan_y + c`. A plane through the
/// camera centre has no such form; its window is rank-deficient and the
/// result is flagged `degenerate`.
pub fn fit_explicit_rgbd(scatter: &Scatter3) -> Result<FitResult> {
    fit_explicit(scatter, Formulation::ExplicitRgbd)
}

pub fn fit_scatter(scatter: &Scatter, formulation: Formulation) -> Result<FitResult> {
    match (scatter, formulation.is_implicit()) {
        (Scatter::Implicit(s), true) => fit_implicit(s, formulation),
        (Scatter::Explicit(s), false) => fit_explicit(s, formulation),
        _ => Err(Error::InvalidConfig(format!("scatter shape does not match {formulation}"))),
    }
}

/// Naive backend: accumulate the window pixel by pixel, then fit.
pub fn fit_rect_naive(depth: &DepthImage, maps: &TanAngleMaps, rect: &Rect, formulation: Formulation) -> Result<FitResult> {
    fit_scatter(&accumulate_rect_naive(depth, maps, rect, formulation)?, formulation)
}

/// Integral backend: one box sum per scatter entry, then fit.
pub fn fit_rect_integral(
    frame: &ChannelStack,
    constant: Option<&ChannelStack>,
    rect: &Rect,
    formulation: Formulation,
) -> Result<FitResult> {
    fit_scatter(&scatter_from_integrals(frame, constant, rect, formulation)?, formulation)
}

/// Depth-independent explicit range-space scatter for one rect and its
/// Cholesky factor, reusable across frames.
#[derive(Debug, Clone)]
pub struct PrecomputedRgbd {
    rect: Rect,
    factor: Option<Cholesky3>,
}

impl PrecomputedRgbd {
    pub fn new(constant: &ChannelStack, rect: Rect) -> Result<Self> {
        rect.check(constant.width(), constant.height())?;
        let block = scatter::constant_block(constant, &rect)?;
        Ok(Self {
            rect,
            factor: Cholesky3::factor(&block).ok(),
        })
    }

    pub fn rect(&self) -> &Rect {
        &self.rect
    }

    /// Fit from a per-frame explicit range-space stack. Rects with holes
    /// or a singular constant block fall back to a full refit.
    pub fn fit(&self, frame: &ChannelStack, constant: &ChannelStack) -> Result<FitResult> {
        let r = &self.rect;
        let n = frame.count().box_sum(r)?.round() as usize;
        let Some(factor) = self.factor.as_ref().filter(|_| n == r.area()) else {
            return fit_rect_integral(frame, Some(constant), r, Formulation::ExplicitRgbd);
        };
        let need = Formulation::ExplicitRgbd.min_samples();
        if n < need {
            return Err(Error::InsufficientSamples { got: n, need });
        }
        let channel = |m: Monomial| {
            frame
                .get(m)
                .map(|c| c.box_sum_unchecked(r))
                .ok_or_else(|| Error::InvalidConfig(format!("channel stack lacks {}", m.name())))
        };
        let rhs = [channel(Monomial::TanXOverZ)?, channel(Monomial::TanYOverZ)?, channel(Monomial::InvZ)?];
        let alpha = factor.solve(&rhs);
        let needs_m = frame.get(Monomial::InvZ2).is_some();
        let s = Scatter3 {
            m: if needs_m {
                scatter::constant_block(constant, r)?
            } else {
                [[0.0; 3]; 3]
            },
            rhs,
            b_sq: frame.get(Monomial::InvZ2).map(|c| c.box_sum_unchecked(r)),
            n,
        };
        explicit_result(&s, Formulation::ExplicitRgbd, alpha, false)
    }
}

/// Precomputed explicit range-space factors for a fixed set of rects.
#[derive(Debug, Clone, Default)]
pub struct RgbdFactorCache {
    entries: HashMap<Rect, PrecomputedRgbd>,
}

impl RgbdFactorCache {
    pub fn new(constant: &ChannelStack, rects: impl IntoIterator<Item = Rect>) -> Result<Self> {
        let mut entries = HashMap::new();
        for r in rects {
            if let std::collections::hash_map::Entry::Vacant(e) = entries.entry(r) {
                e.insert(PrecomputedRgbd::new(constant, r)?);
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, rect: &Rect) -> Option<&PrecomputedRgbd> {
        self.entries.get(rect)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Fits arbitrary rects of one frame with a fixed formulation and backend.
#[derive(Debug, Clone, Copy)]
pub enum Fitter<'a> {
    Naive {
        formulation: Formulation,
        depth: &'a DepthImage,
        maps: &'a TanAngleMaps,
    },
    Integral {
        formulation: Formulation,
        frame: &'a ChannelStack,
        constant: Option<&'a ChannelStack>,
        cache: Option<&'a RgbdFactorCache>,
    },
}

impl Fitter<'_> {
    pub fn formulation(&self) -> Formulation {
        match self {
            Fitter::Naive { formulation, .. } | Fitter::Integral { formulation, .. } => *formulation,
        }
    }

    pub fn backend(&self) -> Backend {
        match self {
            Fitter::Naive { .. } => Backend::Naive,
            Fitter::Integral { .. } => Backend::Integral,
        }
    }

    pub fn fit(&self, rect: &Rect) -> Result<FitResult> {
        match *self {
            Fitter::Naive { formulation, depth, maps } => fit_rect_naive(depth, maps, rect, formulation),
            Fitter::Integral {
                formulation,
                frame,
                constant,
                cache,
            } => {
                if formulation == Formulation::ExplicitRgbd {
                    if let (Some(pre), Some(constant)) = (cache.and_then(|c| c.get(rect)), constant) {
                        return pre.fit(frame, constant);
                    }
                }
                fit_rect_integral(frame, constant, rect, formulation)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{compute_tan_maps, CameraIntrinsics};
    use crate::grid::Grid;
    use crate::integral::{build_constant_channels, build_frame_channels, StackOptions};

    fn implicit_scatter(points: &[[f64; 3]]) -> Scatter4 {
        match accumulate_scatter_naive(points, Formulation::ImplicitStandard).unwrap() {
            Scatter::Implicit(s) => s,
            _ => unreachable!(),
        }
    }

    fn explicit_scatter(samples: &[[f64; 3]], f: Formulation) -> Scatter3 {
        match accumulate_scatter_naive(samples, f).unwrap() {
            Scatter::Explicit(s) => s,
            _ => unreachable!(),
        }
    }

    fn close4(a: [f64; 4], b: [f64; 4], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn grid_points(f: impl Fn(f64, f64) -> [f64; 3]) -> Vec<[f64; 3]> {
        (0..5)
            .flat_map(|i| (0..5).map(move |j| (i as f64 - 2.0, j as f64 - 2.0)))
            .map(|(u, v)| f(u, v))
            .collect()
    }

    #[test]
    fn formulation_names_roundtrip() {
        for f in Formulation::ALL {
            assert_eq!(f.name().parse::<Formulation>().unwrap(), f);
            assert_eq!(f.counterpart().counterpart(), f);
        }
        assert!("implicit".parse::<Formulation>().is_err());
        assert_eq!("integral".parse::<Backend>().unwrap(), Backend::Integral);
    }

    #[test]
    fn canonical_sign_rules() {
        let p = ImplicitPlane::new([0.0, 0.0, -1.0, 3.0]).unwrap();
        let s = 10f64.sqrt();
        assert!(close4(p.coefficients(), [0.0, 0.0, 1.0 / s, -3.0 / s], 1e-15));
        // c == 0: b decides
        let p = ImplicitPlane::new([1.0, -2.0, 0.0, 1.0]).unwrap();
        assert!(p.coefficients()[1] > 0.0);
        // only d nonzero in the normal part is invalid geometry but still canonical
        let p = ImplicitPlane::new([0.0, 0.0, 0.0, -2.0]).unwrap();
        assert_eq!(p.coefficients(), [0.0, 0.0, 0.0, 1.0]);
        assert!(ImplicitPlane::new([0.0; 4]).is_err());
        assert!(ImplicitPlane::new([f64::NAN, 0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn implicit_standard_axis_plane() {
        let pts = grid_points(|u, v| [u, v, 3.0]);
        let r = fit_implicit_standard(&implicit_scatter(&pts)).unwrap();
        let s = 10f64.sqrt();
        assert!(close4(r.implicit().coefficients(), [0.0, 0.0, 1.0 / s, -3.0 / s], 1e-12));
        assert!(!r.degenerate);
        assert!(r.rms_residual.unwrap() < 1e-7);
    }

    #[test]
    fn implicit_standard_x_equals_one() {
        let pts = grid_points(|u, v| [1.0, u, v + 4.0]);
        let s = implicit_scatter(&pts);
        let r = fit_implicit_standard(&s).unwrap();
        let h = 0.5f64.sqrt();
        assert!(close4(r.implicit().coefficients(), [h, 0.0, 0.0, -h], 1e-12));
        assert!(r.eigenvalue.unwrap() <= 1e-18 * linalg::frobenius(&s.m).max(1.0) * 1e3);
    }

    #[test]
    fn implicit_rms_squared_times_n_is_lambda() {
        let pts = grid_points(|u, v| [u, v, 2.0 + 0.01 * ((u * 7.0 + v * 3.0).sin())]);
        let r = fit_implicit_standard(&implicit_scatter(&pts)).unwrap();
        let rms = r.rms_residual.unwrap();
        assert!((rms * rms * r.n_points as f64 - r.eigenvalue.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn collinear_samples_flag_degenerate() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 2.0 * i as f64, 1.0 + i as f64]).collect();
        let r = fit_implicit_standard(&implicit_scatter(&pts)).unwrap();
        assert!(r.degenerate);
    }

    #[test]
    fn implicit_rgbd_frontal_plane() {
        // tan samples on Z = 3
        let samples = grid_points(|u, v| [0.1 * u, 0.1 * v, 3.0]);
        let Scatter::Implicit(s) = accumulate_scatter_naive(&samples, Formulation::ImplicitRgbd).unwrap() else {
            unreachable!()
        };
        let r = fit_implicit_rgbd(&s).unwrap();
        let q = 10f64.sqrt();
        assert!(close4(r.implicit().coefficients(), [0.0, 0.0, 1.0 / q, -3.0 / q], 1e-12));
    }

    #[test]
    fn explicit_standard_examples() {
        let flat = grid_points(|u, v| [u, v, 3.0]);
        let r = fit_explicit_standard(&explicit_scatter(&flat, Formulation::ExplicitStandard)).unwrap();
        let Plane::Explicit(p) = r.plane else { panic!() };
        assert!(p.coefficients.iter().zip([0.0, 0.0, 3.0]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(r.rms_residual.unwrap() < 1e-7);

        let tilted = grid_points(|u, v| [u, v, 0.5 * u + 2.0]);
        let r = fit_explicit_standard(&explicit_scatter(&tilted, Formulation::ExplicitStandard)).unwrap();
        let Plane::Explicit(p) = r.plane else { panic!() };
        assert!(p.coefficients.iter().zip([0.5, 0.0, 2.0]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn explicit_standard_axis_parallel_plane_is_flagged() {
        // X = 1 contains the Z direction: no Z = f(X, Y) form
        let pts = grid_points(|u, v| [1.0, u, v + 4.0]);
        let r = fit_explicit_standard(&explicit_scatter(&pts, Formulation::ExplicitStandard)).unwrap();
        assert!(r.degenerate);
    }

    #[test]
    fn explicit_rgbd_examples() {
        let flat = grid_points(|u, v| [0.1 * u, 0.1 * v, 2.0]);
        let r = fit_explicit_rgbd(&explicit_scatter(&flat, Formulation::ExplicitRgbd)).unwrap();
        let Plane::Explicit(p) = r.plane else { panic!() };
        assert!(p.coefficients.iter().zip([0.0, 0.0, 0.5]).all(|(a, b)| (a - b).abs() < 1e-12));

        // X + Z = 4 -> Z = 4 / (tan_x + 1)
        let slanted = grid_points(|u, v| [0.1 * u, 0.1 * v, 4.0 / (0.1 * u + 1.0)]);
        let r = fit_explicit_rgbd(&explicit_scatter(&slanted, Formulation::ExplicitRgbd)).unwrap();
        let Plane::Explicit(p) = r.plane else { panic!() };
        assert!(p.coefficients.iter().zip([0.25, 0.0, 0.25]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn explicit_rgbd_plane_through_origin_is_flagged() {
        // X - Z = 0 is seen edge-on: every sample has tan_x = 1
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [1.0, 0.05 * i as f64 - 0.5, 1.0 + 0.1 * i as f64]).collect();
        let r = fit_explicit_rgbd(&explicit_scatter(&pts, Formulation::ExplicitRgbd)).unwrap();
        assert!(r.degenerate);
    }

    #[test]
    fn explicit_to_implicit_examples() {
        let s = ExplicitPlane {
            coefficients: [0.0, 0.0, 3.0],
            space: ExplicitSpace::Standard,
        };
        let q = 10f64.sqrt();
        assert!(close4(s.to_implicit().coefficients(), [0.0, 0.0, 1.0 / q, -3.0 / q], 1e-15));
        let r = ExplicitPlane {
            coefficients: [0.0, 0.0, 0.5],
            space: ExplicitSpace::Rgbd,
        };
        let q = 5f64.sqrt();
        assert!(close4(r.to_implicit().coefficients(), [0.0, 0.0, 1.0 / q, -2.0 / q], 1e-15));
    }

    #[test]
    fn angle_and_offset_errors() {
        let a = ImplicitPlane::new([0.0, 0.0, 1.0, -2.0]).unwrap();
        let b = ImplicitPlane::new([0.0, 1e-3, 1.0, -2.0]).unwrap();
        assert!((a.angle_to(&b) - 1e-3f64.atan()).abs() < 1e-12);
        assert_eq!(a.angle_to(&a), 0.0);
        let c = ImplicitPlane::new([0.0, 0.0, 1.0, -2.2]).unwrap();
        assert!((c.offset_error_to(&a) - 0.1).abs() < 1e-12);
        assert!((a.distance([5.0, 1.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_row_shape() {
        let pts = grid_points(|u, v| [u, v, 3.0]);
        let r = fit_explicit_standard(&explicit_scatter(&pts, Formulation::ExplicitStandard)).unwrap();
        let row = r.csv_row(Backend::Naive, &Rect::new(0, 0, 5, 5).unwrap());
        assert!(row.starts_with("explicit-standard,naive,\"0,0,5,5\","));
        assert_eq!(row.split(',').count(), FitResult::CSV_HEADER.split(',').count() + 3);
        // explicit fits leave lambda empty
        assert!(row.contains(",,"));
    }

    fn slanted_frame(holes: bool) -> (DepthImage, TanAngleMaps) {
        let maps = compute_tan_maps(&CameraIntrinsics::new(60.0, 60.0, 20.0, 15.0, 40, 30).unwrap());
        // 0.2X - 0.1Y + Z - 2 = 0
        let depth = Grid::from_fn(40, 30, |x, y| {
            let (tx, ty) = maps.at(x, y);
            if holes && (x * 7 + y * 3) % 11 == 0 {
                0.0
            } else {
                2.0 / (0.2 * tx - 0.1 * ty + 1.0)
            }
        });
        (DepthImage::from_depths(depth), maps)
    }

    #[test]
    fn cached_factor_matches_refactorization_bitwise() {
        let (depth, maps) = slanted_frame(false);
        let (depth2, _) = {
            let g = Grid::from_fn(40, 30, |x, y| depth.get(x, y).unwrap() * 1.1);
            (DepthImage::from_depths(g), ())
        };
        let constant = build_constant_channels(&maps);
        let rect = Rect::new(4, 3, 30, 25).unwrap();
        let pre = PrecomputedRgbd::new(&constant, rect).unwrap();
        for d in [&depth, &depth2] {
            for residual in [false, true] {
                let frame = build_frame_channels(Formulation::ExplicitRgbd, d, &maps, StackOptions { residual }).unwrap();
                let cached = pre.fit(&frame, &constant).unwrap();
                let fresh = fit_rect_integral(&frame, Some(&constant), &rect, Formulation::ExplicitRgbd).unwrap();
                assert_eq!(cached, fresh);
            }
        }
    }

    #[test]
    fn cached_factor_falls_back_with_holes() {
        let (depth, maps) = slanted_frame(true);
        let constant = build_constant_channels(&maps);
        let rect = Rect::new(0, 0, 40, 30).unwrap();
        let cache = RgbdFactorCache::new(&constant, [rect, rect]).unwrap();
        assert_eq!(cache.len(), 1);
        let frame = build_frame_channels(Formulation::ExplicitRgbd, &depth, &maps, StackOptions { residual: true }).unwrap();
        let fitter = Fitter::Integral {
            formulation: Formulation::ExplicitRgbd,
            frame: &frame,
            constant: Some(&constant),
            cache: Some(&cache),
        };
        let r = fitter.fit(&rect).unwrap();
        assert_eq!(r.n_points, depth.valid_count());
        let naive = fit_rect_naive(&depth, &maps, &rect, Formulation::ExplicitRgbd).unwrap();
        let truth = ImplicitPlane::new([0.2, -0.1, 1.0, -2.0]).unwrap();
        assert!(r.implicit().angle_to(&truth) < 1e-9);
        assert!(naive.implicit().angle_to(&truth) < 1e-9);
    }

    #[test]
    fn all_formulations_recover_frame_plane_both_backends() {
        let (depth, maps) = slanted_frame(true);
        let constant = build_constant_channels(&maps);
        let truth = ImplicitPlane::new([0.2, -0.1, 1.0, -2.0]).unwrap();
        let rect = Rect::new(5, 5, 35, 25).unwrap();
        for f in Formulation::ALL {
            let frame = build_frame_channels(f, &depth, &maps, StackOptions { residual: true }).unwrap();
            let fitters = [
                Fitter::Naive {
                    formulation: f,
                    depth: &depth,
                    maps: &maps,
                },
                Fitter::Integral {
                    formulation: f,
                    frame: &frame,
                    constant: Some(&constant),
                    cache: None,
                },
            ];
            for fitter in fitters {
                let r = fitter.fit(&rect).unwrap();
                assert!(r.implicit().angle_to(&truth) < 1e-9, "{f} {}", fitter.backend());
                assert!(r.implicit().offset_error_to(&truth) < 1e-9);
                assert!(r.rms_residual.unwrap() < 1e-6);
            }
        }
    }
}
