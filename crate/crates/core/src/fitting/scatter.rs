//! Scatter matrices `M^t M` (and `M^t b` for explicit fits) per formulation.
//!
//! | formulation        | monomial row          | target |
//! |--------------------|-----------------------|--------|
//! | implicit standard  | `[X, Y, Z, 1]`        |        |
//! | implicit range     | `[tx, ty, 1, 1/Z]`    |        |
//! | explicit standard  | `[X, Y, 1]`           | `Z`    |
//! | explicit range     | `[tx, ty, 1]`         | `1/Z`  |

use crate::camera::TanAngleMaps;
use crate::error::{Error, Result};
use crate::integral::{ChannelStack, IntegralImage, Monomial, Rect};
use crate::synth::DepthImage;

use super::Formulation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatter4 {
    pub m: [[f64; 4]; 4],
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatter3 {
    pub m: [[f64; 3]; 3],
    pub rhs: [f64; 3],
    /// `sum b^2`, needed only for the residual.
    pub b_sq: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scatter {
    Implicit(Scatter4),
    Explicit(Scatter3),
}

impl Scatter {
    pub fn n(&self) -> usize {
        match self {
            Scatter::Implicit(s) => s.n,
            Scatter::Explicit(s) => s.n,
        }
    }

    /// Upper-triangle entries, then the right-hand side for explicit forms.
    pub fn entries(&self) -> Vec<f64> {
        match self {
            Scatter::Implicit(s) => (0..4).flat_map(|i| (i..4).map(move |j| s.m[i][j])).collect(),
            Scatter::Explicit(s) => (0..3)
                .flat_map(|i| (i..3).map(move |j| s.m[i][j]))
                .chain(s.rhs)
                .collect(),
        }
    }

    /// Entrywise sum, for disjoint sample sets.
    pub fn add(&self, other: &Scatter) -> Option<Scatter> {
        match (self, other) {
            (Scatter::Implicit(a), Scatter::Implicit(b)) => {
                let mut m = a.m;
                for i in 0..4 {
                    for j in 0..4 {
                        m[i][j] += b.m[i][j];
                    }
                }
                Some(Scatter::Implicit(Scatter4 { m, n: a.n + b.n }))
            }
            (Scatter::Explicit(a), Scatter::Explicit(b)) => {
                let mut m = a.m;
                for i in 0..3 {
                    for j in 0..3 {
                        m[i][j] += b.m[i][j];
                    }
                }
                let rhs = std::array::from_fn(|i| a.rhs[i] + b.rhs[i]);
                let b_sq = a.b_sq.zip(b.b_sq).map(|(x, y)| x + y);
                Some(Scatter::Explicit(Scatter3 { m, rhs, b_sq, n: a.n + b.n }))
            }
            _ => None,
        }
    }
}

/// Running monomial sums for one formulation. `push` takes `(X, Y, Z)` for
/// standard formulations and `(tan_x, tan_y, Z)` for range-space ones.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Accumulator {
    formulation: Formulation,
    s: [f64; 13],
    n: usize,
}

impl Accumulator {
    pub(crate) fn new(formulation: Formulation) -> Self {
        Self {
            formulation,
            s: [0.0; 13],
            n: 0,
        }
    }

    #[inline(always)]
    pub(crate) fn push(&mut self, a: f64, b: f64, z: f64) {
        let s = &mut self.s;
        self.n += 1;
        match self.formulation {
            Formulation::ImplicitStandard => {
                s[0] += a * a;
                s[1] += a * b;
                s[2] += a * z;
                s[3] += a;
                s[4] += b * b;
                s[5] += b * z;
                s[6] += b;
                s[7] += z * z;
                s[8] += z;
            }
            Formulation::ImplicitRgbd => {
                let inv = 1.0 / z;
                s[0] += a * a;
                s[1] += a * b;
                s[2] += a;
                s[3] += a * inv;
                s[4] += b * b;
                s[5] += b;
                s[6] += b * inv;
                s[7] += inv;
                s[8] += inv * inv;
            }
            Formulation::ExplicitStandard => {
                s[0] += a * a;
                s[1] += a * b;
                s[2] += a;
                s[3] += b * b;
                s[4] += b;
                s[5] += a * z;
                s[6] += b * z;
                s[7] += z;
                s[8] += z * z;
            }
            Formulation::ExplicitRgbd => {
                let inv = 1.0 / z;
                s[0] += a * a;
                s[1] += a * b;
                s[2] += a;
                s[3] += b * b;
                s[4] += b;
                s[5] += a * inv;
                s[6] += b * inv;
                s[7] += inv;
                s[8] += inv * inv;
            }
        }
    }

    pub(crate) fn finish(&self) -> Result<Scatter> {
        let need = self.formulation.min_samples();
        if self.n < need {
            return Err(Error::InsufficientSamples { got: self.n, need });
        }
        let s = &self.s;
        let n = self.n as f64;
        Ok(match self.formulation {
            Formulation::ImplicitStandard => Scatter::Implicit(Scatter4 {
                m: [
                    [s[0], s[1], s[2], s[3]],
                    [s[1], s[4], s[5], s[6]],
                    [s[2], s[5], s[7], s[8]],
                    [s[3], s[6], s[8], n],
                ],
                n: self.n,
            }),
            Formulation::ImplicitRgbd => Scatter::Implicit(Scatter4 {
                m: [
                    [s[0], s[1], s[2], s[3]],
                    [s[1], s[4], s[5], s[6]],
                    [s[2], s[5], n, s[7]],
                    [s[3], s[6], s[7], s[8]],
                ],
                n: self.n,
            }),
            Formulation::ExplicitStandard | Formulation::ExplicitRgbd => Scatter::Explicit(Scatter3 {
                m: [[s[0], s[1], s[2]], [s[1], s[3], s[4]], [s[2], s[4], n]],
                rhs: [s[5], s[6], s[7]],
                b_sq: Some(s[8]),
                n: self.n,
            }),
        })
    }
}

/// Direct `M^t M` accumulation. Samples are `(X, Y, Z)` for standard
/// formulations and `(tan_x, tan_y, Z)` for range-space ones.
pub fn accumulate_scatter_naive(samples: &[[f64; 3]], formulation: Formulation) -> Result<Scatter> {
    let mut acc = Accumulator::new(formulation);
    for &[a, b, z] in samples {
        acc.push(a, b, z);
    }
    acc.finish()
}

/// Naive accumulation over the valid pixels of a rectangle. Standard
/// formulations form `X`, `Y` with two multiplies per pixel; range-space
/// ones read the tan maps and divide once for `1/Z`.
pub fn accumulate_rect_naive(
    depth: &DepthImage,
    maps: &TanAngleMaps,
    rect: &Rect,
    formulation: Formulation,
) -> Result<Scatter> {
    let (w, h) = maps.dims();
    if depth.dims() != (w, h) {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            got: depth.dims(),
        });
    }
    rect.check(w, h)?;
    let zs = depth.depths().as_slice();
    let valid = depth.mask().as_slice();
    let (tx, ty) = (maps.tan_x.as_slice(), maps.tan_y.as_slice());
    let mut acc = Accumulator::new(formulation);
    let standard = !formulation.is_rgbd();
    for y in rect.y0..rect.y1 {
        let row = y * w;
        for i in row + rect.x0..row + rect.x1 {
            if !valid[i] {
                continue;
            }
            let z = zs[i];
            if standard {
                acc.push(z * tx[i], z * ty[i], z);
            } else {
                acc.push(tx[i], ty[i], z);
            }
        }
    }
    acc.finish()
}

#[inline(always)]
fn boxed(img: &IntegralImage, r: &Rect) -> f64 {
    img.box_sum_unchecked(r)
}

fn channel(stack: &ChannelStack, m: Monomial) -> Result<&IntegralImage> {
    stack
        .get(m)
        .ok_or_else(|| Error::InvalidConfig(format!("channel stack lacks {}", m.name())))
}

/// Sum of a depth-independent monomial over the valid pixels of `r`: the
/// constant table minus this frame's holes.
#[inline(always)]
fn constant_sum(constant: &ChannelStack, frame: &ChannelStack, m: Monomial, r: &Rect) -> Result<f64> {
    let all = boxed(channel(constant, m)?, r);
    Ok(match frame.hole(m) {
        Some(h) => all - boxed(h, r),
        None => all,
    })
}

/// Depth-independent block of the range-space scatter over `r`, assuming
/// every pixel is valid.
pub(crate) fn constant_block(constant: &ChannelStack, r: &Rect) -> Result<[[f64; 3]; 3]> {
    let txx = boxed(channel(constant, Monomial::TanX2)?, r);
    let txy = boxed(channel(constant, Monomial::TanXTanY)?, r);
    let tyy = boxed(channel(constant, Monomial::TanY2)?, r);
    let tx = boxed(channel(constant, Monomial::TanX)?, r);
    let ty = boxed(channel(constant, Monomial::TanY)?, r);
    let n = r.area() as f64;
    Ok([[txx, txy, tx], [txy, tyy, ty], [tx, ty, n]])
}

/// Scatter for `rect` from integral channels: one box sum per entry.
///
/// Range-space formulations read the tan block from `constant`; standard
/// formulations ignore it.
pub fn scatter_from_integrals(
    frame: &ChannelStack,
    constant: Option<&ChannelStack>,
    rect: &Rect,
    formulation: Formulation,
) -> Result<Scatter> {
    let (w, h) = frame.dims();
    rect.check(w, h)?;
    let n_valid = boxed(frame.count(), rect).round() as usize;
    let need = formulation.min_samples();
    if n_valid < need {
        return Err(Error::InsufficientSamples { got: n_valid, need });
    }
    let n = n_valid as f64;
    let r = rect;
    let get = |m| channel(frame, m).map(|c| boxed(c, r));

    let constant_stack = || {
        let c = constant.ok_or_else(|| Error::InvalidConfig("range-space fit needs the constant channel stack".into()))?;
        if c.dims() != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                got: c.dims(),
            });
        }
        Ok(c)
    };

    Ok(match formulation {
        Formulation::ImplicitStandard => {
            let (xx, xy, xz, x) = (get(Monomial::X2)?, get(Monomial::XY)?, get(Monomial::XZ)?, get(Monomial::X)?);
            let (yy, yz, y) = (get(Monomial::Y2)?, get(Monomial::YZ)?, get(Monomial::Y)?);
            let (zz, z) = (get(Monomial::Z2)?, get(Monomial::Z)?);
            Scatter::Implicit(Scatter4 {
                m: [[xx, xy, xz, x], [xy, yy, yz, y], [xz, yz, zz, z], [x, y, z, n]],
                n: n_valid,
            })
        }
        Formulation::ImplicitRgbd => {
            let c = constant_stack()?;
            let txx = constant_sum(c, frame, Monomial::TanX2, r)?;
            let txy = constant_sum(c, frame, Monomial::TanXTanY, r)?;
            let tyy = constant_sum(c, frame, Monomial::TanY2, r)?;
            let tx = constant_sum(c, frame, Monomial::TanX, r)?;
            let ty = constant_sum(c, frame, Monomial::TanY, r)?;
            let (txz, tyz) = (get(Monomial::TanXOverZ)?, get(Monomial::TanYOverZ)?);
            let (iz, izz) = (get(Monomial::InvZ)?, get(Monomial::InvZ2)?);
            Scatter::Implicit(Scatter4 {
                m: [
                    [txx, txy, tx, txz],
                    [txy, tyy, ty, tyz],
                    [tx, ty, n, iz],
                    [txz, tyz, iz, izz],
                ],
                n: n_valid,
            })
        }
        Formulation::ExplicitStandard => {
            let (xx, xy, x) = (get(Monomial::X2)?, get(Monomial::XY)?, get(Monomial::X)?);
            let (yy, y) = (get(Monomial::Y2)?, get(Monomial::Y)?);
            let rhs = [get(Monomial::XZ)?, get(Monomial::YZ)?, get(Monomial::Z)?];
            Scatter::Explicit(Scatter3 {
                m: [[xx, xy, x], [xy, yy, y], [x, y, n]],
                rhs,
                b_sq: frame.get(Monomial::Z2).map(|c| boxed(c, r)),
                n: n_valid,
            })
        }
        Formulation::ExplicitRgbd => {
            let c = constant_stack()?;
            let m = if n_valid == rect.area() {
                constant_block(c, r)?
            } else {
                let txx = constant_sum(c, frame, Monomial::TanX2, r)?;
                let txy = constant_sum(c, frame, Monomial::TanXTanY, r)?;
                let tyy = constant_sum(c, frame, Monomial::TanY2, r)?;
                let tx = constant_sum(c, frame, Monomial::TanX, r)?;
                let ty = constant_sum(c, frame, Monomial::TanY, r)?;
                [[txx, txy, tx], [txy, tyy, ty], [tx, ty, n]]
            };
            let rhs = [get(Monomial::TanXOverZ)?, get(Monomial::TanYOverZ)?, get(Monomial::InvZ)?];
            Scatter::Explicit(Scatter3 {
                m,
                rhs,
                b_sq: frame.get(Monomial::InvZ2).map(|c| boxed(c, r)),
                n: n_valid,
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{compute_tan_maps, CameraIntrinsics};
    use crate::grid::Grid;
    use crate::integral::{build_constant_channels, build_frame_channels, StackOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn four_points_hand_accumulated() {
        // Z = 1 plane at tan = (+-1, +-1): X = tan_x, Y = tan_y.
        let pts = [[1.0, 1.0, 1.0], [1.0, -1.0, 1.0], [-1.0, 1.0, 1.0], [-1.0, -1.0, 1.0]];
        let Scatter::Implicit(s) = accumulate_scatter_naive(&pts, Formulation::ImplicitStandard).unwrap() else {
            panic!()
        };
        assert_eq!(s.m[0][0], 4.0);
        assert_eq!(s.m[0][1], 0.0);
        assert_eq!(s.m[2][2], 4.0);
        assert_eq!(s.m[3][3], 4.0);
        assert_eq!(s.n, 4);
    }

    #[test]
    fn empty_and_short_sample_sets_rejected() {
        for f in Formulation::ALL {
            assert!(matches!(
                accumulate_scatter_naive(&[], f),
                Err(Error::InsufficientSamples { got: 0, .. })
            ));
        }
        let three = [[0.0, 0.0, 1.0]; 3];
        assert!(accumulate_scatter_naive(&three, Formulation::ImplicitRgbd).is_err());
        assert!(accumulate_scatter_naive(&three, Formulation::ExplicitRgbd).is_ok());
    }

    #[test]
    fn matrices_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<[f64; 3]> = (0..30)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..3.0)])
            .collect();
        for f in Formulation::ALL {
            match accumulate_scatter_naive(&pts, f).unwrap() {
                Scatter::Implicit(s) => {
                    for i in 0..4 {
                        for j in 0..4 {
                            assert_eq!(s.m[i][j], s.m[j][i]);
                        }
                    }
                }
                Scatter::Explicit(s) => {
                    for i in 0..3 {
                        for j in 0..3 {
                            assert_eq!(s.m[i][j], s.m[j][i]);
                        }
                    }
                }
            }
        }
    }

    fn frame(holes: f64) -> (DepthImage, TanAngleMaps) {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let maps = compute_tan_maps(&CameraIntrinsics::new(70.0, 70.0, 24.0, 18.0, 48, 36).unwrap());
        let depth = Grid::from_fn(48, 36, |_, _| {
            if rng.random_bool(holes) {
                0.0
            } else {
                rng.random_range(1.0..3.0)
            }
        });
        (DepthImage::from_depths(depth), maps)
    }

    fn close(a: &Scatter, b: &Scatter, tol: f64) -> bool {
        a.n() == b.n()
            && a.entries()
                .iter()
                .zip(b.entries())
                .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
    }

    #[test]
    fn full_image_integral_matches_naive() {
        for holes in [0.0, 0.1] {
            let (depth, maps) = frame(holes);
            let constant = build_constant_channels(&maps);
            for f in Formulation::ALL {
                let stack = build_frame_channels(f, &depth, &maps, StackOptions { residual: true }).unwrap();
                let full = Rect::full(48, 36);
                let a = scatter_from_integrals(&stack, Some(&constant), &full, f).unwrap();
                let b = accumulate_rect_naive(&depth, &maps, &full, f).unwrap();
                assert!(close(&a, &b, 1e-10), "{f:?}");
                if let (Scatter::Explicit(a), Scatter::Explicit(b)) = (a, b) {
                    let (x, y) = (a.b_sq.unwrap(), b.b_sq.unwrap());
                    assert!((x - y).abs() <= 1e-10 * x);
                }
            }
        }
    }

    #[test]
    fn disjoint_rects_add() {
        let (depth, maps) = frame(0.05);
        let constant = build_constant_channels(&maps);
        let left = Rect::new(3, 2, 20, 30).unwrap();
        let right = Rect::new(20, 2, 41, 30).unwrap();
        let union = Rect::new(3, 2, 41, 30).unwrap();
        for f in Formulation::ALL {
            let stack = build_frame_channels(f, &depth, &maps, StackOptions::default()).unwrap();
            let s = |r: &Rect| scatter_from_integrals(&stack, Some(&constant), r, f).unwrap();
            let sum = s(&left).add(&s(&right)).unwrap();
            assert!(close(&sum, &s(&union), 1e-12), "{f:?}");
        }
    }

    #[test]
    fn invalid_rect_is_insufficient() {
        let (mut depth, maps) = frame(0.0);
        let r = Rect::new(10, 10, 14, 14).unwrap();
        for (x, y) in r.pixels() {
            depth.invalidate(x, y);
        }
        let constant = build_constant_channels(&maps);
        for f in Formulation::ALL {
            let stack = build_frame_channels(f, &depth, &maps, StackOptions::default()).unwrap();
            assert!(matches!(
                scatter_from_integrals(&stack, Some(&constant), &r, f),
                Err(Error::InsufficientSamples { got: 0, .. })
            ));
            assert!(accumulate_rect_naive(&depth, &maps, &r, f).is_err());
        }
    }

    #[test]
    fn rgbd_needs_constant_stack() {
        let (depth, maps) = frame(0.0);
        let stack = build_frame_channels(Formulation::ImplicitRgbd, &depth, &maps, StackOptions::default()).unwrap();
        assert!(scatter_from_integrals(&stack, None, &Rect::full(48, 36), Formulation::ImplicitRgbd).is_err());
        // wrong formulation for the stack
        assert!(scatter_from_integrals(&stack, None, &Rect::full(48, 36), Formulation::ImplicitStandard).is_err());
    }
}
