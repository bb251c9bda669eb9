//! Small dense kernels: cyclic Jacobi eigen-decomposition for symmetric
//! matrices and a 3x3 Cholesky solver.

use crate::error::{Error, Result};

pub const JACOBI_TOLERANCE: f64 = 1e-13;
pub const JACOBI_MAX_SWEEPS: usize = 50;
/// Pivot / eigenvalue threshold relative to the trace for rank checks.
pub const RANK_TOLERANCE: f64 = 1e-12;

pub fn frobenius<const N: usize>(m: &[[f64; N]; N]) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn trace<const N: usize>(m: &[[f64; N]; N]) -> f64 {
    (0..N).map(|i| m[i][i]).sum()
}

pub fn mat_vec<const N: usize>(m: &[[f64; N]; N], v: &[f64; N]) -> [f64; N] {
    std::array::from_fn(|i| (0..N).map(|j| m[i][j] * v[j]).sum())
}

/// Eigenvalues in ascending order; `vectors[k]` is the unit eigenvector of
/// `values[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen<const N: usize> {
    pub values: [f64; N],
    pub vectors: [[f64; N]; N],
    pub sweeps: usize,
}

/// Cyclic Jacobi sweeps until the off-diagonal Frobenius norm drops to
/// `JACOBI_TOLERANCE * |S|_F`. Only the upper triangle is read.
pub fn symmetric_eigen<const N: usize>(s: &[[f64; N]; N]) -> Result<SymmetricEigen<N>> {
    let mut a = [[0.0; N]; N];
    for i in 0..N {
        for j in i..N {
            let v = s[i][j];
            if !v.is_finite() {
                return Err(Error::NonFinite);
            }
            a[i][j] = v;
            a[j][i] = v;
        }
    }
    let mut v = [[0.0; N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale = frobenius(&a);
    let off_limit = JACOBI_TOLERANCE * scale;

    let mut sweeps = 0;
    loop {
        let off: f64 = (0..N)
            .flat_map(|i| (0..N).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= off_limit {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence(JACOBI_MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..N {
            for q in p + 1..N {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // A <- J^T A J with J the (p, q) rotation.
                for k in 0..N {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - sn * akq;
                    a[k][q] = sn * akp + c * akq;
                }
                for k in 0..N {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - sn * aqk;
                    a[q][k] = sn * apk + c * aqk;
                }
                a[p][q] = 0.0;
                a[q][p] = 0.0;
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - sn * vq;
                    row[q] = sn * vp + c * vq;
                }
            }
        }
    }

    let mut order: [usize; N] = std::array::from_fn(|i| i);
    order.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]));
    let values = order.map(|i| a[i][i]);
    let vectors = order.map(|k| {
        let mut col: [f64; N] = std::array::from_fn(|r| v[r][k]);
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        col.iter_mut().for_each(|x| *x /= norm);
        col
    });
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

/// Unit eigenvector of the smallest eigenvalue, with that eigenvalue.
pub fn smallest_eigenvector<const N: usize>(s: &[[f64; N]; N]) -> Result<([f64; N], f64)> {
    let eig = symmetric_eigen(s)?;
    Ok((eig.vectors[0], eig.values[0]))
}

/// Lower Cholesky factor of a 3x3 symmetric positive definite matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cholesky3 {
    l: [[f64; 3]; 3],
}

impl Cholesky3 {
    /// Fails when a pivot falls to `RANK_TOLERANCE * trace` or below.
    pub fn factor(s: &[[f64; 3]; 3]) -> Result<Self> {
        if s.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let tr = trace(s);
        let tiny = RANK_TOLERANCE * tr.abs();
        let mut l = [[0.0; 3]; 3];
        for j in 0..3 {
            let mut d = s[j][j];
            for k in 0..j {
                d -= l[j][k] * l[j][k];
            }
            if !(d > tiny) {
                return Err(Error::DegenerateFit("rank-deficient normal equations"));
            }
            let d = d.sqrt();
            l[j][j] = d;
            for i in j + 1..3 {
                let mut v = s[i][j];
                for k in 0..j {
                    v -= l[i][k] * l[j][k];
                }
                l[i][j] = v / d;
            }
        }
        Ok(Self { l })
    }

    #[inline]
    pub fn solve(&self, rhs: &[f64; 3]) -> [f64; 3] {
        let l = &self.l;
        let y0 = rhs[0] / l[0][0];
        let y1 = (rhs[1] - l[1][0] * y0) / l[1][1];
        let y2 = (rhs[2] - l[2][0] * y0 - l[2][1] * y1) / l[2][2];
        let x2 = y2 / l[2][2];
        let x1 = (y1 - l[2][1] * x2) / l[1][1];
        let x0 = (y0 - l[1][0] * x1 - l[2][0] * x2) / l[0][0];
        [x0, x1, x2]
    }
}

pub fn solve_spd3(s: &[[f64; 3]; 3], rhs: &[f64; 3]) -> Result<[f64; 3]> {
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(Cholesky3::factor(s)?.solve(rhs))
}
