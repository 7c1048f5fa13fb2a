//! Rank-revealing linear algebra on small dense matrices.
//!
//! Everything here is built on a thin singular value decomposition. A
//! singular value `s_i` is kept when `s_i > tol * s_max`; the rest are
//! truncated to zero, which makes the rank decision deterministic.

use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default relative singular-value cutoff.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Orthogonal projector onto `range(sigma^T)`, the row space of `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T: Scalar> {
    pub matrix: DMatrix<T>,
    pub rank: usize,
    pub tol: T,
    pub source_sigma_hash: SigmaHash,
}

/// Opaque fingerprint of the volatility matrix a projection was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SigmaHash(pub u64);

impl<T: Scalar> Projection<T> {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, v: &DVector<T>) -> DVector<T> {
        &self.matrix * v
    }

    /// `(I - P) v`
    pub fn complement(&self, v: &DVector<T>) -> DVector<T> {
        v - &self.matrix * v
    }
}

fn check_finite<T: Scalar>(a: &DMatrix<T>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(what))
    }
}

/// Thin SVD `a = u diag(s) vt`, singular values descending.
struct Factors<T: Scalar> {
    u: DMatrix<T>,
    s: DVector<T>,
    vt: DMatrix<T>,
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided Jacobi SVD, applied to the tall orientation of `a`.
///
/// nalgebra's bidiagonal SVD returns wrong factors for some small
/// rank-deficient matrices (reconstruction errors of order one), which
/// breaks every identity built on the range projection.
fn svd_of<T: Scalar>(a: &DMatrix<T>) -> Result<Factors<T>> {
    let wide = a.nrows() < a.ncols();
    let mut w = if wide { a.transpose() } else { a.clone() };
    let k = w.ncols();
    let mut v = DMatrix::<T>::identity(k, k);
    let eps = T::default_epsilon();
    // columns below this are numerical zeros, far under any rank cutoff
    let negligible = (eps * w.norm()).powi(2);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if alpha <= negligible || beta <= negligible || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let sn = c * t;
                for m in [&mut w, &mut v] {
                    for r in 0..m.nrows() {
                        let (x, y) = (m[(r, p)], m[(r, q)]);
                        m[(r, p)] = c * x - sn * y;
                        m[(r, q)] = sn * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical("singular value decomposition did not converge".into()));
    }
    let norms: Vec<T> = (0..k).map(|i| w.column(i).norm()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut u = DMatrix::<T>::zeros(w.nrows(), k);
    let mut vs = DMatrix::<T>::zeros(k, k);
    let mut s = DVector::<T>::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = norms[src];
        if norms[src] > T::zero() {
            u.set_column(dst, &(w.column(src) / norms[src]));
        }
        vs.set_column(dst, &v.column(src));
    }
    Ok(if wide {
        Factors {
            u: vs,
            s,
            vt: u.transpose(),
        }
    } else {
        Factors {
            u,
            s,
            vt: vs.transpose(),
        }
    })
}

fn cutoff<T: Scalar>(singular: &DVector<T>, tol: T) -> T {
    let smax = singular.iter().fold(T::zero(), |m, &s| if s > m { s } else { m });
    tol * smax
}

fn hash_matrix<T: Scalar>(a: &DMatrix<T>) -> SigmaHash {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    a.nrows().hash(&mut h);
    a.ncols().hash(&mut h);
    for r in 0..a.nrows() {
        for c in 0..a.ncols() {
            a[(r, c)].as_f64().to_bits().hash(&mut h);
        }
    }
    SigmaHash(h.finish())
}

/// Moore-Penrose pseudoinverse with relative cutoff `tol`.
pub fn pseudoinverse<T: Scalar>(a: &DMatrix<T>, tol: T) -> Result<DMatrix<T>> {
    if tol <= T::zero() {
        return Err(Error::InvalidArgument(
            "pseudoinverse tolerance must be positive".into(),
        ));
    }
    check_finite(a, "pseudoinverse input")?;
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(DMatrix::zeros(n, m));
    }
    let Factors { u, s: singular, vt } = svd_of(a)?;
    let cut = cutoff(&singular, tol);
    let mut out = DMatrix::<T>::zeros(n, m);
    for (i, &s) in singular.iter().enumerate() {
        if s > cut && s > T::zero() {
            let inv = T::one() / s;
            // out += v_i * inv * u_i^T
            for c in 0..m {
                let uc = u[(c, i)] * inv;
                for r in 0..n {
                    out[(r, c)] += vt[(i, r)] * uc;
                }
            }
        }
    }
    Ok(out)
}

/// Projector onto the range of `sigma^T`, built as `V_r V_r^T` from the
/// right singular vectors with retained singular values.
pub fn range_projection<T: Scalar>(sigma: &DMatrix<T>, tol: T) -> Result<Projection<T>> {
    if tol <= T::zero() {
        return Err(Error::InvalidArgument("projection tolerance must be positive".into()));
    }
    check_finite(sigma, "volatility matrix")?;
    let d = sigma.ncols();
    let mut p = DMatrix::<T>::zeros(d, d);
    let mut rank = 0;
    if sigma.nrows() > 0 && d > 0 {
        let Factors { s: singular, vt, .. } = svd_of(sigma)?;
        let cut = cutoff(&singular, tol);
        for (i, &s) in singular.iter().enumerate() {
            if s > cut && s > T::zero() {
                rank += 1;
                for r in 0..d {
                    let vr = vt[(i, r)];
                    for c in 0..d {
                        p[(r, c)] += vr * vt[(i, c)];
                    }
                }
            }
        }
        // symmetrise against rounding in the outer products
        let half = T::lit(0.5);
        for r in 0..d {
            for c in (r + 1)..d {
                let avg = (p[(r, c)] + p[(c, r)]) * half;
                p[(r, c)] = avg;
                p[(c, r)] = avg;
            }
        }
    }
    Ok(Projection {
        matrix: p,
        rank,
        tol,
        source_sigma_hash: hash_matrix(sigma),
    })
}

/// Minimal-norm least-squares solution of `a x = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinNormSolution<T: Scalar> {
    pub x: DVector<T>,
    pub residual: T,
}

pub fn min_norm_solve<T: Scalar>(a: &DMatrix<T>, rhs: &DVector<T>, tol: T) -> Result<MinNormSolution<T>> {
    if rhs.len() != a.nrows() {
        return Err(Error::dims("min_norm_solve right-hand side", a.nrows(), rhs.len()));
    }
    if !rhs.iter().all(|v| v.finite()) {
        return Err(Error::non_finite("min_norm_solve right-hand side"));
    }
    let x = if a.nrows() == 1 && a.ncols() == 1 {
        check_finite(a, "min_norm_solve matrix")?;
        let s = a[(0, 0)];
        if s.abs() > T::zero() {
            DVector::from_element(1, rhs[0] / s)
        } else {
            DVector::zeros(1)
        }
    } else {
        pseudoinverse(a, tol)? * rhs
    };
    let residual = (a * &x - rhs).norm();
    Ok(MinNormSolution { x, residual })
}

/// Derivative of the pseudoinverse along `da`, valid where the rank of
/// `a` is locally constant:
/// `dA+ = -A+ dA A+ + A+ A+^T dA^T (I - A A+) + (I - A+ A) dA^T A+^T A+`.
pub fn pseudoinverse_derivative<T: Scalar>(a: &DMatrix<T>, a_pinv: &DMatrix<T>, da: &DMatrix<T>) -> DMatrix<T> {
    let (m, n) = a.shape();
    let aap = a * a_pinv;
    let apa = a_pinv * a;
    let left = DMatrix::<T>::identity(m, m) - aap;
    let right = DMatrix::<T>::identity(n, n) - apa;
    let dat = da.transpose();
    let first = -(a_pinv * da * a_pinv);
    let second = a_pinv * a_pinv.transpose() * &dat * left;
    let third = right * dat * a_pinv.transpose() * a_pinv;
    first + second + third
}

/// Singular values of `a`, sorted descending.
pub fn singular_values<T: Scalar>(a: &DMatrix<T>) -> Result<Vec<T>> {
    check_finite(a, "singular value input")?;
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(Vec::new());
    }
    let mut s: Vec<T> = svd_of(a)?.s.iter().copied().collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    Ok(s)
}

/// Numerical rank under the relative cutoff `tol`.
pub fn rank<T: Scalar>(a: &DMatrix<T>, tol: T) -> Result<usize> {
    let s = singular_values(a)?;
    let smax = s.first().copied().unwrap_or_else(T::zero);
    Ok(s.iter().filter(|&&v| v > tol * smax && v > T::zero()).count())
}
