//! Least-squares Monte Carlo estimate of conditional expectations.
//!
//! Features are standardised per time step; coordinates that do not vary
//! across samples (deterministic assets, every coordinate at `t = 0`) are
//! dropped, and so are coordinates that are affine functions of earlier
//! ones, as happens when a singular volatility ties assets together. The basis is all monomials of total degree `<= degree` in the
//! kept coordinates, optionally extended by linear-spline hinges
//! `max(z - kappa, 0)` at sample quantiles of each coordinate.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::config::{BasisKind, RegressionSection};
use crate::error::{Error, Result};

/// Condition number of the equilibrated design matrix above which a fit is
/// rejected.
pub const MAX_CONDITION: f64 = 1e10;

/// Coordinates whose sample standard deviation is below this fraction of
/// their magnitude are treated as constant.
const DEGENERATE_SD: f64 = 1e-9;

/// Relative residual below which a standardised coordinate is considered an
/// affine function of the coordinates kept before it.
const DEPENDENT_RESIDUAL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub basis: BasisKind,
    pub degree: usize,
    pub ridge: f64,
    pub knots: usize,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        (&RegressionSection::default()).into()
    }
}

impl From<&RegressionSection> for RegressionSpec {
    fn from(s: &RegressionSection) -> Self {
        Self {
            basis: s.basis,
            degree: s.degree,
            ridge: s.ridge,
            knots: s.knots,
        }
    }
}

impl RegressionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.degree > 6 {
            return Err(Error::InvalidArgument("regression degree must be <= 6".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidArgument("ridge must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// A fitted vector-valued function of the raw feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedFunction {
    pub n_features: usize,
    /// indices of the raw features that vary across samples
    pub kept: Vec<usize>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// hinge locations per kept coordinate, in standardised units
    pub knots: Vec<Vec<f64>>,
    pub exponents: Vec<Vec<u8>>,
    /// `coefficients[output][basis]`
    pub coefficients: Vec<Vec<f64>>,
    pub r2: Vec<f64>,
    pub condition: f64,
}

fn monomials(vars: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut cur = vec![0u8; vars];
    for total in 0..=degree {
        push_with_total(&mut out, &mut cur, 0, total);
    }
    out
}

fn push_with_total(out: &mut Vec<Vec<u8>>, cur: &mut [u8], pos: usize, left: usize) {
    if pos == cur.len() {
        if left == 0 {
            out.push(cur.to_vec());
        }
        return;
    }
    if pos + 1 == cur.len() {
        cur[pos] = left as u8;
        out.push(cur.to_vec());
        cur[pos] = 0;
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e as u8;
        push_with_total(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

impl FittedFunction {
    pub fn outputs(&self) -> usize {
        self.coefficients.len()
    }

    pub fn basis_len(&self) -> usize {
        self.exponents.len() + self.knots.iter().map(Vec::len).sum::<usize>()
    }

    fn standardise(&self, raw: &[f64], z: &mut [f64]) {
        for (s, &i) in self.kept.iter().enumerate() {
            z[s] = (raw[i] - self.center[s]) / self.scale[s];
        }
    }

    fn basis_into(&self, z: &[f64], out: &mut [f64]) {
        for (b, e) in self.exponents.iter().enumerate() {
            let mut v = 1.0;
            for (zi, &p) in z.iter().zip(e) {
                if p > 0 {
                    v *= zi.powi(p as i32);
                }
            }
            out[b] = v;
        }
        let mut b = self.exponents.len();
        for (s, ks) in self.knots.iter().enumerate() {
            for &k in ks {
                out[b] = (z[s] - k).max(0.0);
                b += 1;
            }
        }
    }

    /// Evaluates every output at the raw feature vector.
    pub fn eval(&self, raw: &[f64], out: &mut [f64]) {
        let mut z = vec![0.0; self.kept.len()];
        let mut basis = vec![0.0; self.basis_len()];
        self.standardise(raw, &mut z);
        self.basis_into(&z, &mut basis);
        for (o, coef) in out.iter_mut().zip(&self.coefficients) {
            *o = coef.iter().zip(&basis).map(|(c, b)| c * b).sum();
        }
    }
}

fn quantile_knots(z: &mut [f64], count: usize) -> Vec<f64> {
    if count == 0 || z.is_empty() {
        return Vec::new();
    }
    let (lo, hi) = z
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let n = z.len();
    let mut out: Vec<f64> = Vec::with_capacity(count);
    for i in 1..=count {
        let idx = (i * n / (count + 1)).min(n - 1);
        let (_, v, _) = z.select_nth_unstable_by(idx, f64::total_cmp);
        let v = *v;
        // a hinge at the sample minimum duplicates the linear term
        if v > lo && v < hi && out.last().is_none_or(|&l| v > l) {
            out.push(v);
        }
    }
    out
}

/// Ridge-regularised least squares of `targets` (`N x q`, row-major) on
/// the basis built from `features` (`N x m`, row-major).
pub fn regress_conditional(
    features: &[f64],
    m: usize,
    targets: &[f64],
    q: usize,
    spec: &RegressionSpec,
    time_index: usize,
) -> Result<FittedFunction> {
    spec.validate()?;
    let n = targets.len().checked_div(q).unwrap_or(0);
    if features.len() != n * m {
        return Err(Error::dims("regression features", n * m, features.len()));
    }
    if n == 0 {
        return Err(Error::TooFewSamples { samples: 0, basis: 1 });
    }

    let mut kept = Vec::new();
    let mut center = Vec::new();
    let mut scale = Vec::new();
    for i in 0..m {
        let mean = (0..n).map(|s| features[s * m + i]).sum::<f64>() / n as f64;
        let var = (0..n).map(|s| (features[s * m + i] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > DEGENERATE_SD * mean.abs() && sd > 0.0 {
            kept.push(i);
            center.push(mean);
            scale.push(sd);
        }
    }
    // Gram-Schmidt on the centred, standardised columns
    let mut basis_cols: Vec<Vec<f64>> = Vec::new();
    let mut keep = Vec::with_capacity(kept.len());
    for (c, &i) in kept.iter().enumerate() {
        let mut v: Vec<f64> = (0..n).map(|s| (features[s * m + i] - center[c]) / scale[c]).collect();
        for _ in 0..2 {
            for q in &basis_cols {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let independent = norm > DEPENDENT_RESIDUAL * (n as f64).sqrt();
        if independent {
            v.iter_mut().for_each(|a| *a /= norm);
            basis_cols.push(v);
        }
        keep.push(independent);
    }
    drop(basis_cols);
    let mut it = keep.iter();
    kept.retain(|_| *it.next().expect("same length"));
    let mut it = keep.iter();
    center.retain(|_| *it.next().expect("same length"));
    let mut it = keep.iter();
    scale.retain(|_| *it.next().expect("same length"));

    let k = kept.len();
    let mut z = vec![0.0; n * k];
    for s in 0..n {
        for (c, &i) in kept.iter().enumerate() {
            z[s * k + c] = (features[s * m + i] - center[c]) / scale[c];
        }
    }
    let knots: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let mut col: Vec<f64> = (0..n).map(|s| z[s * k + c]).collect();
            quantile_knots(&mut col, spec.knots)
        })
        .collect();
    let mut f = FittedFunction {
        n_features: m,
        kept,
        center,
        scale,
        knots,
        exponents: monomials(k, spec.degree),
        coefficients: Vec::new(),
        r2: Vec::new(),
        condition: 1.0,
    };
    let p = f.basis_len();
    if n < 10 * p {
        return Err(Error::TooFewSamples { samples: n, basis: p });
    }

    let mut phi = DMatrix::<f64>::zeros(n, p);
    let mut row = vec![0.0; p];
    for s in 0..n {
        f.basis_into(&z[s * k..(s + 1) * k], &mut row);
        for (c, v) in row.iter().enumerate() {
            phi[(s, c)] = *v;
        }
    }
    drop(z);
    // column equilibration
    let col_scale: Vec<f64> = (0..p)
        .map(|c| {
            let nrm = phi.column(c).norm();
            if nrm > 0.0 {
                1.0 / nrm
            } else {
                0.0
            }
        })
        .collect();
    if col_scale.contains(&0.0) {
        return Err(Error::IllConditioned {
            time_index,
            condition: f64::INFINITY,
        });
    }
    for (c, &s) in col_scale.iter().enumerate() {
        phi.column_mut(c).scale_mut(s);
    }
    let y = DMatrix::from_row_slice(n, q, targets);
    let rhs = phi.tr_mul(&y);
    let gram = phi.tr_mul(&phi);

    let r = phi.clone().qr().r();
    let sv = r.singular_values();
    let (smax, smin) = sv
        .iter()
        .fold((0.0f64, f64::INFINITY), |(a, b), &v| (a.max(v), b.min(v)));
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { time_index, condition });
    }
    f.condition = condition;

    let mut g = gram;
    let lambda = spec.ridge * g.trace() / p as f64;
    for c in 1..p {
        g[(c, c)] += lambda;
    }
    let beta_s = match g.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            let eig = SymmetricEigen::new(g);
            let mut inv = DMatrix::zeros(p, p);
            for (i, &l) in eig.eigenvalues.iter().enumerate() {
                if l > 0.0 {
                    let v = eig.eigenvectors.column(i);
                    inv += (v * v.transpose()) / l;
                }
            }
            inv * rhs
        }
    };

    let fitted = &phi * &beta_s;
    for o in 0..q {
        let mean = y.column(o).mean();
        let sst: f64 = y.column(o).iter().map(|v| (v - mean).powi(2)).sum();
        let sse: f64 = y
            .column(o)
            .iter()
            .zip(fitted.column(o).iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        f.r2.push(if sst == 0.0 { 1.0 } else { 1.0 - sse / sst });
        f.coefficients
            .push((0..p).map(|c| beta_s[(c, o)] * col_scale[c]).collect());
    }
    if !f.coefficients.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::non_finite(format!(
            "regression coefficients at time index {time_index}"
        )));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(degree: usize) -> RegressionSpec {
        RegressionSpec {
            degree,
            ..RegressionSpec::default()
        }
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(0, 3), vec![Vec::<u8>::new()]);
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(3, 2).len(), 10);
        assert_eq!(monomials(2, 2)[0], vec![0, 0]);
    }

    #[test]
    fn constant_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..500).map(|_| rng.random_range(50.0..150.0)).collect();
        let y = vec![2.5; 500];
        let f = regress_conditional(&x, 1, &y, 1, &spec(2), 0).unwrap();
        assert_eq!(f.r2, vec![1.0]);
        let mut out = [0.0];
        for v in [60.0, 100.0, 140.0] {
            f.eval(&[v], &mut out);
            assert!((out[0] - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_targets_are_fitted_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2000;
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(50.0..150.0)).collect();
        let y: Vec<f64> = (0..n)
            .flat_map(|s| [3.0 + 0.5 * x[2 * s] - 0.25 * x[2 * s + 1], -1.0 + 0.1 * x[2 * s]])
            .collect();
        let f = regress_conditional(&x, 2, &y, 2, &RegressionSpec { ridge: 0.0, ..spec(1) }, 0).unwrap();
        let mut out = [0.0; 2];
        for s in 0..n {
            f.eval(&x[2 * s..2 * s + 2], &mut out);
            assert!((out[0] - y[2 * s]).abs() <= 1e-8);
            assert!((out[1] - y[2 * s + 1]).abs() <= 1e-8);
        }
        let g = regress_conditional(&x, 2, &y, 2, &spec(2), 0).unwrap();
        for s in 0..n {
            g.eval(&x[2 * s..2 * s + 2], &mut out);
            assert!((out[0] - y[2 * s]).abs() <= 1e-6);
        }
    }

    #[test]
    fn deterministic_coordinates_are_dropped() {
        let n = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..n).flat_map(|_| [rng.random_range(0.0..1.0), 7.0]).collect();
        let y: Vec<f64> = (0..n).map(|s| x[2 * s] * 2.0).collect();
        let f = regress_conditional(&x, 2, &y, 1, &spec(2), 0).unwrap();
        assert_eq!(f.kept, vec![0]);
    }

    #[test]
    fn affinely_dependent_features_are_dropped() {
        let n = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..n)
            .flat_map(|_| {
                let v = rng.random_range(0.0..1.0);
                [v, 2.0 * v + 1.0, v * v]
            })
            .collect();
        let y: Vec<f64> = (0..n).map(|s| x[3 * s + 1] + x[3 * s + 2]).collect();
        let f = regress_conditional(&x, 3, &y, 1, &spec(1), 0).unwrap();
        assert_eq!(f.kept, vec![0, 2]);
        let mut out = [0.0];
        f.eval(&[0.5, 2.0, 0.25], &mut out);
        assert!((out[0] - 2.25).abs() < 1e-6);
    }

    #[test]
    fn rich_basis_on_few_atoms_is_ill_conditioned() {
        let x: Vec<f64> = (0..400).map(|s| (s % 3) as f64).collect();
        let y = x.clone();
        assert!(matches!(
            regress_conditional(&x, 1, &y, 1, &spec(4), 9),
            Err(Error::IllConditioned { time_index: 9, .. })
        ));
    }

    #[test]
    fn too_few_samples() {
        let x: Vec<f64> = (0..20).map(|v| v as f64).collect();
        let y = x.clone();
        assert!(matches!(
            regress_conditional(&x, 1, &y, 1, &spec(2), 0),
            Err(Error::TooFewSamples { samples: 20, basis: 3 })
        ));
    }

    #[test]
    fn hinges_capture_a_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v.max(0.2)).collect();
        let plain = regress_conditional(&x, 1, &y, 1, &spec(2), 0).unwrap();
        let hinged = regress_conditional(&x, 1, &y, 1, &RegressionSpec { knots: 9, ..spec(1) }, 0).unwrap();
        assert!(hinged.r2[0] > plain.r2[0]);
        assert!(hinged.r2[0] > 0.9999);
    }

    #[test]
    fn knots_skip_mass_at_minimum() {
        let mut z: Vec<f64> = (0..100).map(|i| if i < 60 { 0.0 } else { i as f64 }).collect();
        let k = quantile_knots(&mut z, 4);
        assert!(k.iter().all(|&v| v > 0.0));
    }
}
