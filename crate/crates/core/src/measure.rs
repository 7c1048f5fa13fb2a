//! Market price of risk, its projection, the Girsanov density and the
//! Q-Brownian increments.
//!
//! `u` is always the minimal-norm solution of `sigma u = b - r x`, which
//! already lies in `range(sigma^T)`, so `P u = u` and the projected market
//! price of risk is `sigma^+ (b - r x)`.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DEFAULT_RANK_TOL};
use crate::model::MarketModel;
use crate::sde::{Measure, PathBundle, TimeGrid};

/// Rank cutoff and the scaled residual above which `sigma u = b - r x` is
/// declared unsolvable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rank: f64,
    pub arbitrage: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK_TOL,
            arbitrage: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketPriceOfRisk {
    pub u: DVector<f64>,
    /// `P(x) u`, equal to `u` up to rounding
    pub projected: DVector<f64>,
    /// `|sigma u - (b - r x)|`
    pub residual: f64,
    /// `residual / (1 + |b - r x|)`, compared against the arbitrage tolerance
    pub scaled_residual: f64,
    pub rank: usize,
}

pub fn market_price_of_risk(model: &MarketModel, t: f64, x: &[f64]) -> Result<MarketPriceOfRisk> {
    market_price_of_risk_with(model, t, x, &Tolerances::default())
}

pub fn market_price_of_risk_with(
    model: &MarketModel,
    t: f64,
    x: &[f64],
    tol: &Tolerances,
) -> Result<MarketPriceOfRisk> {
    let mpr = solve_mpr(model, t, x, tol.rank)?;
    if mpr.scaled_residual > tol.arbitrage {
        return Err(Error::ArbitrageDetected {
            t,
            residual: mpr.residual,
        });
    }
    Ok(mpr)
}

/// Same as [`market_price_of_risk_with`] but never rejects the state.
pub(crate) fn solve_mpr(model: &MarketModel, t: f64, x: &[f64], rank_tol: f64) -> Result<MarketPriceOfRisk> {
    let c = model.evaluate_coefficients(t, x)?;
    let rhs = excess_drift(&c.b, c.r, x);
    let sol = linalg::min_norm_solve(&c.sigma, &rhs, rank_tol)?;
    let proj = linalg::range_projection(&c.sigma, rank_tol)?;
    let projected = proj.apply(&sol.x);
    Ok(MarketPriceOfRisk {
        scaled_residual: sol.residual / (1.0 + rhs.norm()),
        residual: sol.residual,
        projected,
        u: sol.x,
        rank: proj.rank,
    })
}

fn excess_drift(b: &DVector<f64>, r: f64, x: &[f64]) -> DVector<f64> {
    DVector::from_iterator(b.len(), b.iter().zip(x).map(|(bi, xi)| bi - r * xi))
}

/// `P(x)` and `P(x) u(x)` at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGeometry {
    pub projection: DMatrix<f64>,
    pub pu: DVector<f64>,
    pub rank: usize,
}

pub fn local_geometry(model: &MarketModel, t: f64, x: &[f64], tol: &Tolerances) -> Result<LocalGeometry> {
    let mpr = market_price_of_risk_with(model, t, x, tol)?;
    let sigma = model.sigma(t, x);
    let proj = linalg::range_projection(&sigma, tol.rank)?;
    Ok(LocalGeometry {
        projection: proj.matrix,
        pu: mpr.u,
        rank: proj.rank,
    })
}

/// Jacobian `J_f` of `f(x) = P(x) u(x) = sigma(x)^+ (b(x) - r x)`, `d x n`.
///
/// Differentiates the pseudoinverse analytically, which is valid where the
/// rank of `sigma` is locally constant.
pub fn pu_jacobian(model: &MarketModel, t: f64, x: &[f64], tol: &Tolerances) -> Result<DMatrix<f64>> {
    let (n, d) = (model.n, model.d);
    let c = model.evaluate_coefficients(t, x)?;
    let pinv = linalg::pseudoinverse(&c.sigma, tol.rank)?;
    let rhs = excess_drift(&c.b, c.r, x);
    let mut jb = vec![0.0; n * n];
    let mut js = vec![0.0; n * d * n];
    model.drift_jacobian_into(t, x, &mut jb);
    model.vol_jacobian_into(t, x, &mut js);
    let mut out = DMatrix::zeros(d, n);
    let mut dsigma = DMatrix::zeros(n, d);
    for l in 0..n {
        for i in 0..n {
            for m in 0..d {
                dsigma[(i, m)] = js[(i * d + m) * n + l];
            }
        }
        let mut drhs = DVector::zeros(n);
        for i in 0..n {
            drhs[i] = jb[i * n + l] - if i == l { c.r } else { 0.0 };
        }
        let dpinv = linalg::pseudoinverse_derivative(&c.sigma, &pinv, &dsigma);
        let col = dpinv * &rhs + &pinv * drhs;
        out.set_column(l, &col);
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::UnsupportedJacobian(format!(
            "market price of risk Jacobian is not finite at t = {t}"
        )));
    }
    Ok(out)
}

/// Per-grid-time cache of `P` and `P u` for families where they do not
/// depend on the state; falls back to pointwise evaluation otherwise.
#[derive(Debug, Clone)]
pub struct GeometryCache<'m> {
    model: &'m MarketModel,
    times: Vec<f64>,
    tol: Tolerances,
    fixed: Option<Vec<LocalGeometry>>,
    pu_fixed: bool,
}

impl<'m> GeometryCache<'m> {
    pub fn new(model: &'m MarketModel, grid: &TimeGrid, tol: Tolerances) -> Result<Self> {
        let pu_fixed = model.pu_state_independent();
        let fixed = if pu_fixed {
            let x = model.reference_state();
            Some(
                grid.times()
                    .iter()
                    .map(|&t| local_geometry(model, t, &x, &tol))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            model,
            times: grid.times().to_vec(),
            tol,
            fixed,
            pu_fixed,
        })
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.tol
    }

    /// True when `P u` is a function of time only.
    pub fn pu_state_independent(&self) -> bool {
        self.pu_fixed
    }

    pub fn at(&self, j: usize, x: &[f64]) -> Result<Cow<'_, LocalGeometry>> {
        match &self.fixed {
            Some(v) => Ok(Cow::Borrowed(&v[j])),
            None => Ok(Cow::Owned(local_geometry(self.model, self.times[j], x, &self.tol)?)),
        }
    }

    /// `J_f` at grid index `j`, or `None` when it vanishes identically.
    pub fn jacobian(&self, j: usize, x: &[f64]) -> Result<Option<DMatrix<f64>>> {
        if self.pu_fixed {
            Ok(None)
        } else {
            pu_jacobian(self.model, self.times[j], x, &self.tol).map(Some)
        }
    }
}

/// Girsanov density along one P-path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GirsanovPath {
    pub z_values: Vec<f64>,
    pub log_z: Vec<f64>,
    /// running `int_0^t |P u|^2 ds`
    pub integrability: Vec<f64>,
}

impl GirsanovPath {
    pub fn terminal(&self) -> f64 {
        *self.z_values.last().expect("non-empty grid")
    }
}

fn require_p(bundle: &PathBundle) -> Result<()> {
    if bundle.measure != Measure::P {
        return Err(Error::InvalidArgument("path bundle must be simulated under P".into()));
    }
    Ok(())
}

/// Left-point discretisation of
/// `Z_t = exp(-int P u . dW - 1/2 int |P u|^2 ds)`.
pub fn girsanov_density(model: &MarketModel, bundle: &PathBundle) -> Result<Vec<GirsanovPath>> {
    girsanov_density_with(model, bundle, &Tolerances::default())
}

pub fn girsanov_density_with(model: &MarketModel, bundle: &PathBundle, tol: &Tolerances) -> Result<Vec<GirsanovPath>> {
    require_p(bundle)?;
    let cache = GeometryCache::new(model, &bundle.grid, *tol)?;
    let m = bundle.grid.steps();
    (0..bundle.n_paths)
        .into_par_iter()
        .map(|p| {
            let path = bundle.path(p);
            let mut log_z = Vec::with_capacity(m + 1);
            let mut integ = Vec::with_capacity(m + 1);
            let (mut lz, mut acc) = (0.0, 0.0);
            log_z.push(lz);
            integ.push(acc);
            for j in 0..m {
                let g = cache.at(j, path.state(j))?;
                let dt = bundle.grid.dt(j);
                let dw = path.increment(j);
                let dot: f64 = g.pu.iter().zip(dw).map(|(a, b)| a * b).sum();
                let sq = g.pu.norm_squared();
                lz += -dot - 0.5 * sq * dt;
                acc += sq * dt;
                if !lz.is_finite() {
                    return Err(Error::NonFinite {
                        context: "Girsanov exponent".into(),
                        path: Some(p),
                    });
                }
                log_z.push(lz);
                integ.push(acc);
            }
            Ok(GirsanovPath {
                z_values: log_z.iter().map(|v| v.exp()).collect(),
                log_z,
                integrability: integ,
            })
        })
        .collect()
}

/// `dW~_j = dW_j + P u(X_j) dt_j`, laid out like the bundle increments.
pub fn q_increments(model: &MarketModel, bundle: &PathBundle) -> Result<Vec<f64>> {
    require_p(bundle)?;
    let cache = GeometryCache::new(model, &bundle.grid, Tolerances::default())?;
    let (m, d) = (bundle.grid.steps(), bundle.d);
    let mut out = bundle.increments().to_vec();
    out.par_chunks_mut(m * d)
        .enumerate()
        .try_for_each(|(p, chunk)| -> Result<()> {
            let path = bundle.path(p);
            for j in 0..m {
                let g = cache.at(j, path.state(j))?;
                let dt = bundle.grid.dt(j);
                for c in 0..d {
                    chunk[j * d + c] += g.pu[c] * dt;
                }
            }
            Ok(())
        })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;
    use crate::sde::{resolve_grid, simulate_paths};
    use crate::testing::*;

    #[test]
    fn black_scholes_market_price_of_risk() {
        let m = parse_model(GBM).unwrap();
        let mpr = market_price_of_risk(&m, 0.0, &[100.0]).unwrap();
        assert!((mpr.u[0] - 0.25).abs() < 1e-14);
        assert!(mpr.residual < 1e-12);
    }

    #[test]
    fn embedding_projected_market_price_of_risk() {
        let m = parse_model(EMBEDDING).unwrap();
        let mpr = market_price_of_risk(&m, 0.0, &[100.0, 1.0]).unwrap();
        assert!((mpr.projected[0] - 0.25).abs() < 1e-14);
        assert_eq!(mpr.projected[1], 0.0);
        assert!((&mpr.projected - &mpr.u).norm() < 1e-10);
    }

    #[test]
    fn delta_zero_projected_market_price_of_risk_is_constant() {
        let m = parse_model(DELTA_ZERO).unwrap();
        // b1 - r = 0.04 on the first segment; sigma_1 = (0.2, 0.1)
        let scale = 0.04 / (0.2f64 * 0.2 + 0.1 * 0.1);
        for x in [[100.0, 80.0], [3.0, 250.0]] {
            let mpr = market_price_of_risk(&m, 0.1, &x).unwrap();
            assert!((mpr.projected[0] - scale * 0.2).abs() < 1e-12);
            assert!((mpr.projected[1] - scale * 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn incompatible_drift_is_arbitrage() {
        let m = parse_model(ORTHOGONAL).unwrap();
        let err = market_price_of_risk(&m, 0.0, &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::ArbitrageDetected { .. }));
    }

    #[test]
    fn pu_jacobian_matches_finite_differences() {
        let m = parse_model(SMOOTH).unwrap();
        let tol = Tolerances::default();
        let x = [1.1, 0.7];
        let j = pu_jacobian(&m, 0.0, &x, &tol).unwrap();
        let h = 1e-6;
        for l in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[l] += h;
            xm[l] -= h;
            let fp = market_price_of_risk(&m, 0.0, &xp).unwrap().u;
            let fm = market_price_of_risk(&m, 0.0, &xm).unwrap().u;
            let fd = (fp - fm) / (2.0 * h);
            for c in 0..2 {
                assert!(
                    (fd[c] - j[(c, l)]).abs() < 1e-7,
                    "({c},{l}): {} vs {}",
                    fd[c],
                    j[(c, l)]
                );
            }
        }
    }

    #[test]
    fn zero_market_price_of_risk_gives_unit_density() {
        let m = parse_model(&GBM.replace("coeffs = [0.08]", "coeffs = [0.03]")).unwrap();
        let grid = resolve_grid(&m, 8).unwrap();
        let b = simulate_paths(&m, &grid, 20, 1, Measure::P).unwrap();
        for g in girsanov_density(&m, &b).unwrap() {
            assert!(g.z_values.iter().all(|&z| z == 1.0));
        }
        assert_eq!(q_increments(&m, &b).unwrap(), b.increments());
    }

    #[test]
    fn deterministic_pu_shifts_brownian_motion_exactly() {
        let m = parse_model(DELTA_ZERO).unwrap();
        let grid = resolve_grid(&m, 16).unwrap();
        let b = simulate_paths(&m, &grid, 10, 5, Measure::P).unwrap();
        let q = q_increments(&m, &b).unwrap();
        let tol = Tolerances::default();
        let mut expected = [0.0; 2];
        for j in 0..16 {
            let g = local_geometry(&m, grid.times()[j], &[1.0, 1.0], &tol).unwrap();
            for c in 0..2 {
                expected[c] += g.pu[c] * grid.dt(j);
            }
        }
        for p in 0..10 {
            for c in 0..2 {
                let shift: f64 = (0..16)
                    .map(|j| q[(p * 16 + j) * 2 + c] - b.increments()[(p * 16 + j) * 2 + c])
                    .sum();
                assert!((shift - expected[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn q_increments_restore_rate_drift() {
        let m = parse_model(GBM).unwrap();
        let grid = resolve_grid(&m, 32).unwrap();
        let b = simulate_paths(&m, &grid, 4, 9, Measure::P).unwrap();
        let q = q_increments(&m, &b).unwrap();
        for p in 0..4 {
            let path = b.path(p);
            for j in 0..32 {
                let x = path.state(j)[0];
                let next = x + 0.03 * x * grid.dt(j) + 0.2 * x * q[p * 32 + j];
                assert!((next - path.state(j + 1)[0]).abs() < 1e-10 * x);
            }
        }
    }
}
