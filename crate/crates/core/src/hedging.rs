//! Projected Clark-Ocone hedge.
//!
//! For every grid time `t_k` the integrand sample of a Q-path is
//! `e^{-int_{t_k}^T r} (D_{t_k} G - G int_{t_k}^T P D_{t_k}(P u) . dW~)`.
//! Its conditional expectation given the path up to `t_k` is estimated by
//! regression, projected with `P(x)` and mapped to a portfolio by the
//! minimal-norm solve of `sigma^T(x) theta = P(x) rhs`.
//!
//! All base times of one path are handled by a single backward (adjoint)
//! sweep: with `A_j` the Euler linearisation, `mu_j = w_j + mu_{j+1} A_j`
//! collects the payoff weights and `nu_j = c_j + nu_{j+1} A_j` the
//! correction integrand, so the cost is `O(M n^2)` per path instead of
//! `O(M^2 n^2)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::{GeometryCache, Tolerances};
use crate::model::MarketModel;
use crate::payoff::{PathFeature, Payoff};
use crate::regression::{regress_conditional, FittedFunction, RegressionSpec};
use crate::sde::{
    first_variation_with, projected_p_increment, FirstVariation, Measure, PathBundle, PathRef, StepLinearizer, TimeGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HedgeOptions {
    pub regression: RegressionSpec,
    pub tolerances: Tolerances,
    /// number of leading paths whose per-time hedges are exported
    pub export_states: usize,
}

impl Default for HedgeOptions {
    fn default() -> Self {
        Self {
            regression: RegressionSpec::default(),
            tolerances: Tolerances::default(),
            export_states: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrandSample {
    pub path_id: usize,
    pub time_index: usize,
    pub dhat_g: DVector<f64>,
    /// `int_{t_k}^T P D_{t_k}(P u) . dW~`, one entry per Brownian component
    pub correction: DVector<f64>,
    pub payoff: f64,
    /// `e^{-int_{t_k}^T r}`
    pub discount: f64,
}

impl IntegrandSample {
    pub fn value(&self) -> DVector<f64> {
        (&self.dhat_g - &self.correction * self.payoff) * self.discount
    }
}

fn require_q(path: &PathRef<'_>) -> Result<()> {
    if path.measure != Measure::Q {
        return Err(Error::InvalidArgument("hedging needs paths simulated under Q".into()));
    }
    Ok(())
}

/// Left-point sum `sum_{j=k+1}^{M-1} dW~_j^T P_j J_f(X_j) D_{t_k} X_{t_j}`.
/// Exactly zero when `P u` does not depend on the state.
pub fn correction_integral(model: &MarketModel, path: PathRef<'_>, fv: &FirstVariation) -> Result<DVector<f64>> {
    let cache = GeometryCache::new(model, path.grid, Tolerances::default())?;
    correction_integral_with(path, fv, &cache)
}

pub fn correction_integral_with(
    path: PathRef<'_>,
    fv: &FirstVariation,
    cache: &GeometryCache<'_>,
) -> Result<DVector<f64>> {
    require_q(&path)?;
    let mut out = DVector::zeros(path.d);
    if cache.pu_state_independent() {
        return Ok(out);
    }
    let m = path.grid.steps();
    for j in (fv.base_time_index + 1)..m {
        let x = path.state(j);
        let jf = cache.jacobian(j, x)?.expect("state-dependent family");
        let g = cache.at(j, x)?;
        let dw = DVector::from_column_slice(path.increment(j));
        let row = dw.transpose() * &g.projection * jf;
        out += (row * fv.at(j)).transpose();
    }
    Ok(out)
}

/// Integrand samples at base index `k` for every path, through the
/// explicit first-variation process.
pub fn clark_ocone_rhs(
    model: &MarketModel,
    payoff: &Payoff,
    bundle: &PathBundle,
    k: usize,
) -> Result<Vec<IntegrandSample>> {
    let cache = GeometryCache::new(model, &bundle.grid, Tolerances::default())?;
    let horizon = bundle.grid.horizon();
    let t = bundle.grid.times()[k];
    (0..bundle.n_paths)
        .into_par_iter()
        .map(|p| {
            let path = bundle.path(p);
            require_q(&path)?;
            let fv = first_variation_with(model, path, k, &cache)?;
            let der = payoff.malliavin_derivative(&path, &fv);
            Ok(IntegrandSample {
                path_id: p,
                time_index: k,
                dhat_g: der.value,
                correction: correction_integral_with(path, &fv, &cache)?,
                payoff: payoff.evaluate(&path),
                discount: model.discount(t, horizon),
            })
        })
        .collect()
}

/// Scratch buffers for the adjoint sweep of one path.
struct Sweep {
    sigma: Vec<f64>,
    a: Vec<f64>,
    c: Vec<f64>,
    pdw: Vec<f64>,
    mu: Vec<f64>,
    nu: Vec<f64>,
    tmp: Vec<f64>,
}

impl Sweep {
    fn new(n: usize, d: usize, m: usize) -> Self {
        Self {
            sigma: vec![0.0; (m + 1) * n * d],
            a: vec![0.0; m * n * n],
            c: vec![0.0; m * n],
            pdw: vec![0.0; d],
            mu: vec![0.0; n],
            nu: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

/// `out[k * d + c]` receives the integrand sample at base index `k`.
/// Returns the (undiscounted) payoff.
fn sweep_path(
    model: &MarketModel,
    payoff: &Payoff,
    path: PathRef<'_>,
    cache: &GeometryCache<'_>,
    discounts: &[f64],
    w: &mut Sweep,
    out: &mut [f64],
) -> Result<f64> {
    let (n, d, m) = (path.n, path.d, path.grid.steps());
    let times = path.grid.times();
    let with_correction = !cache.pu_state_independent();
    let mut lin = StepLinearizer::new(model);
    for j in 0..=m {
        model.vol_into(times[j], path.state(j), &mut w.sigma[j * n * d..(j + 1) * n * d]);
    }
    for j in 0..m {
        let x = path.state(j);
        // the market price of risk is checked at every visited state
        let g = cache.at(j, x)?;
        if j == 0 {
            continue;
        }
        let dt = path.grid.dt(j);
        projected_p_increment(Measure::Q, &g.projection, &g.pu, path.increment(j), dt, &mut w.pdw);
        lin.step(times[j], x, dt, &w.pdw, &mut w.a[j * n * n..(j + 1) * n * n]);
        if with_correction {
            let jf = cache.jacobian(j, x)?.expect("state-dependent family");
            let dw = path.increment(j);
            let cj = &mut w.c[j * n..(j + 1) * n];
            for l in 0..n {
                let mut v = 0.0;
                for r in 0..d {
                    let pr: f64 = (0..d).map(|s| dw[s] * g.projection[(s, r)]).sum();
                    v += pr * jf[(r, l)];
                }
                cj[l] = v;
            }
        }
    }

    let pw = payoff.weights(&path);
    let g_value = pw.value;
    w.mu.copy_from_slice(pw.row(m, n));
    w.nu.iter_mut().for_each(|v| *v = 0.0);
    let ind = if pw.active { 1.0 } else { 0.0 };
    for k in (0..=m).rev() {
        let sig = &w.sigma[k * n * d..(k + 1) * n * d];
        let same = k < m && pw.same_time;
        let wk = pw.row(k, n);
        for c in 0..d {
            let mut der = 0.0;
            let mut corr = 0.0;
            for i in 0..n {
                let coef = if k == m {
                    w.mu[i]
                } else if same {
                    w.mu[i] + wk[i]
                } else {
                    w.mu[i]
                };
                der += coef * sig[i * d + c];
                corr += w.nu[i] * sig[i * d + c];
            }
            let der = ind * der;
            out[k * d + c] = if with_correction {
                discounts[k] * (der - g_value * corr)
            } else {
                discounts[k] * der
            };
        }
        if k == m {
            // mu_M = w_M already; nu_M = 0
            continue;
        }
        if k >= 1 {
            let a = &w.a[k * n * n..(k + 1) * n * n];
            for l in 0..n {
                w.tmp[l] = wk[l] + (0..n).map(|i| w.mu[i] * a[i * n + l]).sum::<f64>();
            }
            w.mu.copy_from_slice(&w.tmp);
            if with_correction {
                let ck = &w.c[k * n..(k + 1) * n];
                for l in 0..n {
                    w.tmp[l] = ck[l] + (0..n).map(|i| w.nu[i] * a[i * n + l]).sum::<f64>();
                }
                w.nu.copy_from_slice(&w.tmp);
            }
        }
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite("Clark-Ocone integrand"));
    }
    Ok(g_value)
}

/// Integrand samples for every path and base index, computed by the
/// adjoint sweep. Layout `[path][k][component]`, plus the discounted payoffs.
pub fn integrand_samples(
    model: &MarketModel,
    payoff: &Payoff,
    bundle: &PathBundle,
    tol: &Tolerances,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d, m) = (bundle.n, bundle.d, bundle.grid.steps());
    if bundle.measure != Measure::Q {
        return Err(Error::InvalidArgument("hedging needs paths simulated under Q".into()));
    }
    if n != model.n || d != model.d {
        return Err(Error::dims("path bundle dimension", model.n, n));
    }
    let cache = GeometryCache::new(model, &bundle.grid, *tol)?;
    let horizon = bundle.grid.horizon();
    let discounts: Vec<f64> = bundle
        .grid
        .times()
        .iter()
        .map(|&t| model.discount(t, horizon))
        .collect();
    let mut samples = vec![0.0; bundle.n_paths * (m + 1) * d];
    let mut payoffs = vec![0.0; bundle.n_paths];
    samples
        .par_chunks_mut((m + 1) * d)
        .zip(payoffs.par_iter_mut())
        .enumerate()
        .try_for_each_init(
            || Sweep::new(n, d, m),
            |w, (p, (out, g))| -> Result<()> {
                let value =
                    sweep_path(model, payoff, bundle.path(p), &cache, &discounts, w, out).map_err(|e| match e {
                        Error::NonFinite { context, .. } => Error::NonFinite { context, path: Some(p) },
                        other => other,
                    })?;
                *g = discounts[0] * value;
                Ok(())
            },
        )?;
    Ok((samples, payoffs))
}

/// Hedge at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgePoint {
    pub theta: DVector<f64>,
    pub projected_rhs: DVector<f64>,
    /// `|sigma^T theta - rhs|`
    pub residual: f64,
    /// `|(I - P) rhs| / |rhs|` before projection was applied
    pub range_defect: f64,
}

/// Per-time summary of the fitted hedge over the training states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSummary {
    pub time_index: usize,
    pub time: f64,
    pub theta_mean: Vec<f64>,
    pub theta_se: Vec<f64>,
    pub projected_rhs_mean: Vec<f64>,
    pub r2: Vec<f64>,
    pub condition: f64,
    pub max_residual: f64,
    pub max_range_defect: f64,
}

/// Hedge of one exported training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub path_id: usize,
    pub time_index: usize,
    pub time: f64,
    pub state: Vec<f64>,
    pub feature: Option<f64>,
    pub theta: Vec<f64>,
    pub projected_rhs: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgePlan {
    pub times: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub v0: f64,
    pub v0_se: f64,
    /// regressed conditional expectation of the discounted payoff at `t = 0`
    pub v0_regressed: f64,
    pub admissibility: f64,
    pub admissibility_se: f64,
    /// sample second moment of the discounted payoff
    pub payoff_second_moment: f64,
    pub feature: Option<PathFeature>,
    pub fits: Vec<FittedFunction>,
    pub rows: Vec<TimeSummary>,
    pub exported: Vec<PlanRow>,
    pub training_seed: u64,
    pub n_paths: usize,
    pub tolerances: Tolerances,
    pub regression: RegressionSpec,
    pub warnings: Vec<String>,
}

/// Evaluates a plan at arbitrary states of a model.
pub struct PlanEvaluator<'a> {
    plan: &'a HedgePlan,
    model: &'a MarketModel,
    cache: GeometryCache<'a>,
    grid: TimeGrid,
}

fn mean_se(values: impl ExactSizeIterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn hedge_point(
    model: &MarketModel,
    cache: &GeometryCache<'_>,
    fit: &FittedFunction,
    k: usize,
    t: f64,
    x: &[f64],
    feature: Option<f64>,
    raw: &mut Vec<f64>,
) -> Result<HedgePoint> {
    raw.clear();
    raw.extend_from_slice(x);
    if let Some(f) = feature {
        raw.push(f);
    }
    let mut s_hat = DVector::zeros(fit.outputs());
    fit.eval(raw, s_hat.as_mut_slice());
    let g = cache.at(k, x)?;
    let rhs = &g.projection * &s_hat;
    let norm = rhs.norm();
    let defect = (&rhs - &g.projection * &rhs).norm();
    let sigma_t = model.sigma(t, x).transpose();
    let sol = linalg::min_norm_solve(&sigma_t, &rhs, cache.tolerances().rank)?;
    Ok(HedgePoint {
        theta: sol.x,
        projected_rhs: rhs,
        residual: sol.residual,
        range_defect: if norm > 0.0 { defect / norm } else { 0.0 },
    })
}

impl HedgePlan {
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::from_times(self.times.clone())
    }

    pub fn evaluator<'a>(&'a self, model: &'a MarketModel) -> Result<PlanEvaluator<'a>> {
        if model.n != self.n || model.d != self.d {
            return Err(Error::dims("plan dimension", self.n, model.n));
        }
        let grid = self.grid()?;
        Ok(PlanEvaluator {
            plan: self,
            model,
            cache: GeometryCache::new(model, &grid, self.tolerances)?,
            grid,
        })
    }

    /// CSV of the exported training states:
    /// `path_id,time_index,time,X_*,[feature],theta_*,rhs_*,r2_*,residual`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let mut hdr = vec!["path_id".to_string(), "time_index".into(), "time".into()];
        hdr.extend((1..=self.n).map(|i| format!("X_{i}")));
        if self.feature.is_some() {
            hdr.push("feature".into());
        }
        hdr.extend((1..=self.n).map(|i| format!("theta_{i}")));
        hdr.extend((1..=self.d).map(|i| format!("rhs_{i}")));
        hdr.extend((1..=self.d).map(|i| format!("r2_{i}")));
        hdr.push("residual".into());
        writeln!(w, "{}", hdr.join(","))?;
        for r in &self.exported {
            let mut cells = vec![r.path_id.to_string(), r.time_index.to_string(), r.time.to_string()];
            cells.extend(r.state.iter().map(f64::to_string));
            if let Some(f) = r.feature {
                cells.push(f.to_string());
            }
            cells.extend(r.theta.iter().map(f64::to_string));
            cells.extend(r.projected_rhs.iter().map(f64::to_string));
            cells.extend(self.rows[r.time_index].r2.iter().map(f64::to_string));
            cells.push(r.residual.to_string());
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

impl PlanEvaluator<'_> {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn plan(&self) -> &HedgePlan {
        self.plan
    }

    pub fn hedge(&self, k: usize, x: &[f64], feature: Option<f64>) -> Result<HedgePoint> {
        let mut raw = Vec::with_capacity(x.len() + 1);
        hedge_point(
            self.model,
            &self.cache,
            &self.plan.fits[k],
            k,
            self.grid.times()[k],
            x,
            feature,
            &mut raw,
        )
    }
}

/// Builds the hedge plan from a Q-bundle.
pub fn solve_hedge(
    model: &MarketModel,
    payoff: &Payoff,
    bundle: &PathBundle,
    opts: &HedgeOptions,
) -> Result<HedgePlan> {
    opts.regression.validate()?;
    let (n, d, m, np) = (bundle.n, bundle.d, bundle.grid.steps(), bundle.n_paths);
    let tol = opts.tolerances;
    let (samples, disc_payoffs) = integrand_samples(model, payoff, bundle, &tol)?;
    let cache = GeometryCache::new(model, &bundle.grid, tol)?;

    let feature = match opts.regression.basis {
        crate::config::BasisKind::PayoffAware => payoff.path_feature(),
        crate::config::BasisKind::Polynomial => None,
    };
    let features: Vec<Vec<f64>> = match feature {
        Some(f) => (0..np).into_par_iter().map(|p| f.along(&bundle.path(p))).collect(),
        None => Vec::new(),
    };
    let nf = n + usize::from(feature.is_some());

    let (v0, v0_se) = mean_se(disc_payoffs.iter().copied());
    let payoff_second_moment = disc_payoffs.iter().map(|v| v * v).sum::<f64>() / np as f64;
    let mut warnings = Vec::new();
    let fourth = disc_payoffs.iter().map(|v| (v - v0).powi(4)).sum::<f64>() / np as f64;
    let var = disc_payoffs.iter().map(|v| (v - v0).powi(2)).sum::<f64>() / np as f64;
    if var > 0.0 && fourth / (var * var) > 50.0 {
        let msg = format!(
            "heavy-tailed discounted payoff: sample kurtosis {:.1}",
            fourth / (var * var)
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut feat_buf = vec![0.0; np * nf];
    let mut targ_buf = vec![0.0; np * d];
    let mut fits = Vec::with_capacity(m + 1);
    let mut rows = Vec::with_capacity(m + 1);
    let mut exported = Vec::new();
    let mut admissibility = vec![0.0; np];
    let mut v0_regressed = v0;
    for k in 0..=m {
        let t = bundle.grid.times()[k];
        for p in 0..np {
            let path = bundle.path(p);
            feat_buf[p * nf..p * nf + n].copy_from_slice(path.state(k));
            if feature.is_some() {
                feat_buf[p * nf + n] = features[p][k];
            }
            let base = (p * (m + 1) + k) * d;
            targ_buf[p * d..(p + 1) * d].copy_from_slice(&samples[base..base + d]);
        }
        let fit = regress_conditional(&feat_buf, nf, &targ_buf, d, &opts.regression, k)?;
        log::debug!(
            "time index {k}: basis {} condition {:.3e} r2 {:?}",
            fit.basis_len(),
            fit.condition,
            fit.r2
        );
        if k == 0 {
            let tower = regress_conditional(&feat_buf, nf, &disc_payoffs, 1, &opts.regression, 0)?;
            let mut out = [0.0];
            tower.eval(&feat_buf[..nf], &mut out);
            v0_regressed = out[0];
        }
        let points: Vec<HedgePoint> = (0..np)
            .into_par_iter()
            .map_init(
                || Vec::with_capacity(nf),
                |raw, p| {
                    let x = bundle.path(p).state(k);
                    let f = feature.map(|_| features[p][k]);
                    hedge_point(model, &cache, &fit, k, t, x, f, raw)
                },
            )
            .collect::<Result<_>>()?;

        let mut theta_mean = Vec::with_capacity(n);
        let mut theta_se = Vec::with_capacity(n);
        for i in 0..n {
            let (mu, se) = mean_se(points.iter().map(|h| h.theta[i]));
            theta_mean.push(mu);
            theta_se.push(se);
        }
        let projected_rhs_mean = (0..d)
            .map(|c| points.iter().map(|h| h.projected_rhs[c]).sum::<f64>() / np as f64)
            .collect();
        let max_residual = points.iter().map(|h| h.residual).fold(0.0, f64::max);
        let max_range_defect = points.iter().map(|h| h.range_defect).fold(0.0, f64::max);
        if k < m {
            let dt = bundle.grid.dt(k);
            for (a, h) in admissibility.iter_mut().zip(&points) {
                *a += h.projected_rhs.norm_squared() * dt;
            }
        }
        for (p, h) in points.iter().enumerate().take(opts.export_states.min(np)) {
            exported.push(PlanRow {
                path_id: p,
                time_index: k,
                time: t,
                state: bundle.path(p).state(k).to_vec(),
                feature: feature.map(|_| features[p][k]),
                theta: h.theta.iter().copied().collect(),
                projected_rhs: h.projected_rhs.iter().copied().collect(),
                residual: h.residual,
            });
        }
        rows.push(TimeSummary {
            time_index: k,
            time: t,
            theta_mean,
            theta_se,
            projected_rhs_mean,
            r2: fit.r2.clone(),
            condition: fit.condition,
            max_residual,
            max_range_defect,
        });
        fits.push(fit);
    }
    exported.sort_by_key(|r| (r.path_id, r.time_index));
    let (admissibility, admissibility_se) = mean_se(admissibility.iter().copied());
    Ok(HedgePlan {
        times: bundle.grid.times().to_vec(),
        n,
        d,
        v0,
        v0_se,
        v0_regressed,
        admissibility,
        admissibility_se,
        payoff_second_moment,
        feature,
        fits,
        rows,
        exported,
        training_seed: bundle.seed,
        n_paths: np,
        tolerances: tol,
        regression: opts.regression,
        warnings,
    })
}

/// Null-space basis of `sigma^T(x)`, used to check that the minimal-norm
/// hedge carries no unobservable component.
pub fn null_space(a: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let pinv = linalg::pseudoinverse(a, tol)?;
    let proj = DMatrix::identity(a.ncols(), a.ncols()) - pinv * a;
    Ok(proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BasisKind, PayoffKind};
    use crate::model::parse_model;
    use crate::sde::{resolve_grid, simulate_paths};
    use crate::testing::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn bs_d1(x: f64, k: f64, r: f64, s: f64, tau: f64) -> f64 {
        ((x / k).ln() + (r + 0.5 * s * s) * tau) / (s * tau.sqrt())
    }

    fn check_adjoint(text: &str, payoff: Payoff, steps: usize) {
        let m = parse_model(text).unwrap();
        let grid = resolve_grid(&m, steps).unwrap();
        let b = simulate_paths(&m, &grid, 12, 21, Measure::Q).unwrap();
        let (samples, _) = integrand_samples(&m, &payoff, &b, &Tolerances::default()).unwrap();
        let d = m.d;
        for k in [0, 1, steps / 2, steps - 1, steps] {
            let direct = clark_ocone_rhs(&m, &payoff, &b, k).unwrap();
            for s in &direct {
                let v = s.value();
                for c in 0..d {
                    let a = samples[(s.path_id * (steps + 1) + k) * d + c];
                    assert!(
                        (a - v[c]).abs() <= 1e-10 * (1.0 + v[c].abs()),
                        "{:?} path {} k {k} c {c}: adjoint {a} vs direct {}",
                        payoff.kind,
                        s.path_id,
                        v[c]
                    );
                }
            }
        }
    }

    #[test]
    fn adjoint_matches_direct_route() {
        check_adjoint(SMOOTH, Payoff::exchange(0, 1), 12);
        check_adjoint(SMOOTH, Payoff::asian_floating_call(0, 1, 0.5), 12);
        check_adjoint(SMOOTH, Payoff::lookback_floating(0, 1, 0.8), 12);
        check_adjoint(DELTA_ZERO, Payoff::asian_floating_call(0, 1, 1.0), 12);
        check_adjoint(GBM, Payoff::european_call(0, 100.0), 12);
    }

    #[test]
    fn correction_vanishes_for_constant_pu() {
        for text in [GBM, DELTA_ZERO] {
            let m = parse_model(text).unwrap();
            let grid = resolve_grid(&m, 16).unwrap();
            let b = simulate_paths(&m, &grid, 20, 1, Measure::Q).unwrap();
            for p in 0..20 {
                let fv = crate::sde::first_variation(&m, b.path(p), 3).unwrap();
                let c = correction_integral(&m, b.path(p), &fv).unwrap();
                assert!(c.iter().all(|v| v.to_bits() == 0));
            }
        }
    }

    #[test]
    fn correction_matches_bumped_girsanov_exponent() {
        // Freeze dW~, move the state along a bump of the P-increment at t_k and
        // differentiate sum_{j>k} P u(X_j) . dW~_j.
        let m = parse_model(SMOOTH).unwrap();
        let steps = 24;
        let grid = resolve_grid(&m, steps).unwrap();
        let b = simulate_paths(&m, &grid, 8, 2, Measure::Q).unwrap();
        let tol = Tolerances::default();
        let pu = |t: f64, x: &[f64]| {
            crate::measure::market_price_of_risk_with(&m, t, x, &tol)
                .unwrap()
                .projected
        };
        let exponent = |states: &[f64], dw_q: &[f64], k: usize| -> f64 {
            ((k + 1)..steps)
                .map(|j| {
                    pu(grid.times()[j], &states[j * 2..j * 2 + 2])
                        .dot(&DVector::from_column_slice(&dw_q[j * 2..j * 2 + 2]))
                })
                .sum()
        };
        let eps = 1e-5;
        for p in 0..8 {
            let path = b.path(p);
            let mut dw_p = path.increments.to_vec();
            for j in 0..steps {
                let u = pu(grid.times()[j], path.state(j));
                for c in 0..2 {
                    dw_p[j * 2 + c] -= u[c] * grid.dt(j);
                }
            }
            for k in [0, 5, 17] {
                let fv = crate::sde::first_variation(&m, path, k).unwrap();
                let corr = correction_integral(&m, path, &fv).unwrap();
                assert!(corr.norm() > 0.0);
                for c in 0..2 {
                    let bumped = |e: f64| {
                        let mut inc = dw_p.clone();
                        inc[k * 2 + c] += e;
                        let mut st = vec![0.0; (steps + 1) * 2];
                        crate::sde::propagate(&m, &grid, Measure::P, &inc, &mut st).unwrap();
                        exponent(&st, path.increments, k)
                    };
                    let fd = (bumped(eps) - bumped(-eps)) / (2.0 * eps);
                    assert!(
                        (fd - corr[c]).abs() <= 1e-2 * corr.norm(),
                        "path {p} k {k} c {c}: fd {fd} vs {}",
                        corr[c]
                    );
                }
            }
        }
    }

    #[test]
    fn black_scholes_integrand_regression_matches_delta() {
        let m = parse_model(GBM).unwrap();
        let grid = resolve_grid(&m, 64).unwrap();
        let np = 400_000;
        let b = simulate_paths(&m, &grid, np, 3, Measure::Q).unwrap();
        let payoff = Payoff::european_call(0, 100.0);
        let (samples, _) = integrand_samples(&m, &payoff, &b, &Tolerances::default()).unwrap();
        let k = 32;
        let xs: Vec<f64> = (0..np).map(|p| b.path(p).state(k)[0]).collect();
        let ys: Vec<f64> = (0..np).map(|p| samples[p * 65 + k]).collect();
        let spec = RegressionSpec {
            basis: BasisKind::Polynomial,
            degree: 3,
            ridge: 1e-8,
            knots: 4,
        };
        let fit = regress_conditional(&xs, 1, &ys, 1, &spec, k).unwrap();
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let (q1, q3) = (sorted[np / 4], sorted[3 * np / 4]);
        let n01 = Normal::standard();
        for i in 0..=10 {
            let x = q1 + (q3 - q1) * i as f64 / 10.0;
            let mut out = [0.0];
            fit.eval(&[x], &mut out);
            // the discount to T cancels against the growth of X_T under Q
            let expect = n01.cdf(bs_d1(x, 100.0, 0.03, 0.2, 0.5)) * 0.2 * x;
            assert!((out[0] / expect - 1.0).abs() < 2e-2, "x {x}: {} vs {expect}", out[0]);
        }
    }

    #[test]
    fn black_scholes_initial_hedge_is_delta() {
        let m = parse_model(GBM).unwrap();
        let grid = resolve_grid(&m, 16).unwrap();
        let b = simulate_paths(&m, &grid, 100_000, 8, Measure::Q).unwrap();
        let plan = solve_hedge(&m, &Payoff::european_call(0, 100.0), &b, &HedgeOptions::default()).unwrap();
        let d1 = bs_d1(100.0, 100.0, 0.03, 0.2, 1.0);
        let n01 = Normal::standard();
        assert!((plan.rows[0].theta_mean[0] / n01.cdf(d1) - 1.0).abs() < 2e-2);
        assert!((plan.v0_regressed - plan.v0).abs() <= 3.0 * plan.v0_se);
        assert!(plan
            .rows
            .iter()
            .all(|r| r.max_range_defect <= 1e-10 && r.max_residual <= 1e-10));
    }

    #[test]
    fn constant_payoff_needs_no_risky_position() {
        let m = parse_model(DELTA_ZERO).unwrap();
        let grid = resolve_grid(&m, 64).unwrap();
        let b = simulate_paths(&m, &grid, 2000, 4, Measure::Q).unwrap();
        let plan = solve_hedge(&m, &Payoff::constant(5.0), &b, &HedgeOptions::default()).unwrap();
        assert!((plan.v0 - 5.0 * m.discount(0.0, 1.0)).abs() < 1e-12);
        assert!(plan.v0_se < 1e-12);
        for r in &plan.rows {
            assert!(r.theta_mean.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn embedding_has_no_position_in_the_bank_asset() {
        let m = parse_model(EMBEDDING).unwrap();
        let grid = resolve_grid(&m, 16).unwrap();
        let b = simulate_paths(&m, &grid, 4000, 5, Measure::Q).unwrap();
        let plan = solve_hedge(&m, &Payoff::european_call(0, 100.0), &b, &HedgeOptions::default()).unwrap();
        for r in &plan.rows {
            assert_eq!(r.theta_mean[1], 0.0);
            assert!(r.theta_mean[0] > 0.0);
        }
    }

    #[test]
    fn minimal_norm_hedge_has_no_null_component() {
        let m = parse_model(DELTA_ZERO).unwrap();
        let grid = resolve_grid(&m, 64).unwrap();
        let b = simulate_paths(&m, &grid, 3000, 6, Measure::Q).unwrap();
        let plan = solve_hedge(&m, &Payoff::exchange(0, 1), &b, &HedgeOptions::default()).unwrap();
        assert!(!plan.exported.is_empty());
        for row in &plan.exported {
            let sigma_t = m.sigma(row.time, &row.state).transpose();
            let theta = DVector::from_vec(row.theta.clone());
            let null = null_space(&sigma_t, 1e-10).unwrap();
            assert!((&null * &theta).norm() <= 1e-10 * (1.0 + theta.norm()));
            let z = &null * DVector::from_vec(vec![0.7, -1.3]);
            let a = &sigma_t * (&theta + &z);
            let b = &sigma_t * &theta;
            assert!((a - b).norm() <= 1e-9 * (1.0 + theta.norm()));
        }
    }

    #[test]
    fn plan_csv_layout() {
        let m = parse_model(GBM).unwrap();
        let grid = resolve_grid(&m, 4).unwrap();
        let b = simulate_paths(&m, &grid, 500, 6, Measure::Q).unwrap();
        let payoff = Payoff::from_section(
            &crate::config::PayoffSection {
                kind: PayoffKind::EuropeanCall,
                strike: Some(100.0),
                assets: vec![1],
                value: None,
            },
            1,
        )
        .unwrap();
        let plan = solve_hedge(
            &m,
            &payoff,
            &b,
            &HedgeOptions {
                export_states: 2,
                ..HedgeOptions::default()
            },
        )
        .unwrap();
        let mut out = Vec::new();
        plan.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("path_id,time_index,time,X_1,theta_1,rhs_1,r2_1,residual\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 5);
    }
}
