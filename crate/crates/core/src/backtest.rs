//! Out-of-sample replication of a hedge plan and plain Monte Carlo pricing.
//!
//! Wealth is tracked in discounted units. With `beta_j = e^{-int_0^{t_j} r}`
//! one step of the self-financing portfolio is
//! `U_{j+1} = U_j + beta_j theta_j . (X_{j+1} - X_j - r_j X_j dt_j)`,
//! which under the Euler scheme for Q is `beta_j theta_j^T sigma_j dW~_j`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::MeasureChoice;
use crate::error::{Error, Result};
use crate::hedging::{hedge_point, HedgePlan};
use crate::measure::GeometryCache;
use crate::model::MarketModel;
use crate::payoff::Payoff;
use crate::sde::{resolve_grid, simulate_one, Measure, PathRef, TimeGrid};

/// Probabilities of the reported wealth quantiles.
pub const WEALTH_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BacktestOptions {
    pub measure: MeasureChoice,
}

impl Default for BacktestOptions {
    fn default() -> Self {
        Self {
            measure: MeasureChoice::Q,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstPath {
    pub path_id: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub time_index: usize,
    pub time: f64,
    /// mean and standard error of the discounted wealth increment
    pub increment_mean: f64,
    pub increment_se: f64,
    /// wealth quantiles at `t_j`, in the order of [`WEALTH_QUANTILES`]
    pub wealth_quantiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub n_paths: usize,
    pub seed: u64,
    pub measure: MeasureChoice,
    pub times: Vec<f64>,
    /// Monte Carlo price on the backtest paths (Girsanov-weighted under P)
    pub price_v0: f64,
    pub price_se: f64,
    /// starting wealth, the plan's price
    pub initial_wealth: f64,
    pub replication_rmse: f64,
    pub replication_rmse_relative: f64,
    pub mean_error: f64,
    pub worst_path: WorstPath,
    pub admissibility_estimate: f64,
    pub admissibility_se: f64,
    pub steps: Vec<StepStats>,
    /// `V_T - G` per path
    #[serde(skip)]
    pub terminal_errors: Vec<f64>,
}

impl BacktestReport {
    pub fn write_errors_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "path_id,terminal_error")?;
        for (p, e) in self.terminal_errors.iter().enumerate() {
            writeln!(w, "{p},{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceReport {
    pub v0: f64,
    pub standard_error: f64,
    pub n_paths: usize,
    pub seed: u64,
}

pub(crate) fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Empirical quantile by linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Monte Carlo price `E_Q[e^{-int r} G]` with its standard error.
pub fn price(model: &MarketModel, payoff: &Payoff, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PriceReport> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
    }
    let (n, d, m) = (model.n, model.d, grid.steps());
    let disc = model.discount(0.0, grid.horizon());
    let values = (0..n_paths)
        .into_par_iter()
        .map_init(
            || (vec![0.0; (m + 1) * n], vec![0.0; m * d]),
            |(states, incs), p| {
                simulate_one(model, grid, Measure::Q, seed, p, states, incs)?;
                let path = PathRef {
                    grid,
                    measure: Measure::Q,
                    n,
                    d,
                    states,
                    increments: incs,
                };
                Ok(disc * payoff.evaluate(&path))
            },
        )
        .collect::<Result<Vec<f64>>>()?;
    let (v0, standard_error) = mean_se(&values);
    Ok(PriceReport {
        v0,
        standard_error,
        n_paths,
        seed,
    })
}

struct PathOutcome {
    error: f64,
    discounted_payoff: f64,
    girsanov: f64,
    admissibility: f64,
}

/// Runs the plan on `n_paths` fresh paths drawn with `seed`.
pub fn replicate(
    model: &MarketModel,
    payoff: &Payoff,
    plan: &HedgePlan,
    n_paths: usize,
    seed: u64,
    opts: &BacktestOptions,
) -> Result<BacktestReport> {
    if seed == plan.training_seed {
        return Err(Error::SeedReuse(seed));
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
    }
    let plan_grid = plan.grid()?;
    let grid = resolve_grid(model, plan_grid.steps())?;
    if grid.times().len() != plan.times.len()
        || grid
            .times()
            .iter()
            .zip(&plan.times)
            .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(Error::GridMismatch);
    }
    let eval = plan.evaluator(model)?;
    let cache = GeometryCache::new(model, &grid, plan.tolerances)?;
    let (n, d, m) = (model.n, model.d, grid.steps());
    let times = grid.times();
    let horizon = grid.horizon();
    let beta: Vec<f64> = times.iter().map(|&t| model.discount(0.0, t)).collect();
    let measure = match opts.measure {
        MeasureChoice::Q => Measure::Q,
        MeasureChoice::P => Measure::P,
    };
    let feature = plan.feature;

    // wealth[p * (m + 1) + j] = V_{t_j}, du[p * m + j] = U_{j+1} - U_j
    let mut wealth = vec![0.0; n_paths * (m + 1)];
    let mut du = vec![0.0; n_paths * m];
    let outcomes = wealth
        .par_chunks_mut(m + 1)
        .zip(du.par_chunks_mut(m))
        .enumerate()
        .map_init(
            || {
                (
                    vec![0.0; (m + 1) * n],
                    vec![0.0; m * d],
                    Vec::with_capacity(n + 1),
                    vec![0.0; n * d],
                )
            },
            |(states, incs, raw, vol), (p, (wealth, du))| -> Result<PathOutcome> {
                simulate_one(model, &grid, measure, seed, p, states, incs)?;
                let path = PathRef {
                    grid: &grid,
                    measure,
                    n,
                    d,
                    states,
                    increments: incs,
                };
                let features = feature.map(|f| f.along(&path));
                let mut u = plan.v0;
                let mut adm = 0.0;
                let mut log_z = 0.0;
                wealth[0] = u;
                for j in 0..m {
                    let x = path.state(j);
                    let next = path.state(j + 1);
                    let dt = grid.dt(j);
                    let h = hedge_point(
                        model,
                        &cache,
                        &eval.plan().fits[j],
                        j,
                        times[j],
                        x,
                        features.as_ref().map(|f| f[j]),
                        raw,
                    )?;
                    let r = model.rate(times[j]);
                    let gain: f64 = (0..n).map(|i| h.theta[i] * (next[i] - x[i] - r * x[i] * dt)).sum();
                    du[j] = beta[j] * gain;
                    u += du[j];
                    wealth[j + 1] = u / beta[j + 1];
                    model.vol_into(times[j], x, vol);
                    let st: f64 = (0..d)
                        .map(|c| (0..n).map(|i| h.theta[i] * vol[i * d + c]).sum::<f64>().powi(2))
                        .sum();
                    adm += st * dt;
                    if measure == Measure::P {
                        let g = cache.at(j, x)?;
                        let dw = path.increment(j);
                        log_z -= g.pu.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>() + 0.5 * g.pu.norm_squared() * dt;
                    }
                }
                let g = payoff.evaluate(&path);
                let error = wealth[m] - g;
                if !error.is_finite() {
                    return Err(Error::NonFinite {
                        context: "replication wealth".into(),
                        path: Some(p),
                    });
                }
                Ok(PathOutcome {
                    error,
                    discounted_payoff: model.discount(0.0, horizon) * g,
                    girsanov: log_z.exp(),
                    admissibility: adm,
                })
            },
        )
        .collect::<Result<Vec<_>>>()?;

    let errors: Vec<f64> = outcomes.iter().map(|o| o.error).collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n_paths as f64).sqrt();
    let mean_error = errors.iter().sum::<f64>() / n_paths as f64;
    let mut worst = WorstPath {
        path_id: 0,
        error: errors[0],
    };
    for (p, &e) in errors.iter().enumerate() {
        if e.abs() > worst.error.abs() {
            worst = WorstPath { path_id: p, error: e };
        }
    }
    let weighted: Vec<f64> = outcomes.iter().map(|o| o.discounted_payoff * o.girsanov).collect();
    let (price_v0, price_se) = mean_se(&weighted);
    let adm: Vec<f64> = outcomes.iter().map(|o| o.admissibility).collect();
    let (admissibility_estimate, admissibility_se) = mean_se(&adm);

    let mut steps = Vec::with_capacity(m + 1);
    let mut column = vec![0.0; n_paths];
    for j in 0..=m {
        let (increment_mean, increment_se) = if j < m {
            column.iter_mut().enumerate().for_each(|(p, v)| *v = du[p * m + j]);
            mean_se(&column)
        } else {
            (0.0, 0.0)
        };
        column
            .iter_mut()
            .enumerate()
            .for_each(|(p, v)| *v = wealth[p * (m + 1) + j]);
        column.sort_by(f64::total_cmp);
        steps.push(StepStats {
            time_index: j,
            time: times[j],
            increment_mean,
            increment_se,
            wealth_quantiles: WEALTH_QUANTILES.iter().map(|&q| quantile(&column, q)).collect(),
        });
    }
    Ok(BacktestReport {
        n_paths,
        seed,
        measure: opts.measure,
        times: times.to_vec(),
        price_v0,
        price_se,
        initial_wealth: plan.v0,
        replication_rmse: rmse,
        replication_rmse_relative: rmse / plan.v0.abs(),
        mean_error,
        worst_path: worst,
        admissibility_estimate,
        admissibility_se,
        steps,
        terminal_errors: errors,
    })
}
