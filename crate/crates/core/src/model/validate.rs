use serde::{Deserialize, Serialize};

use crate::measure::{solve_mpr, Tolerances};
use crate::sde::{resolve_grid, simulate_paths, Measure};

use super::MarketModel;

/// Number of probe states at which `sigma` had a given rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCount {
    pub rank: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelValidationReport {
    pub arbitrage_ok: bool,
    /// largest scaled residual `|sigma u - (b - r x)| / (1 + |b - r x|)`
    pub max_residual: f64,
    pub worst_time: f64,
    pub worst_state: Vec<f64>,
    pub tolerance: f64,
    pub probe_states: usize,
    pub rank_profile: Vec<RankCount>,
    pub warnings: Vec<String>,
}

const PROBE_STEPS: usize = 8;

pub fn validate_no_arbitrage(model: &MarketModel, probes: usize, seed: u64) -> ModelValidationReport {
    validate_no_arbitrage_with(model, probes, seed, &Tolerances::default())
}

/// Solves `sigma u = b - r x` at `x0` at every segment start and along
/// `probes` coarse P-paths.
pub fn validate_no_arbitrage_with(
    model: &MarketModel,
    probes: usize,
    seed: u64,
    tol: &Tolerances,
) -> ModelValidationReport {
    let mut warnings = Vec::new();
    let mut states: Vec<(f64, Vec<f64>)> = model
        .segment_starts()
        .into_iter()
        .map(|t| (t, model.x0.clone()))
        .collect();
    let grid = resolve_grid(model, PROBE_STEPS).expect("positive horizon");
    match simulate_paths(model, &grid, probes.max(1), seed, Measure::P) {
        Ok(bundle) => {
            for p in 0..bundle.n_paths {
                let path = bundle.path(p);
                for (j, &t) in grid.times().iter().enumerate() {
                    states.push((t, path.state(j).to_vec()));
                }
            }
        }
        Err(e) => warnings.push(format!("probe simulation failed, checked x0 only: {e}")),
    }

    let mut max_residual = 0.0f64;
    let mut worst = (0.0, model.x0.clone());
    let mut ranks: Vec<RankCount> = Vec::new();
    for (t, x) in &states {
        match solve_mpr(model, *t, x, tol.rank) {
            Ok(mpr) => {
                if mpr.scaled_residual > max_residual || max_residual.is_nan() {
                    max_residual = mpr.scaled_residual;
                    worst = (*t, x.clone());
                }
                match ranks.iter_mut().find(|r| r.rank == mpr.rank) {
                    Some(r) => r.count += 1,
                    None => ranks.push(RankCount {
                        rank: mpr.rank,
                        count: 1,
                    }),
                }
            }
            Err(e) => {
                max_residual = f64::NAN;
                worst = (*t, x.clone());
                warnings.push(format!("coefficients failed at t = {t}: {e}"));
                break;
            }
        }
    }
    ranks.sort_by_key(|r| r.rank);
    if ranks.len() > 1 {
        warnings.push("rank of sigma varies across probe states".into());
    }
    let arbitrage_ok = max_residual <= tol.arbitrage;
    if !arbitrage_ok {
        warnings.push(format!(
            "b - r x is not in the range of sigma at t = {}, x = {:?}",
            worst.0, worst.1
        ));
    }
    ModelValidationReport {
        arbitrage_ok,
        max_residual,
        worst_time: worst.0,
        worst_state: worst.1,
        tolerance: tol.arbitrage,
        probe_states: states.len(),
        rank_profile: ranks,
        warnings,
    }
}
