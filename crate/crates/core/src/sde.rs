//! Euler-Maruyama path simulation under P or Q, and the first-variation
//! (pathwise Malliavin derivative) process along simulated paths.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::{GeometryCache, Tolerances};
use crate::model::MarketModel;
use crate::rng::{fill_normal, path_rng};

/// Paths are abandoned once `|X|` exceeds this bound.
pub const EXPLOSION_BOUND: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Measure {
    P,
    Q,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        let times = (0..=steps)
            .map(|j| {
                if j == steps {
                    horizon
                } else {
                    horizon * j as f64 / steps as f64
                }
            })
            .collect();
        Ok(Self { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 {
            return Err(Error::InvalidArgument("grid must start at 0 and have a step".into()));
        }
        if !times.windows(2).all(|w| w[1] > w[0] && w[1].is_finite()) {
            return Err(Error::InvalidArgument("grid times must strictly increase".into()));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of steps `M`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self, j: usize) -> f64 {
        self.times[j + 1] - self.times[j]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.steps()]
    }
}

pub fn resolve_grid(model: &MarketModel, steps: usize) -> Result<TimeGrid> {
    TimeGrid::uniform(model.horizon, steps)
}

/// A rank change of `sigma` along a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankChange {
    pub time_index: usize,
    pub rank: usize,
}

/// Simulated paths, stored path-major: `states[(p * (M + 1) + j) * n + i]`
/// and `increments[(p * M + j) * d + c]`. Under Q the increments are those
/// of the Q-Brownian motion.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub measure: Measure,
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    states: Vec<f64>,
    increments: Vec<f64>,
    pub rank_log: Vec<Vec<RankChange>>,
}

/// Borrowed view of one path.
#[derive(Debug, Clone, Copy)]
pub struct PathRef<'a> {
    pub grid: &'a TimeGrid,
    pub measure: Measure,
    pub n: usize,
    pub d: usize,
    pub states: &'a [f64],
    pub increments: &'a [f64],
}

impl<'a> PathRef<'a> {
    pub fn state(&self, j: usize) -> &'a [f64] {
        &self.states[j * self.n..(j + 1) * self.n]
    }

    pub fn increment(&self, j: usize) -> &'a [f64] {
        &self.increments[j * self.d..(j + 1) * self.d]
    }

    pub fn terminal(&self) -> &'a [f64] {
        self.state(self.grid.steps())
    }
}

impl PathBundle {
    pub fn path(&self, p: usize) -> PathRef<'_> {
        let m = self.grid.steps();
        let (sn, sd) = ((m + 1) * self.n, m * self.d);
        PathRef {
            grid: &self.grid,
            measure: self.measure,
            n: self.n,
            d: self.d,
            states: &self.states[p * sn..(p + 1) * sn],
            increments: &self.increments[p * sd..(p + 1) * sd],
        }
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// CSV dump: `path_id,time,X_1..X_n` and `path_id,time,dW_1..dW_d`
    /// (increment rows are stamped with the left end of their step).
    pub fn write_csv(&self, states: &mut impl Write, increments: &mut impl Write) -> Result<()> {
        let m = self.grid.steps();
        let hdr: Vec<String> = (1..=self.n).map(|i| format!("X_{i}")).collect();
        writeln!(states, "path_id,time,{}", hdr.join(","))?;
        let hdr: Vec<String> = (1..=self.d).map(|i| format!("dW_{i}")).collect();
        writeln!(increments, "path_id,time,{}", hdr.join(","))?;
        for p in 0..self.n_paths {
            let path = self.path(p);
            for j in 0..=m {
                write!(states, "{p},{}", self.grid.times()[j])?;
                for v in path.state(j) {
                    write!(states, ",{v}")?;
                }
                writeln!(states)?;
                if j < m {
                    write!(increments, "{p},{}", self.grid.times()[j])?;
                    for v in path.increment(j) {
                        write!(increments, ",{v}")?;
                    }
                    writeln!(increments)?;
                }
            }
        }
        Ok(())
    }
}

/// Euler recursion driven by the given increments, writing `M + 1` states.
/// Under P the drift is `b`, under Q it is `r x`.
pub fn propagate(
    model: &MarketModel,
    grid: &TimeGrid,
    measure: Measure,
    increments: &[f64],
    states: &mut [f64],
) -> Result<()> {
    let (n, d, m) = (model.n, model.d, grid.steps());
    if increments.len() != m * d {
        return Err(Error::dims("increments", m * d, increments.len()));
    }
    if states.len() != (m + 1) * n {
        return Err(Error::dims("states", (m + 1) * n, states.len()));
    }
    states[..n].copy_from_slice(&model.x0);
    let mut drift = vec![0.0; n];
    let mut vol = vec![0.0; n * d];
    for j in 0..m {
        let t = grid.times()[j];
        let dt = grid.dt(j);
        let (head, tail) = states.split_at_mut((j + 1) * n);
        let x = &head[j * n..];
        match measure {
            Measure::P => model.drift_into(t, x, &mut drift),
            Measure::Q => {
                let r = model.rate(t);
                drift.iter_mut().zip(x).for_each(|(o, xi)| *o = r * xi);
            }
        }
        model.vol_into(t, x, &mut vol);
        let dw = &increments[j * d..(j + 1) * d];
        let mut norm2 = 0.0;
        for i in 0..n {
            let noise: f64 = (0..d).map(|c| vol[i * d + c] * dw[c]).sum();
            let v = x[i] + drift[i] * dt + noise;
            tail[i] = v;
            norm2 += v * v;
        }
        if !(norm2.sqrt() <= EXPLOSION_BOUND) {
            return Err(Error::non_finite(format!(
                "path explosion at t = {}",
                grid.times()[j + 1]
            )));
        }
    }
    Ok(())
}

/// Draws the increments of path `index` and propagates it.
pub fn simulate_one(
    model: &MarketModel,
    grid: &TimeGrid,
    measure: Measure,
    seed: u64,
    index: usize,
    states: &mut [f64],
    increments: &mut [f64],
) -> Result<()> {
    let d = model.d;
    let mut rng = path_rng(seed, index);
    for j in 0..grid.steps() {
        fill_normal(&mut rng, grid.dt(j), &mut increments[j * d..(j + 1) * d]);
    }
    propagate(model, grid, measure, increments, states).map_err(|e| match e {
        Error::NonFinite { context, .. } => Error::NonFinite {
            context,
            path: Some(index),
        },
        other => other,
    })
}

fn rank_log(model: &MarketModel, grid: &TimeGrid, states: &[f64], tol: f64) -> Result<Vec<RankChange>> {
    let n = model.n;
    let mut log: Vec<RankChange> = Vec::new();
    for (j, &t) in grid.times().iter().enumerate() {
        let r = linalg::rank(&model.sigma(t, &states[j * n..(j + 1) * n]), tol)?;
        if log.last().is_none_or(|c| c.rank != r) {
            log.push(RankChange { time_index: j, rank: r });
        }
    }
    Ok(log)
}

pub fn simulate_paths(
    model: &MarketModel,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    measure: Measure,
) -> Result<PathBundle> {
    simulate_paths_with(model, grid, n_paths, seed, measure, linalg::DEFAULT_RANK_TOL)
}

/// Simulates `n_paths` paths; the output is independent of the number of
/// worker threads.
pub fn simulate_paths_with(
    model: &MarketModel,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    measure: Measure,
    rank_tol: f64,
) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
    }
    let (n, d, m) = (model.n, model.d, grid.steps());
    let mut states = vec![0.0; n_paths * (m + 1) * n];
    let mut increments = vec![0.0; n_paths * m * d];
    // Families with a time-only projection share one rank profile.
    let shared = if model.projection_state_independent() {
        let x = model.reference_state();
        let ref_states: Vec<f64> = (0..=m).flat_map(|_| x.iter().copied()).collect();
        Some(rank_log(model, grid, &ref_states, rank_tol)?)
    } else {
        None
    };
    let rank_logs = states
        .par_chunks_mut((m + 1) * n)
        .zip(increments.par_chunks_mut(m * d))
        .enumerate()
        .map(|(p, (s, w))| {
            simulate_one(model, grid, measure, seed, p, s, w)?;
            match &shared {
                Some(log) => Ok(log.clone()),
                None => rank_log(model, grid, s, rank_tol),
            }
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(PathBundle {
        measure,
        grid: grid.clone(),
        n_paths,
        n,
        d,
        seed,
        states,
        increments,
        rank_log: rank_logs,
    })
}

/// `D_{t_k} X_{t_j}` for `j = k..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstVariation {
    pub base_time_index: usize,
    pub matrices: Vec<DMatrix<f64>>,
}

impl FirstVariation {
    /// `D_{t_k} X_{t_j}`
    pub fn at(&self, j: usize) -> &DMatrix<f64> {
        &self.matrices[j - self.base_time_index]
    }
}

/// Per-step linearisation `A_j = I + J_b dt + J_sigma . (P dW)`, reused by
/// the first variation and by the adjoint sweeps of the hedging engine.
pub(crate) struct StepLinearizer<'m> {
    model: &'m MarketModel,
    jb: Vec<f64>,
    js: Vec<f64>,
}

impl<'m> StepLinearizer<'m> {
    pub(crate) fn new(model: &'m MarketModel) -> Self {
        Self {
            model,
            jb: vec![0.0; model.n * model.n],
            js: vec![0.0; model.n * model.d * model.n],
        }
    }

    /// `pdw` is the projected P-increment `P(X_j) dW_j`; `out` is row-major `n x n`.
    pub(crate) fn step(&mut self, t: f64, x: &[f64], dt: f64, pdw: &[f64], out: &mut [f64]) {
        let (n, d) = (self.model.n, self.model.d);
        self.model.drift_jacobian_into(t, x, &mut self.jb);
        self.model.vol_jacobian_into(t, x, &mut self.js);
        for i in 0..n {
            for l in 0..n {
                let mut v = self.jb[i * n + l] * dt;
                for c in 0..d {
                    v += self.js[(i * d + c) * n + l] * pdw[c];
                }
                out[i * n + l] = v + if i == l { 1.0 } else { 0.0 };
            }
        }
    }
}

/// Projected P-increment `P(X_j) dW_j`; under Q, `dW = dW~ - P u dt` first.
pub(crate) fn projected_p_increment(
    measure: Measure,
    projection: &DMatrix<f64>,
    pu: &nalgebra::DVector<f64>,
    dw: &[f64],
    dt: f64,
    out: &mut [f64],
) {
    let d = dw.len();
    for r in 0..d {
        let mut v = 0.0;
        for c in 0..d {
            let w = match measure {
                Measure::P => dw[c],
                Measure::Q => dw[c] - pu[c] * dt,
            };
            v += projection[(r, c)] * w;
        }
        out[r] = v;
    }
}

pub fn first_variation(model: &MarketModel, path: PathRef<'_>, k: usize) -> Result<FirstVariation> {
    let cache = GeometryCache::new(model, path.grid, Tolerances::default())?;
    first_variation_with(model, path, k, &cache)
}

/// Euler scheme for the variational equation with the same (projected)
/// increments as the path. Both `D X_{t_k}` and `D X_{t_{k+1}}` equal
/// `sigma(t_k, X_{t_k})`: the noise injected over `[t_k, t_{k+1})` enters
/// through `sigma_k` and the linearisation starts from step `k + 1`.
pub fn first_variation_with(
    model: &MarketModel,
    path: PathRef<'_>,
    k: usize,
    cache: &GeometryCache<'_>,
) -> Result<FirstVariation> {
    let m = path.grid.steps();
    if k > m {
        return Err(Error::InvalidArgument(format!(
            "base index {k} beyond grid of {m} steps"
        )));
    }
    let (n, d) = (model.n, model.d);
    let sigma_k = model.sigma(path.grid.times()[k], path.state(k));
    let mut mats = Vec::with_capacity(m - k + 1);
    mats.push(sigma_k.clone());
    if k < m {
        mats.push(sigma_k);
    }
    let mut lin = StepLinearizer::new(model);
    let mut a = vec![0.0; n * n];
    let mut pdw = vec![0.0; d];
    for j in (k + 1)..m {
        let x = path.state(j);
        let g = cache.at(j, x)?;
        projected_p_increment(
            path.measure,
            &g.projection,
            &g.pu,
            path.increment(j),
            path.grid.dt(j),
            &mut pdw,
        );
        lin.step(path.grid.times()[j], x, path.grid.dt(j), &pdw, &mut a);
        let next = DMatrix::from_row_slice(n, n, &a) * mats.last().expect("non-empty");
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("first variation"));
        }
        mats.push(next);
    }
    Ok(FirstVariation {
        base_time_index: k,
        matrices: mats,
    })
}
