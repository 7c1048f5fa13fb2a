//! Market specification: `dX = b(t, X) dt + sigma(t, X) dW` for the risky
//! assets plus a bank account growing at a deterministic, piecewise-constant
//! short rate.

pub mod expr;
mod validate;

use nalgebra::{DMatrix, DVector};

use crate::config::{ConfigFile, DriftSpec, ModelSection, RateEntry, RateSection, VolSpec};
use crate::error::{Error, Result};

pub use expr::Expr;
pub use validate::{validate_no_arbitrage, validate_no_arbitrage_with, ModelValidationReport, RankCount};

#[derive(Debug, Clone, PartialEq)]
enum Drift {
    Constant(Vec<f64>),
    Affine { offset: Vec<f64>, slope: Vec<f64> },
    Linear(Vec<f64>),
    TimeLinear(Vec<(f64, Vec<f64>)>),
    Expression(Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
enum Vol {
    Constant(Vec<f64>),
    Affine { offset: Vec<f64>, slope: Vec<f64> },
    Linear(Vec<f64>),
    TimeLinear(Vec<(f64, Vec<f64>)>),
    Expression(Vec<Expr>),
}

/// Coefficients evaluated at one `(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub b: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub r: f64,
}

/// Immutable, validated market model.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    pub n: usize,
    pub d: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub positive_x0: bool,
    rates: Vec<RateEntry>,
    drift_spec: DriftSpec,
    vol_spec: VolSpec,
    drift: Drift,
    vol: Vol,
}

/// Parses the market sections of a config file.
pub fn parse_model(config_text: &str) -> Result<MarketModel> {
    MarketModel::from_config(&ConfigFile::from_toml(config_text)?)
}

fn matrix_rows(rows: &[Vec<f64>], n: usize, d: usize, what: &str) -> Result<Vec<f64>> {
    if rows.len() != n {
        return Err(Error::dims(format!("{what} rows"), n, rows.len()));
    }
    let mut out = Vec::with_capacity(n * d);
    for row in rows {
        if row.len() != d {
            return Err(Error::dims(format!("{what} columns"), d, row.len()));
        }
        out.extend_from_slice(row);
    }
    Ok(out)
}

fn vector(v: &[f64], n: usize, what: &str) -> Result<Vec<f64>> {
    if v.len() != n {
        return Err(Error::dims(what, n, v.len()));
    }
    Ok(v.to_vec())
}

fn check_segments(starts: impl Iterator<Item = f64>, horizon: f64, what: &str) -> Result<()> {
    let mut prev: Option<f64> = None;
    for t in starts {
        if !t.is_finite() {
            return Err(Error::Schema(format!("{what}: non-finite t_start")));
        }
        match prev {
            None if t != 0.0 => return Err(Error::Schema(format!("{what}: first segment must start at 0"))),
            Some(p) if t <= p => return Err(Error::Schema(format!("{what}: t_start values must increase"))),
            _ => {}
        }
        if t >= horizon && t != 0.0 {
            return Err(Error::Schema(format!("{what}: segment starts at or after the horizon")));
        }
        prev = Some(t);
    }
    if prev.is_none() {
        return Err(Error::Schema(format!("{what}: at least one segment required")));
    }
    Ok(())
}

fn all_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Schema(format!("{what}: non-finite parameter")))
    }
}

fn segment_at<T>(segments: &[(f64, T)], t: f64) -> &T {
    let idx = segments.partition_point(|(s, _)| *s <= t);
    &segments[idx.saturating_sub(1)].1
}

impl MarketModel {
    pub fn from_config(cfg: &ConfigFile) -> Result<Self> {
        let m = &cfg.model;
        let (n, d) = (m.n, m.d);
        if n == 0 || d == 0 {
            return Err(Error::Schema("model.n and model.d must be >= 1".into()));
        }
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            return Err(Error::Schema("model.horizon must be positive".into()));
        }
        let x0 = vector(&m.x0, n, "model.x0")?;
        all_finite(&x0, "model.x0")?;
        if m.positive_x0 && x0.iter().any(|&v| v <= 0.0) {
            return Err(Error::Schema("model.x0 must be strictly positive".into()));
        }
        check_segments(cfg.rate.table.iter().map(|e| e.t_start), m.horizon, "rate.table")?;
        all_finite(
            &cfg.rate.table.iter().map(|e| e.value).collect::<Vec<_>>(),
            "rate.table",
        )?;

        let drift = match &cfg.drift {
            DriftSpec::Constant { values } => Drift::Constant(vector(values, n, "drift.values")?),
            DriftSpec::Affine { offset, slope } => Drift::Affine {
                offset: vector(offset, n, "drift.offset")?,
                slope: matrix_rows(slope, n, n, "drift.slope")?,
            },
            DriftSpec::LinearInState { coeffs } => Drift::Linear(vector(coeffs, n, "drift.coeffs")?),
            DriftSpec::TimeDependentLinear { segments } => {
                check_segments(segments.iter().map(|s| s.t_start), m.horizon, "drift.segments")?;
                Drift::TimeLinear(
                    segments
                        .iter()
                        .map(|s| Ok((s.t_start, vector(&s.coeffs, n, "drift.segments.coeffs")?)))
                        .collect::<Result<_>>()?,
                )
            }
            DriftSpec::Expression { exprs } => {
                if exprs.len() != n {
                    return Err(Error::dims("drift.exprs", n, exprs.len()));
                }
                Drift::Expression(exprs.iter().map(|e| Expr::parse(e, n)).collect::<Result<_>>()?)
            }
        };
        let vol = match &cfg.vol {
            VolSpec::Constant { matrix } => Vol::Constant(matrix_rows(matrix, n, d, "vol.matrix")?),
            VolSpec::Affine { offset, slope } => {
                let offset = matrix_rows(offset, n, d, "vol.offset")?;
                if slope.len() != n {
                    return Err(Error::dims("vol.slope rows", n, slope.len()));
                }
                let mut flat = Vec::with_capacity(n * d * n);
                for row in slope {
                    if row.len() != d {
                        return Err(Error::dims("vol.slope columns", d, row.len()));
                    }
                    for cell in row {
                        if cell.len() != n {
                            return Err(Error::dims("vol.slope depth", n, cell.len()));
                        }
                        flat.extend_from_slice(cell);
                    }
                }
                Vol::Affine { offset, slope: flat }
            }
            VolSpec::LinearInState { matrix } => Vol::Linear(matrix_rows(matrix, n, d, "vol.matrix")?),
            VolSpec::TimeDependentLinear { segments } => {
                check_segments(segments.iter().map(|s| s.t_start), m.horizon, "vol.segments")?;
                Vol::TimeLinear(
                    segments
                        .iter()
                        .map(|s| Ok((s.t_start, matrix_rows(&s.matrix, n, d, "vol.segments.matrix")?)))
                        .collect::<Result<_>>()?,
                )
            }
            VolSpec::Expression { exprs } => {
                if exprs.len() != n {
                    return Err(Error::dims("vol.exprs rows", n, exprs.len()));
                }
                let mut flat = Vec::with_capacity(n * d);
                for row in exprs {
                    if row.len() != d {
                        return Err(Error::dims("vol.exprs columns", d, row.len()));
                    }
                    for e in row {
                        flat.push(Expr::parse(e, n)?);
                    }
                }
                Vol::Expression(flat)
            }
        };
        match &drift {
            Drift::Constant(v) | Drift::Linear(v) => all_finite(v, "drift")?,
            Drift::Affine { offset, slope } => {
                all_finite(offset, "drift")?;
                all_finite(slope, "drift")?
            }
            Drift::TimeLinear(s) => s.iter().try_for_each(|(_, v)| all_finite(v, "drift"))?,
            Drift::Expression(_) => {}
        }
        match &vol {
            Vol::Constant(v) | Vol::Linear(v) => all_finite(v, "vol")?,
            Vol::Affine { offset, slope } => {
                all_finite(offset, "vol")?;
                all_finite(slope, "vol")?
            }
            Vol::TimeLinear(s) => s.iter().try_for_each(|(_, v)| all_finite(v, "vol"))?,
            Vol::Expression(_) => {}
        }
        Ok(MarketModel {
            n,
            d,
            horizon: m.horizon,
            x0,
            positive_x0: m.positive_x0,
            rates: cfg.rate.table.clone(),
            drift_spec: cfg.drift.clone(),
            vol_spec: cfg.vol.clone(),
            drift,
            vol,
        })
    }

    /// Market sections that reproduce this model when parsed again.
    pub fn to_sections(&self) -> (ModelSection, RateSection, DriftSpec, VolSpec) {
        (
            ModelSection {
                n: self.n,
                d: self.d,
                horizon: self.horizon,
                x0: self.x0.clone(),
                positive_x0: self.positive_x0,
            },
            RateSection {
                table: self.rates.clone(),
            },
            self.drift_spec.clone(),
            self.vol_spec.clone(),
        )
    }

    pub fn to_config(&self) -> ConfigFile {
        let (model, rate, drift, vol) = self.to_sections();
        ConfigFile {
            model,
            rate,
            drift,
            vol,
            payoff: None,
            run: None,
            output: None,
        }
    }

    pub fn rate_table(&self) -> &[RateEntry] {
        &self.rates
    }

    pub fn rate(&self, t: f64) -> f64 {
        let idx = self.rates.partition_point(|e| e.t_start <= t);
        self.rates[idx.saturating_sub(1)].value
    }

    /// Exact `int_a^b r(s) ds` for the piecewise-constant table.
    pub fn integrated_rate(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut total = 0.0;
        for (i, e) in self.rates.iter().enumerate() {
            let start = e.t_start;
            let end = self.rates.get(i + 1).map_or(f64::INFINITY, |n| n.t_start);
            let lo = a.max(start);
            let hi = b.min(end);
            if hi > lo {
                total += e.value * (hi - lo);
            }
        }
        total
    }

    /// `exp(-int_a^b r ds)`
    pub fn discount(&self, a: f64, b: f64) -> f64 {
        (-self.integrated_rate(a, b)).exp()
    }

    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.drift {
            Drift::Constant(v) => out.copy_from_slice(v),
            Drift::Affine { offset, slope } => {
                let n = self.n;
                for i in 0..n {
                    out[i] = offset[i] + (0..n).map(|l| slope[i * n + l] * x[l]).sum::<f64>();
                }
            }
            Drift::Linear(c) => {
                for i in 0..self.n {
                    out[i] = c[i] * x[i];
                }
            }
            Drift::TimeLinear(segs) => {
                let c = segment_at(segs, t);
                for i in 0..self.n {
                    out[i] = c[i] * x[i];
                }
            }
            Drift::Expression(es) => {
                for (o, e) in out.iter_mut().zip(es) {
                    *o = e.eval(x);
                }
            }
        }
    }

    /// Row-major `n x d` volatility.
    pub fn vol_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        match &self.vol {
            Vol::Constant(m) => out.copy_from_slice(m),
            Vol::Affine { offset, slope } => {
                for k in 0..n * d {
                    out[k] = offset[k] + (0..n).map(|l| slope[k * n + l] * x[l]).sum::<f64>();
                }
            }
            Vol::Linear(m) => scale_rows(m, x, n, d, out),
            Vol::TimeLinear(segs) => scale_rows(segment_at(segs, t), x, n, d, out),
            Vol::Expression(es) => {
                for (o, e) in out.iter_mut().zip(es) {
                    *o = e.eval(x);
                }
            }
        }
    }

    /// Row-major `n x n` Jacobian, `out[i * n + l] = d b_i / d x_l`.
    pub fn drift_jacobian_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.drift {
            Drift::Constant(_) => {}
            Drift::Affine { slope, .. } => out.copy_from_slice(slope),
            Drift::Linear(c) => (0..n).for_each(|i| out[i * n + i] = c[i]),
            Drift::TimeLinear(segs) => {
                let c = segment_at(segs, t);
                (0..n).for_each(|i| out[i * n + i] = c[i]);
            }
            Drift::Expression(es) => {
                for (i, e) in es.iter().enumerate() {
                    e.accumulate_grad(x, 1.0, &mut out[i * n..(i + 1) * n]);
                }
            }
        }
    }

    /// `out[(i * d + m) * n + l] = d sigma_im / d x_l`
    pub fn vol_jacobian_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        out.iter_mut().for_each(|v| *v = 0.0);
        let diag = |m: &[f64], out: &mut [f64]| {
            for i in 0..n {
                for j in 0..d {
                    out[(i * d + j) * n + i] = m[i * d + j];
                }
            }
        };
        match &self.vol {
            Vol::Constant(_) => {}
            Vol::Affine { slope, .. } => out.copy_from_slice(slope),
            Vol::Linear(m) => diag(m, out),
            Vol::TimeLinear(segs) => diag(segment_at(segs, t), out),
            Vol::Expression(es) => {
                for (k, e) in es.iter().enumerate() {
                    e.accumulate_grad(x, 1.0, &mut out[k * n..(k + 1) * n]);
                }
            }
        }
    }

    pub fn sigma(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let mut buf = vec![0.0; self.n * self.d];
        self.vol_into(t, x, &mut buf);
        DMatrix::from_row_slice(self.n, self.d, &buf)
    }

    pub fn b(&self, t: f64, x: &[f64]) -> DVector<f64> {
        let mut buf = vec![0.0; self.n];
        self.drift_into(t, x, &mut buf);
        DVector::from_vec(buf)
    }

    pub fn evaluate_coefficients(&self, t: f64, x: &[f64]) -> Result<Coefficients> {
        if x.len() != self.n {
            return Err(Error::dims("state vector", self.n, x.len()));
        }
        let b = self.b(t, x);
        let sigma = self.sigma(t, x);
        let r = self.rate(t);
        if !(b.iter().all(|v| v.is_finite()) && sigma.iter().all(|v| v.is_finite()) && r.is_finite()) {
            return Err(Error::non_finite(format!("coefficients at t = {t}")));
        }
        Ok(Coefficients { b, sigma, r })
    }

    fn linear_like_drift(&self) -> bool {
        matches!(self.drift, Drift::Linear(_) | Drift::TimeLinear(_))
    }

    fn linear_like_vol(&self) -> bool {
        matches!(self.vol, Vol::Linear(_) | Vol::TimeLinear(_))
    }

    /// True when `P(x) u(x)` depends on time only, so its pathwise
    /// derivative vanishes identically.
    pub fn pu_state_independent(&self) -> bool {
        (self.linear_like_drift() && self.linear_like_vol())
            || (matches!(self.drift, Drift::Constant(_))
                && matches!(self.vol, Vol::Constant(_))
                && self.rates.iter().all(|e| e.value == 0.0))
    }

    /// True when the projection `P(x)` depends on time only (for states
    /// with non-zero components in the linear families).
    pub fn projection_state_independent(&self) -> bool {
        self.linear_like_vol() || matches!(self.vol, Vol::Constant(_))
    }

    /// A state at which the time-only projection can be evaluated.
    pub(crate) fn reference_state(&self) -> Vec<f64> {
        if self.linear_like_vol() {
            vec![1.0; self.n]
        } else {
            self.x0.clone()
        }
    }

    /// Every time at which some coefficient table switches segment.
    pub(crate) fn segment_starts(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.rates.iter().map(|e| e.t_start).collect();
        if let Drift::TimeLinear(s) = &self.drift {
            out.extend(s.iter().map(|(t, _)| *t));
        }
        if let Vol::TimeLinear(s) = &self.vol {
            out.extend(s.iter().map(|(t, _)| *t));
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    pub fn family_names(&self) -> (&'static str, &'static str) {
        let drift = match self.drift {
            Drift::Constant(_) => "constant",
            Drift::Affine { .. } => "affine",
            Drift::Linear(_) => "linear-in-state",
            Drift::TimeLinear(_) => "time-dependent-linear",
            Drift::Expression(_) => "expression",
        };
        let vol = match self.vol {
            Vol::Constant(_) => "constant",
            Vol::Affine { .. } => "affine",
            Vol::Linear(_) => "linear-in-state",
            Vol::TimeLinear(_) => "time-dependent-linear",
            Vol::Expression(_) => "expression",
        };
        (drift, vol)
    }
}

fn scale_rows(m: &[f64], x: &[f64], n: usize, d: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = m[i * d + j] * x[i];
        }
    }
}
