//! Payoff catalogue and pathwise Malliavin derivatives by the chain rule.
//!
//! Every supported payoff has the form `G = (inner)^+` with `inner` linear
//! in a handful of path functionals, so its derivative is
//! `1_A sum_j w_j^T D_t X_{t_j}` for per-time weight vectors `w_j`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::{PayoffKind, PayoffSection};
use crate::error::{Error, Result};
use crate::model::MarketModel;
use crate::sde::{FirstVariation, PathRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payoff {
    pub kind: PayoffKind,
    pub strike: f64,
    /// zero-based asset indices
    pub assets: Vec<usize>,
    /// the constant of the `constant` kind
    pub value: f64,
}

/// Path functional used as an extra regression feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "feature", content = "asset")]
pub enum PathFeature {
    /// `(1/T) sum_{j<k} X^a_j dt_j`
    RunningAverage(usize),
    /// `max_{j<=k} X^a_j`
    RunningMax(usize),
}

impl PathFeature {
    pub fn initial(&self, x0: &[f64]) -> f64 {
        match *self {
            PathFeature::RunningAverage(_) => 0.0,
            PathFeature::RunningMax(a) => x0[a],
        }
    }

    /// Advances the feature from index `j` to `j + 1`, given `X_j`,
    /// `X_{j+1}` and `dt_j / T`.
    pub fn advance(&self, value: f64, x_prev: &[f64], x_next: &[f64], weight: f64) -> f64 {
        match *self {
            PathFeature::RunningAverage(a) => value + x_prev[a] * weight,
            PathFeature::RunningMax(a) => value.max(x_next[a]),
        }
    }

    /// Feature values at every grid index of a path.
    pub fn along(&self, path: &PathRef<'_>) -> Vec<f64> {
        let m = path.grid.steps();
        let horizon = path.grid.horizon();
        let mut out = Vec::with_capacity(m + 1);
        let mut v = self.initial(path.state(0));
        out.push(v);
        for j in 0..m {
            v = self.advance(v, path.state(j), path.state(j + 1), path.grid.dt(j) / horizon);
            out.push(v);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PayoffDerivative {
    pub base_time_index: usize,
    pub value: DVector<f64>,
    pub indicator_active: bool,
}

/// Chain-rule weights of one path: `D_{t_k} G = 1_A (s_k w_k + sum_{j>k} w_j)^T D_{t_k} X_{t_j}`
/// where `s_k` is 1 except for the Asian average, whose left-point sum
/// excludes `j = k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathWeights {
    pub value: f64,
    pub active: bool,
    /// `(M + 1) x n`, row-major
    pub weights: Vec<f64>,
    pub same_time: bool,
}

impl PathWeights {
    pub fn row(&self, j: usize, n: usize) -> &[f64] {
        &self.weights[j * n..(j + 1) * n]
    }
}

impl Payoff {
    pub fn european_call(asset: usize, strike: f64) -> Self {
        Self {
            kind: PayoffKind::EuropeanCall,
            strike,
            assets: vec![asset],
            value: 0.0,
        }
    }

    pub fn exchange(a: usize, b: usize) -> Self {
        Self {
            kind: PayoffKind::Exchange,
            strike: 0.0,
            assets: vec![a, b],
            value: 0.0,
        }
    }

    pub fn asian_floating_call(a: usize, b: usize, strike: f64) -> Self {
        Self {
            kind: PayoffKind::AsianFloatingCall,
            strike,
            assets: vec![a, b],
            value: 0.0,
        }
    }

    pub fn lookback_floating(a: usize, b: usize, strike: f64) -> Self {
        Self {
            kind: PayoffKind::LookbackFloating,
            strike,
            assets: vec![a, b],
            value: 0.0,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self {
            kind: PayoffKind::Constant,
            strike: 0.0,
            assets: Vec::new(),
            value,
        }
    }

    /// Builds a payoff from its config section (one-based asset indices).
    pub fn from_section(section: &PayoffSection, n: usize) -> Result<Self> {
        let want = match section.kind {
            PayoffKind::EuropeanCall => 1,
            PayoffKind::Constant => 0,
            _ => 2,
        };
        if section.assets.len() != want {
            return Err(Error::dims("payoff.assets", want, section.assets.len()));
        }
        if let Some(&bad) = section.assets.iter().find(|&&a| a == 0 || a > n) {
            return Err(Error::Schema(format!("payoff asset index {bad} outside 1..={n}")));
        }
        let strike = match section.kind {
            PayoffKind::Exchange | PayoffKind::Constant => section.strike.unwrap_or(0.0),
            _ => section
                .strike
                .ok_or_else(|| Error::Schema("payoff.strike is required for this kind".into()))?,
        };
        if !(strike.is_finite() && strike >= 0.0) {
            return Err(Error::Schema("payoff.strike must be finite and >= 0".into()));
        }
        let value = match section.kind {
            PayoffKind::Constant => section
                .value
                .ok_or_else(|| Error::Schema("payoff.value is required for the constant kind".into()))?,
            _ => 0.0,
        };
        if !value.is_finite() {
            return Err(Error::Schema("payoff.value must be finite".into()));
        }
        Ok(Self {
            kind: section.kind,
            strike,
            assets: section.assets.iter().map(|a| a - 1).collect(),
            value,
        })
    }

    pub fn to_section(&self) -> PayoffSection {
        PayoffSection {
            kind: self.kind,
            strike: (self.kind != PayoffKind::Constant).then_some(self.strike),
            assets: self.assets.iter().map(|a| a + 1).collect(),
            value: (self.kind == PayoffKind::Constant).then_some(self.value),
        }
    }

    /// Path feature that makes the conditional expectation Markov in
    /// `(X_t, feature_t)`.
    pub fn path_feature(&self) -> Option<PathFeature> {
        match self.kind {
            PayoffKind::AsianFloatingCall => Some(PathFeature::RunningAverage(self.assets[0])),
            PayoffKind::LookbackFloating => Some(PathFeature::RunningMax(self.assets[0])),
            _ => None,
        }
    }

    fn inner(&self, path: &PathRef<'_>) -> (f64, usize) {
        let m = path.grid.steps();
        let xt = path.terminal();
        match self.kind {
            PayoffKind::EuropeanCall => (xt[self.assets[0]] - self.strike, m),
            PayoffKind::Exchange => (xt[self.assets[0]] - xt[self.assets[1]], m),
            PayoffKind::AsianFloatingCall => {
                let a = self.assets[0];
                let avg = (0..m).map(|j| path.state(j)[a] * path.grid.dt(j)).sum::<f64>() / path.grid.horizon();
                (avg - self.strike * xt[self.assets[1]], m)
            }
            PayoffKind::LookbackFloating => {
                let a = self.assets[0];
                let (mut best, mut tau) = (path.state(0)[a], 0);
                for j in 1..=m {
                    let v = path.state(j)[a];
                    if v > best {
                        best = v;
                        tau = j;
                    }
                }
                (best - self.strike * xt[self.assets[1]], tau)
            }
            PayoffKind::Constant => (self.value, m),
        }
    }

    pub fn evaluate(&self, path: &PathRef<'_>) -> f64 {
        match self.kind {
            PayoffKind::Constant => self.value,
            _ => self.inner(path).0.max(0.0),
        }
    }

    pub fn discounted_payoff(&self, path: &PathRef<'_>, model: &MarketModel) -> f64 {
        model.discount(0.0, path.grid.horizon()) * self.evaluate(path)
    }

    pub fn weights(&self, path: &PathRef<'_>) -> PathWeights {
        let (m, n) = (path.grid.steps(), path.n);
        let mut w = vec![0.0; (m + 1) * n];
        let (inner, tau) = self.inner(path);
        let active = self.kind != PayoffKind::Constant && inner > 0.0;
        let value = match self.kind {
            PayoffKind::Constant => self.value,
            _ => inner.max(0.0),
        };
        if active {
            match self.kind {
                PayoffKind::EuropeanCall => w[m * n + self.assets[0]] = 1.0,
                PayoffKind::Exchange => {
                    w[m * n + self.assets[0]] += 1.0;
                    w[m * n + self.assets[1]] -= 1.0;
                }
                PayoffKind::AsianFloatingCall => {
                    let a = self.assets[0];
                    for j in 0..m {
                        w[j * n + a] = path.grid.dt(j) / path.grid.horizon();
                    }
                    w[m * n + self.assets[1]] -= self.strike;
                }
                PayoffKind::LookbackFloating => {
                    w[tau * n + self.assets[0]] += 1.0;
                    w[m * n + self.assets[1]] -= self.strike;
                }
                PayoffKind::Constant => {}
            }
        }
        PathWeights {
            value,
            active,
            weights: w,
            same_time: self.kind != PayoffKind::AsianFloatingCall,
        }
    }

    pub fn malliavin_derivative(&self, path: &PathRef<'_>, fv: &FirstVariation) -> PayoffDerivative {
        let (m, n, d) = (path.grid.steps(), path.n, path.d);
        let k = fv.base_time_index;
        let pw = self.weights(path);
        let mut value = DVector::zeros(d);
        if pw.active {
            for j in k..=m {
                if j == k && !pw.same_time && k < m {
                    continue;
                }
                let row = pw.row(j, n);
                let mat = fv.at(j);
                for c in 0..d {
                    value[c] += (0..n).map(|i| row[i] * mat[(i, c)]).sum::<f64>();
                }
            }
        }
        PayoffDerivative {
            base_time_index: k,
            value,
            indicator_active: pw.active,
        }
    }
}
