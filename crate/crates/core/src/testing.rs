//! Shared model fixtures for unit tests.

pub(crate) const GBM: &str = r#"
[model]
n = 1
d = 1
horizon = 1.0
x0 = [100.0]

[rate]
table = [{ t_start = 0.0, value = 0.03 }]

[drift]
family = "linear-in-state"
params = { coeffs = [0.08] }

[vol]
family = "linear-in-state"
params = { matrix = [[0.2]] }
"#;

pub(crate) const EMBEDDING: &str = r#"
[model]
n = 2
d = 2
horizon = 1.0
x0 = [100.0, 1.0]

[rate]
table = [{ t_start = 0.0, value = 0.03 }]

[drift]
family = "linear-in-state"
params = { coeffs = [0.08, 0.03] }

[vol]
family = "linear-in-state"
params = { matrix = [[0.2, 0.0], [0.0, 0.0]] }
"#;

/// Linear two-asset model with `sigma_2 = 2 sigma_1` and a compatible drift.
pub(crate) const DELTA_ZERO: &str = r#"
[model]
n = 2
d = 2
horizon = 1.0
x0 = [100.0, 80.0]

[rate]
table = [{ t_start = 0.0, value = 0.02 }, { t_start = 0.5, value = 0.04 }]

[drift]
family = "time-dependent-linear"
params = { segments = [{ t_start = 0.0, coeffs = [0.06, 0.10] }, { t_start = 0.5, coeffs = [0.07, 0.10] }] }

[vol]
family = "linear-in-state"
params = { matrix = [[0.2, 0.1], [0.4, 0.2]] }
"#;

/// `b - r x = (0, 1)` is orthogonal to `range(sigma) = span(e_1)`.
pub(crate) const ORTHOGONAL: &str = r#"
[model]
n = 2
d = 1
horizon = 1.0
x0 = [1.0, 1.0]

[rate]
table = [{ t_start = 0.0, value = 0.0 }]

[drift]
family = "constant"
params = { values = [0.0, 1.0] }

[vol]
family = "constant"
params = { matrix = [[1.0], [0.0]] }
"#;

/// Smooth, full-rank, state-dependent coefficients.
pub(crate) const SMOOTH: &str = r#"
[model]
n = 2
d = 2
horizon = 1.0
x0 = [1.0, 0.5]

[rate]
table = [{ t_start = 0.0, value = 0.01 }]

[drift]
family = "expression"
params = { exprs = ["0.05*x1 + 0.1*tanh(x2)", "0.02 - 0.3*x2 + 0.2*x1"] }

[vol]
family = "expression"
params = { exprs = [["0.2 + 0.1*tanh(x1)", "0.05*tanh(x2)"], ["0.03", "0.25 + 0.05*tanh(x1 - x2)"]] }
"#;
