//! Log-barrier objective of the relaxed selection problem and its derivatives.
//!
//! The maximized objective is
//!
//! ```text
//! f(z) = log det(Aᵀ diag(z) A) + κ Σ_i (log z_i + log(1 − z_i))
//! ```
//!
//! and every gradient/Hessian here is a derivative of `f` itself:
//!
//! ```text
//! g_i  = a_iᵀ X a_i + κ (1/z_i − 1/(1 − z_i))          X = (Aᵀ diag(z) A)⁻¹
//! H    = −(A X Aᵀ) ∘ (A X Aᵀ) − κ diag(1/z_i² + 1/(1 − z_i)²)
//! ```
//!
//! The approximate path reads `(A X Aᵀ)_ii` off the saddle matrix
//! `E = [0 Aᵀ; A −diag(z)⁻¹]`: with `Y` the lower-right block of `E⁻¹`,
//! `Y = −diag(z) + diag(z) A X Aᵀ diag(z)`, so
//! `(A X Aᵀ)_ii = (Y_ii + z_i) / z_i²`. GaBP variances on `E` estimate `Y_ii`.
//!
//! The MVEE dual reuses all of this with a one-sided barrier `κ Σ log z_i`
//! ([`BarrierKind::NonNegative`]).

use serde::Serialize;
use thiserror::Error;

use crate::dense::{cholesky, cholesky_logdet, hadamard, DenseMatrix, LinalgError};
use crate::gabp::{
    run_gabp, solve_multi_rhs_enforced, EnforceConfig, GabpConfig, GabpError, GabpGraph,
    NetworkMetrics,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BarrierError {
    #[error("z[{index}] = {value} is outside the barrier domain")]
    Domain { index: usize, value: f64 },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("approximate gradient unavailable: {0}")]
    ApproximationUnavailable(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl BarrierError {
    fn shape(expected: usize, found: usize) -> Self {
        LinalgError::ShapeMismatch {
            expected: format!("length {expected}"),
            found: format!("{found}"),
        }
        .into()
    }
}

/// Which inequality constraints the barrier encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierKind {
    /// `0 < z_i < 1` (sensor selection).
    Box,
    /// `z_i > 0` only (MVEE dual).
    NonNegative,
}

impl BarrierKind {
    pub fn contains(self, zi: f64) -> bool {
        match self {
            BarrierKind::Box => zi > 0.0 && zi < 1.0,
            BarrierKind::NonNegative => zi > 0.0 && zi.is_finite(),
        }
    }

    /// Barrier value `Σ log z_i (+ log(1 − z_i))`.
    pub fn value(self, z: &[f64]) -> f64 {
        match self {
            BarrierKind::Box => z.iter().map(|&v| v.ln() + (1.0 - v).ln()).sum(),
            BarrierKind::NonNegative => z.iter().map(|&v| v.ln()).sum(),
        }
    }

    /// First derivative of the per-coordinate barrier.
    pub fn slope(self, zi: f64) -> f64 {
        match self {
            BarrierKind::Box => 1.0 / zi - 1.0 / (1.0 - zi),
            BarrierKind::NonNegative => 1.0 / zi,
        }
    }

    /// Negated second derivative of the per-coordinate barrier (`p_i`).
    pub fn curvature(self, zi: f64) -> f64 {
        match self {
            BarrierKind::Box => 1.0 / (zi * zi) + 1.0 / ((1.0 - zi) * (1.0 - zi)),
            BarrierKind::NonNegative => 1.0 / (zi * zi),
        }
    }

    /// Number of inequality constraints per coordinate.
    pub fn sides(self) -> usize {
        match self {
            BarrierKind::Box => 2,
            BarrierKind::NonNegative => 1,
        }
    }
}

/// Measurement matrix `A` (m × n), budget `k` and barrier weight `κ`.
#[derive(Debug, Clone)]
pub struct SensorProblem {
    a: DenseMatrix,
    budget: usize,
    kappa: f64,
    barrier: BarrierKind,
}

impl SensorProblem {
    /// Barrier weight `κ = ln(1.005)·n/m`. The relaxed bound `2mκ` then
    /// limits the geometric mean of the confidence ellipsoid semi-axes to
    /// within a factor 1.005 of the relaxed optimum.
    pub fn default_kappa(m: usize, n: usize) -> f64 {
        1.005f64.ln() * n as f64 / m as f64
    }

    /// Selection problem; requires `m > k ≥ n ≥ 1`, `κ > 0` and no zero column.
    pub fn new(a: DenseMatrix, budget: usize, kappa: f64) -> Result<Self, BarrierError> {
        let (m, n) = (a.rows(), a.cols());
        if n == 0 || budget < n || budget >= m {
            return Err(BarrierError::InvalidProblem(format!(
                "need m > k >= n >= 1, got m={m}, n={n}, k={budget}"
            )));
        }
        Self::validated(a, budget, kappa, BarrierKind::Box)
    }

    /// MVEE dual: budget `n`, nonnegativity barrier only; requires `m > n`.
    pub fn for_mvee(a: DenseMatrix, kappa: f64) -> Result<Self, BarrierError> {
        let (m, n) = (a.rows(), a.cols());
        if n == 0 || m <= n {
            return Err(BarrierError::InvalidProblem(format!(
                "need m > n >= 1, got m={m}, n={n}"
            )));
        }
        Self::validated(a, n, kappa, BarrierKind::NonNegative)
    }

    fn validated(a: DenseMatrix, budget: usize, kappa: f64, barrier: BarrierKind) -> Result<Self, BarrierError> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(BarrierError::InvalidProblem(format!("kappa must be positive, got {kappa}")));
        }
        if let Some(c) = (0..a.cols()).find(|&c| (0..a.rows()).all(|r| a[(r, c)] == 0.0)) {
            return Err(BarrierError::InvalidProblem(format!("column {c} of A is zero")));
        }
        Ok(Self {
            a,
            budget,
            kappa,
            barrier,
        })
    }

    /// Skips the budget checks; for evaluating the objective on toy inputs.
    #[doc(hidden)]
    pub fn new_unchecked(a: DenseMatrix, budget: usize, kappa: f64, barrier: BarrierKind) -> Self {
        Self {
            a,
            budget,
            kappa,
            barrier,
        }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn n(&self) -> usize {
        self.a.cols()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn barrier(&self) -> BarrierKind {
        self.barrier
    }

    pub fn with_kappa(&self, kappa: f64) -> Result<Self, BarrierError> {
        Self::validated(self.a.clone(), self.budget, kappa, self.barrier)
    }
}

/// Fractional selection vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct RelaxedPoint(Vec<f64>);

impl RelaxedPoint {
    pub fn new(z: Vec<f64>) -> Self {
        Self(z)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Checks every coordinate lies strictly inside the barrier domain.
    pub fn check_interior(&self, kind: BarrierKind) -> Result<(), BarrierError> {
        match self.0.iter().position(|&v| !kind.contains(v)) {
            Some(index) => Err(BarrierError::Domain {
                index,
                value: self.0[index],
            }),
            None => Ok(()),
        }
    }
}

impl std::ops::Deref for RelaxedPoint {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_point(p: &SensorProblem, z: &RelaxedPoint) -> Result<(), BarrierError> {
    if z.len() != p.m() {
        return Err(BarrierError::shape(p.m(), z.len()));
    }
    z.check_interior(p.barrier)
}

/// `f(z)` evaluated through a Cholesky factorization of `Aᵀ diag(z) A`.
pub fn objective(p: &SensorProblem, z: &RelaxedPoint) -> Result<f64, BarrierError> {
    check_point(p, z)?;
    let (_, logdet) = cholesky_logdet(&p.a.weighted_gram(z)?)?;
    Ok(logdet + p.kappa * p.barrier.value(z))
}

/// `log det(Aᵀ diag(z) A)` without the barrier term.
pub fn relaxed_logdet(a: &DenseMatrix, z: &[f64]) -> Result<f64, LinalgError> {
    Ok(cholesky_logdet(&a.weighted_gram(z)?)?.1)
}

/// Exact gradient and the matrix `X = (Aᵀ diag(z) A)⁻¹` for reuse.
pub fn gradient_exact(p: &SensorProblem, z: &RelaxedPoint) -> Result<(Vec<f64>, DenseMatrix), BarrierError> {
    check_point(p, z)?;
    let x = cholesky(&p.a.weighted_gram(z)?)?.inverse();
    let g = gradient_from_inverse(p, z, &x);
    Ok((g, x))
}

/// Gradient given a precomputed (possibly distributedly computed) `X`.
pub fn gradient_from_inverse(p: &SensorProblem, z: &[f64], x: &DenseMatrix) -> Vec<f64> {
    let a = &p.a;
    (0..p.m())
        .map(|i| {
            let ai = a.row(i);
            let xa = x.matvec(ai).expect("X is n x n");
            crate::dense::dot(ai, &xa) + p.kappa * p.barrier.slope(z[i])
        })
        .collect()
}

/// Full Hessian given `X` for the same `z`.
pub fn hessian_exact(p: &SensorProblem, z: &RelaxedPoint, x: &DenseMatrix) -> Result<DenseMatrix, BarrierError> {
    if z.len() != p.m() {
        return Err(BarrierError::shape(p.m(), z.len()));
    }
    let lev = p.a.congruence(x)?;
    let mut h = hadamard(&lev, &lev)?.scaled(-1.0);
    for (i, &zi) in z.iter().enumerate() {
        h[(i, i)] -= p.kappa * p.barrier.curvature(zi);
    }
    Ok(h)
}

/// Saddle matrix `[0 Aᵀ; A −diag(z)⁻¹]` of size `n + m`.
pub fn build_e(p: &SensorProblem, z: &RelaxedPoint) -> Result<DenseMatrix, BarrierError> {
    if z.len() != p.m() {
        return Err(BarrierError::shape(p.m(), z.len()));
    }
    if let Some(index) = z.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(BarrierError::Domain { index, value: z[index] });
    }
    let (m, n) = (p.m(), p.n());
    let mut e = DenseMatrix::zeros(n + m, n + m);
    for i in 0..m {
        for c in 0..n {
            let v = p.a[(i, c)];
            e[(c, n + i)] = v;
            e[(n + i, c)] = v;
        }
        e[(n + i, n + i)] = -1.0 / z[i];
    }
    Ok(e)
}

/// Gradient from (estimates of) the diagonal of the lower-right block of `E⁻¹`.
pub fn gradient_from_lower_block(p: &SensorProblem, z: &[f64], y_diag: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(y_diag)
        .map(|(&zi, &yi)| (yi + zi) / (zi * zi) + p.kappa * p.barrier.slope(zi))
        .collect()
}

/// How the lower-right diagonal of `E⁻¹` was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientPath {
    /// GaBP variance estimates on `E` (the truncated method proper).
    GabpVariances,
    /// GaBP diverged on `E`; `m` enforced solves `E r = e_{n+i}`.
    EnforcedColumns,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ApproxConfig {
    pub gabp: GabpConfig,
    pub enforce: EnforceConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxGradient {
    pub gradient: Vec<f64>,
    pub y_diag: Vec<f64>,
    pub metrics: NetworkMetrics,
    pub path: GradientPath,
    /// Enforcement outer iterations (fallback path only).
    pub outer_iterations: usize,
}

/// Gradient estimate from one GaBP run on `E`, falling back to enforced
/// column solves when GaBP fails there.
pub fn gradient_approx(p: &SensorProblem, z: &RelaxedPoint, cfg: &ApproxConfig) -> Result<ApproxGradient, BarrierError> {
    check_point(p, z)?;
    let (m, n) = (p.m(), p.n());
    let e = build_e(p, z)?;
    let graph = GabpGraph::from_dense(&e, &vec![0.0; n + m]).map_err(unavailable)?;
    let first = run_gabp(&graph, &cfg.gabp);
    let attempt_cost = match &first {
        Ok(res) if res.variances[n..].iter().all(|v| v.is_finite()) => {
            let y_diag = res.variances[n..].to_vec();
            return Ok(ApproxGradient {
                gradient: gradient_from_lower_block(p, z, &y_diag),
                y_diag,
                metrics: res.metrics(),
                path: GradientPath::GabpVariances,
                outer_iterations: 0,
            });
        }
        Ok(res) => res.metrics(),
        Err(GabpError::DivergedOrMaxRounds { partial, .. }) => partial.metrics(),
        Err(_) => NetworkMetrics::default(),
    };

    let rhs: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut e_i = vec![0.0; n + m];
            e_i[n + i] = 1.0;
            e_i
        })
        .collect();
    let (cols, outer) = solve_multi_rhs_enforced(&e, &rhs, &cfg.enforce).map_err(unavailable)?;
    let y_diag: Vec<f64> = cols.columns.iter().enumerate().map(|(i, c)| c[n + i]).collect();
    Ok(ApproxGradient {
        gradient: gradient_from_lower_block(p, z, &y_diag),
        y_diag,
        metrics: attempt_cost.then(cols.metrics),
        path: GradientPath::EnforcedColumns,
        outer_iterations: outer,
    })
}

fn unavailable(e: GabpError) -> BarrierError {
    BarrierError::ApproximationUnavailable(e.to_string())
}

/// Diagonal Hessian model `−g̃_i² − κ p_i` built from the approximate gradient.
pub fn hessian_diag_approx(g: &[f64], z: &RelaxedPoint, kappa: f64, kind: BarrierKind) -> Result<Vec<f64>, BarrierError> {
    if g.len() != z.len() {
        return Err(BarrierError::shape(z.len(), g.len()));
    }
    z.check_interior(kind)?;
    Ok(g.iter()
        .zip(z.iter())
        .map(|(&gi, &zi)| -gi * gi - kappa * kind.curvature(zi))
        .collect())
}
