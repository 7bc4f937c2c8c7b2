//! Equality-constrained Newton method for the barrier objective.
//!
//! Each iteration computes a gradient `g` and a (possibly truncated) Hessian
//! `H`, the projected Newton step
//!
//! ```text
//! Δz = −H⁻¹g + (1ᵀH⁻¹g / 1ᵀH⁻¹1) · H⁻¹1        (so 1ᵀΔz = 0)
//! ```
//!
//! and the decrement `λ² = gᵀΔz`; it stops once `λ²/2 ≤ ε`, otherwise it
//! backtracks along `Δz` and updates `z`. Three backends share the loop:
//!
//! * [`Backend::ReferenceDense`]: centralized dense linear algebra.
//! * [`Backend::Exact`]: `X = Q⁻¹` through `n` enforced GaBP solves
//!   `Q r_i = e_i`, the full Hessian, and two enforced GaBP solves for `Δz`.
//! * [`Backend::Truncated`]: gradient from GaBP variances on the saddle
//!   matrix, diagonal Hessian `−g̃∘g̃ − κp`, and an `O(m)` direction.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::barrier::{
    gradient_approx, gradient_exact, gradient_from_inverse, hessian_diag_approx, hessian_exact,
    objective, ApproxConfig, BarrierError, BarrierKind, GradientPath, RelaxedPoint, SensorProblem,
};
use crate::dense::{cholesky, dot, norm_inf, solve_lu, DenseMatrix, LinalgError};
use crate::gabp::{enforced_solve, solve_multi_rhs_enforced, EnforceConfig, GabpConfig, GabpError, NetworkMetrics};

/// Smallest step the line search will accept.
pub const MIN_STEP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NewtonError {
    #[error("budget k={k} infeasible for m={m} (need 1 <= k < m)")]
    InfeasibleBudget { m: usize, k: usize },
    #[error("Hessian is singular")]
    SingularHessian,
    #[error("degenerate projection: 1ᵀH⁻¹1 = {0:e}")]
    DegenerateProjection(f64),
    #[error("zero Hessian diagonal at {0}")]
    ZeroDiagonal(usize),
    #[error("not an ascent direction (gᵀΔz = {0:e})")]
    NotAscentDirection(f64),
    #[error("line search stalled")]
    LineSearchStall,
    #[error("no convergence within {} Newton iterations", .0.trace.iterations.len())]
    MaxIterations(Box<NewtonOutcome>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Gabp(#[from] GabpError),
}

impl From<LinalgError> for NewtonError {
    fn from(e: LinalgError) -> Self {
        NewtonError::Barrier(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    ReferenceDense,
    Exact,
    Truncated,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::ReferenceDense, Backend::Exact, Backend::Truncated];

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::ReferenceDense => "reference-dense",
            Backend::Exact => "exact",
            Backend::Truncated => "truncated",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reference-dense" | "reference" | "dense" => Ok(Backend::ReferenceDense),
            "exact" => Ok(Backend::Exact),
            "truncated" => Ok(Backend::Truncated),
            other => Err(format!(
                "unknown backend {other:?} (expected reference-dense, exact or truncated)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Stop once `λ²/2 ≤ tolerance`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Armijo fraction, in `(0, 0.5)`.
    pub alpha: f64,
    /// Backtracking factor, in `(0, 1)`.
    pub beta: f64,
    /// Fraction of the distance to the domain boundary a step may cover.
    pub boundary_fraction: f64,
    pub backend: Backend,
    pub gabp: GabpConfig,
    pub enforce: EnforceConfig,
    /// Also compute the exact gradient each iteration and record the error
    /// of the backend's gradient against it.
    pub gradient_oracle: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            max_iterations: 50,
            alpha: 0.01,
            beta: 0.5,
            boundary_fraction: 0.99,
            backend: Backend::ReferenceDense,
            gabp: GabpConfig::default(),
            enforce: EnforceConfig::default(),
            gradient_oracle: false,
        }
    }
}

impl NewtonConfig {
    pub fn with_backend(backend: Backend) -> Self {
        Self {
            backend,
            ..Self::default()
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    /// Sets the GaBP message threshold for every GaBP run of the solve.
    pub fn with_gabp_threshold(mut self, threshold: f64) -> Self {
        self.gabp.threshold = threshold;
        self.enforce.gabp.threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<(), NewtonError> {
        let bad = |msg: &str| Err(NewtonError::InvalidConfig(msg.into()));
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return bad("alpha must lie in (0, 0.5)");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.boundary_fraction > 0.0 && self.boundary_fraction < 1.0) {
            return bad("boundary fraction must lie in (0, 1)");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be nonzero");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    Newton,
    /// Fallback `g − mean(g)·1` after the truncated direction failed.
    ProjectedGradient,
}

/// One accepted Newton update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Objective after the update.
    pub objective: f64,
    /// `λ² = gᵀΔz` of the direction taken.
    pub decrement: f64,
    pub step: f64,
    pub direction: DirectionKind,
    /// `‖g_backend − g_exact‖∞ / ‖g_exact‖∞` when the oracle is enabled.
    pub gradient_error: Option<f64>,
    pub gradient_path: Option<GradientPath>,
    pub rounds: u64,
    pub messages: u64,
    pub payload: u64,
    pub outer_iterations: usize,
    /// Floating point operations of the centralized kernels, by formula,
    /// plus the measured count for the diagonal direction.
    pub local_ops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    /// The truncated model produced no usable ascent direction.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveTrace {
    pub backend: Backend,
    pub iterations: Vec<IterationRecord>,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Decrement at the final check.
    pub final_decrement: f64,
    /// Totals including the final convergence check.
    pub metrics: NetworkMetrics,
    pub outer_iterations: usize,
    pub stop: StopReason,
    pub notes: Vec<String>,
}

impl SolveTrace {
    pub fn newton_iterations(&self) -> usize {
        self.iterations.len()
    }

    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub point: RelaxedPoint,
    pub trace: SolveTrace,
}

/// Uniform starting point `z_i = k/m`.
pub fn feasible_init(m: usize, k: usize) -> Result<RelaxedPoint, NewtonError> {
    if k < 1 || k >= m {
        return Err(NewtonError::InfeasibleBudget { m, k });
    }
    Ok(RelaxedPoint::new(vec![k as f64 / m as f64; m]))
}

/// How the two Newton systems `H u = g`, `H v = 1` are solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DirectionSolver {
    Dense,
    GabpEnforced(EnforceConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub dz: Vec<f64>,
    pub metrics: NetworkMetrics,
    pub outer_iterations: usize,
}

fn project(u: &[f64], v: &[f64]) -> Result<Vec<f64>, NewtonError> {
    let su: f64 = u.iter().sum();
    let sv: f64 = v.iter().sum();
    if sv.abs() < 1e-14 || !sv.is_finite() {
        return Err(NewtonError::DegenerateProjection(sv));
    }
    let ratio = su / sv;
    Ok(u.iter().zip(v).map(|(ui, vi)| -ui + ratio * vi).collect())
}

fn dense_solve_pair(h: &DenseMatrix, g: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NewtonError> {
    let ones = vec![1.0; g.len()];
    let neg = h.scaled(-1.0);
    match cholesky(&neg) {
        Ok(f) => {
            let u = f.solve(g)?.into_iter().map(|v| -v).collect();
            let v = f.solve(&ones)?.into_iter().map(|v| -v).collect();
            Ok((u, v))
        }
        Err(LinalgError::NotPositiveDefinite { .. }) => {
            let sym = h.symmetrized()?;
            let u = solve_lu(&sym, g).map_err(|_| NewtonError::SingularHessian)?;
            let v = solve_lu(&sym, &ones).map_err(|_| NewtonError::SingularHessian)?;
            Ok((u, v))
        }
        Err(e) => Err(e.into()),
    }
}

/// Newton direction for a full Hessian.
pub fn search_direction_full(h: &DenseMatrix, g: &[f64], solver: &DirectionSolver) -> Result<Direction, NewtonError> {
    if !h.is_square() || h.rows() != g.len() {
        return Err(LinalgError::ShapeMismatch {
            expected: format!("{0}x{0} Hessian", g.len()),
            found: format!("{}x{}", h.rows(), h.cols()),
        }
        .into());
    }
    match solver {
        DirectionSolver::Dense => {
            let (u, v) = dense_solve_pair(h, g)?;
            Ok(Direction {
                dz: project(&u, &v)?,
                metrics: NetworkMetrics::default(),
                outer_iterations: 0,
            })
        }
        DirectionSolver::GabpEnforced(cfg) => {
            let ones = vec![1.0; g.len()];
            let (u, v) = rayon::join(|| enforced_solve(h, g, cfg), || enforced_solve(h, &ones, cfg));
            let (u, v) = (u?, v?);
            Ok(Direction {
                dz: project(&u.x, &v.x)?,
                metrics: u.metrics.alongside(v.metrics),
                outer_iterations: u.outer_iterations.max(v.outer_iterations),
            })
        }
    }
}

/// Newton direction for a diagonal Hessian, in `O(m)`.
pub fn search_direction_diag(d: &[f64], g: &[f64]) -> Result<Vec<f64>, NewtonError> {
    search_direction_diag_counted(d, g).map(|(dz, _)| dz)
}

/// [`search_direction_diag`] that also returns the number of floating point
/// operations it performed.
pub fn search_direction_diag_counted(d: &[f64], g: &[f64]) -> Result<(Vec<f64>, u64), NewtonError> {
    if d.len() != g.len() {
        return Err(LinalgError::ShapeMismatch {
            expected: format!("length {}", g.len()),
            found: format!("{}", d.len()),
        }
        .into());
    }
    let mut ops = 0u64;
    let mut u = Vec::with_capacity(d.len());
    let mut v = Vec::with_capacity(d.len());
    let (mut su, mut sv) = (0.0, 0.0);
    for (i, (&di, &gi)) in d.iter().zip(g).enumerate() {
        if di == 0.0 {
            return Err(NewtonError::ZeroDiagonal(i));
        }
        let vi = 1.0 / di;
        let ui = gi * vi;
        su += ui;
        sv += vi;
        u.push(ui);
        v.push(vi);
        ops += 4;
    }
    if sv.abs() < 1e-14 {
        return Err(NewtonError::DegenerateProjection(sv));
    }
    let ratio = su / sv;
    ops += 1;
    let dz = u
        .iter()
        .zip(&v)
        .map(|(ui, vi)| {
            ops += 2;
            -ui + ratio * vi
        })
        .collect();
    Ok((dz, ops))
}

/// Largest `t` keeping `z + tΔz` inside the barrier domain (may be infinite).
fn domain_step_limit(z: &[f64], dz: &[f64], kind: BarrierKind) -> f64 {
    let mut limit = f64::INFINITY;
    for (&zi, &di) in z.iter().zip(dz) {
        if di < 0.0 {
            limit = limit.min(-zi / di);
        } else if di > 0.0 && kind == BarrierKind::Box {
            limit = limit.min((1.0 - zi) / di);
        }
    }
    limit
}

/// Backtracking (Armijo) line search for maximization. `f` returns `None`
/// outside its domain.
pub fn backtrack(
    f: impl Fn(&[f64]) -> Option<f64>,
    z: &[f64],
    dz: &[f64],
    slope: f64,
    f0: f64,
    t_start: f64,
    cfg: &NewtonConfig,
) -> Result<f64, NewtonError> {
    if !(slope > 0.0) {
        return Err(NewtonError::NotAscentDirection(slope));
    }
    let mut t = t_start;
    let mut trial = vec![0.0; z.len()];
    while t >= MIN_STEP {
        for ((out, zi), di) in trial.iter_mut().zip(z).zip(dz) {
            *out = zi + t * di;
        }
        if let Some(ft) = f(&trial) {
            if ft >= f0 + cfg.alpha * t * slope {
                return Ok(t);
            }
        }
        t *= cfg.beta;
    }
    Err(NewtonError::LineSearchStall)
}

fn objective_or_none(p: &SensorProblem, z: &[f64]) -> Option<f64> {
    objective(p, &RelaxedPoint::new(z.to_vec())).ok()
}

/// Step size along `Δz` by backtracking from `min(1, safety · t_boundary)`.
pub fn line_search(
    p: &SensorProblem,
    z: &RelaxedPoint,
    dz: &[f64],
    g: &[f64],
    cfg: &NewtonConfig,
) -> Result<f64, NewtonError> {
    let f0 = objective(p, z)?;
    line_search_from(p, z, dz, dot(g, dz), f0, cfg)
}

fn line_search_from(
    p: &SensorProblem,
    z: &[f64],
    dz: &[f64],
    slope: f64,
    f0: f64,
    cfg: &NewtonConfig,
) -> Result<f64, NewtonError> {
    if dz.iter().all(|&d| d == 0.0) {
        return Err(NewtonError::NotAscentDirection(0.0));
    }
    let t_max = cfg.boundary_fraction * domain_step_limit(z, dz, p.barrier());
    backtrack(|x| objective_or_none(p, x), z, dz, slope, f0, t_max.min(1.0), cfg)
}

/// Gradient and direction produced by one backend evaluation.
struct Step {
    gradient: Vec<f64>,
    dz: Vec<f64>,
    metrics: NetworkMetrics,
    outer_iterations: usize,
    path: Option<GradientPath>,
    local_ops: u64,
}

fn dense_step(p: &SensorProblem, z: &RelaxedPoint) -> Result<Step, NewtonError> {
    let (m, n) = (p.m() as u64, p.n() as u64);
    let (g, x) = gradient_exact(p, z)?;
    let h = hessian_exact(p, z, &x)?;
    let dir = search_direction_full(&h, &g, &DirectionSolver::Dense)?;
    Ok(Step {
        gradient: g,
        dz: dir.dz,
        metrics: NetworkMetrics::default(),
        outer_iterations: 0,
        path: None,
        // Gram, Cholesky + inverse, leverages, Hessian, Cholesky of H + two solves
        local_ops: m * n * n + n * n * n + 2 * m * n * n + m * m * n + m * m + m * m * m / 3 + 4 * m * m,
    })
}

fn exact_step(p: &SensorProblem, z: &RelaxedPoint, cfg: &NewtonConfig) -> Result<Step, NewtonError> {
    let (m, n) = (p.m(), p.n());
    let q = p.matrix().weighted_gram(z)?;
    let units: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect();
    let (cols, x_outer) = solve_multi_rhs_enforced(&q, &units, &cfg.enforce)?;
    let mut x = DenseMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            x[(r, c)] = 0.5 * (cols.columns[c][r] + cols.columns[r][c]);
        }
    }
    let g = gradient_from_inverse(p, z, &x);
    let h = hessian_exact(p, z, &x)?;
    let dir = search_direction_full(&h, &g, &DirectionSolver::GabpEnforced(cfg.enforce))?;
    let (m, n) = (m as u64, n as u64);
    Ok(Step {
        gradient: g,
        dz: dir.dz,
        metrics: cols.metrics.then(dir.metrics),
        outer_iterations: x_outer.max(dir.outer_iterations),
        path: None,
        local_ops: m * n * n + 2 * m * n * n + m * m * n + m * m,
    })
}

fn truncated_step(p: &SensorProblem, z: &RelaxedPoint, cfg: &NewtonConfig) -> Result<Step, NewtonError> {
    let approx_cfg = ApproxConfig {
        gabp: cfg.gabp,
        enforce: cfg.enforce,
    };
    let approx = gradient_approx(p, z, &approx_cfg)?;
    let d = hessian_diag_approx(&approx.gradient, z, p.kappa(), p.barrier())?;
    let (dz, ops) = search_direction_diag_counted(&d, &approx.gradient)?;
    Ok(Step {
        gradient: approx.gradient,
        dz,
        metrics: approx.metrics,
        outer_iterations: approx.outer_iterations,
        path: Some(approx.path),
        local_ops: 6 * p.m() as u64 + ops,
    })
}

/// Whether the step raises the objective by at least a tenth of the tolerance.
fn gains(p: &SensorProblem, z: &[f64], dz: &[f64], t: f64, f0: f64, cfg: &NewtonConfig) -> bool {
    let next: Vec<f64> = z.iter().zip(dz).map(|(zi, di)| zi + t * di).collect();
    objective_or_none(p, &next).is_some_and(|f1| f1 - f0 >= 0.1 * cfg.tolerance)
}

fn relative_error(a: &[f64], reference: &[f64]) -> f64 {
    let num = a.iter().zip(reference).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    num / norm_inf(reference).max(f64::MIN_POSITIVE)
}

/// Solves the relaxed problem from the uniform starting point.
pub fn newton_solve(p: &SensorProblem, cfg: &NewtonConfig) -> Result<NewtonOutcome, NewtonError> {
    let start = feasible_init(p.m(), p.budget())?;
    newton_solve_from(p, start, cfg)
}

/// Solves the relaxed problem from a given feasible interior point.
pub fn newton_solve_from(p: &SensorProblem, start: RelaxedPoint, cfg: &NewtonConfig) -> Result<NewtonOutcome, NewtonError> {
    cfg.validate()?;
    let mut z = start;
    let mut f = objective(p, &z)?;
    let mut trace = SolveTrace {
        backend: cfg.backend,
        iterations: Vec::new(),
        initial_objective: f,
        final_objective: f,
        final_decrement: f64::NAN,
        metrics: NetworkMetrics::default(),
        outer_iterations: 0,
        stop: StopReason::MaxIterations,
        notes: Vec::new(),
    };
    if cfg.backend == Backend::Truncated {
        trace
            .notes
            .push("diagonal Hessian squares the full approximate gradient, barrier term included".into());
    }

    let mut iteration = 0;
    loop {
        let step = match cfg.backend {
            Backend::ReferenceDense => dense_step(p, &z)?,
            Backend::Exact => exact_step(p, &z, cfg)?,
            Backend::Truncated => truncated_step(p, &z, cfg)?,
        };
        trace.metrics = trace.metrics.then(step.metrics);
        trace.outer_iterations = trace.outer_iterations.max(step.outer_iterations);
        let decrement = dot(&step.gradient, &step.dz);
        trace.final_decrement = decrement;
        if decrement / 2.0 <= cfg.tolerance && decrement >= 0.0 {
            trace.stop = StopReason::Converged;
            break;
        }
        if iteration == cfg.max_iterations {
            trace.stop = StopReason::MaxIterations;
            break;
        }
        let gradient_error = if cfg.gradient_oracle {
            let (g_true, _) = gradient_exact(p, &z)?;
            Some(relative_error(&step.gradient, &g_true))
        } else {
            None
        };

        let mut direction = DirectionKind::Newton;
        let mut dz = step.dz;
        let mut taken_decrement = decrement;
        let newton_step = line_search_from(p, &z, &dz, decrement, f, cfg).and_then(|t| {
            // the truncated model can accept steps that make no real progress
            if cfg.backend == Backend::Truncated && !gains(p, &z, &dz, t, f, cfg) {
                Err(NewtonError::LineSearchStall)
            } else {
                Ok(t)
            }
        });
        let t = match newton_step {
            Ok(t) => t,
            Err(NewtonError::NotAscentDirection(_) | NewtonError::LineSearchStall)
                if cfg.backend == Backend::Truncated =>
            {
                let mean = step.gradient.iter().sum::<f64>() / step.gradient.len() as f64;
                let pg: Vec<f64> = step.gradient.iter().map(|gi| gi - mean).collect();
                let slope = dot(&step.gradient, &pg);
                match line_search_from(p, &z, &pg, slope, f, cfg) {
                    Ok(t) if gains(p, &z, &pg, t, f, cfg) => {
                        direction = DirectionKind::ProjectedGradient;
                        dz = pg;
                        taken_decrement = slope;
                        t
                    }
                    _ => {
                        trace.stop = StopReason::Stalled;
                        break;
                    }
                }
            }
            Err(e) => return Err(e),
        };

        let next: Vec<f64> = z.iter().zip(&dz).map(|(zi, di)| zi + t * di).collect();
        z = RelaxedPoint::new(next);
        f = objective(p, &z)?;
        iteration += 1;
        trace.iterations.push(IterationRecord {
            iteration,
            objective: f,
            decrement: taken_decrement,
            step: t,
            direction,
            gradient_error,
            gradient_path: step.path,
            rounds: step.metrics.rounds,
            messages: step.metrics.messages,
            payload: step.metrics.payload,
            outer_iterations: step.outer_iterations,
            local_ops: step.local_ops,
        });
    }
    trace.final_objective = f;
    let outcome = NewtonOutcome { point: z, trace };
    if outcome.trace.stop == StopReason::MaxIterations {
        return Err(NewtonError::MaxIterations(Box::new(outcome)));
    }
    Ok(outcome)
}
