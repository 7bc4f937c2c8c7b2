//! Minimum-volume origin-centered enclosing ellipsoids through the
//! selection dual.
//!
//! The ellipsoid `{x : xᵀMx ≤ 1}` of least volume containing the points
//! `a_i` is recovered from the maximizer of `log det(Aᵀdiag(z)A)` over
//! `z ≥ 0, 1ᵀz = n` as `M = (Aᵀdiag(z*)A)⁻¹`. The dual is solved by the
//! same Newton loop with a one-sided barrier `κ Σ log z_i`.

use serde::Serialize;
use thiserror::Error;

use crate::barrier::{BarrierError, RelaxedPoint, SensorProblem};
use crate::dense::{cholesky, dot, DenseMatrix, LinalgError};
use crate::newton::{newton_solve, Backend, NewtonConfig, NewtonError, SolveTrace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MveeError {
    #[error("points span only {rank} of {dim} dimensions")]
    DegeneratePoints { rank: usize, dim: usize },
    #[error("dual solve did not converge: {0}")]
    NoConvergence(Box<NewtonError>),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// `{x : xᵀMx ≤ 1}` with `M` symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    shape: DenseMatrix,
}

impl Ellipsoid {
    pub fn new(shape: DenseMatrix) -> Result<Self, LinalgError> {
        let shape = shape.symmetrized()?;
        cholesky(&shape)?;
        Ok(Self { shape })
    }

    pub fn shape(&self) -> &DenseMatrix {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.rows()
    }

    /// `xᵀMx`; at most 1 inside the ellipsoid.
    pub fn level(&self, x: &[f64]) -> f64 {
        dot(x, &self.shape.matvec(x).expect("dimension checked by caller"))
    }

    /// Same ellipsoid with `M` multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            shape: self.shape.scaled(factor),
        }
    }

    /// Volume up to the unit-ball constant: `det(M)^{-1/2}`, as a log.
    pub fn log_volume(&self) -> f64 {
        -0.5 * cholesky(&self.shape).expect("shape is positive definite").logdet()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnclosureReport {
    /// `a_iᵀMa_i` per point.
    pub levels: Vec<f64>,
    /// Points with level above `1 + tol`.
    pub violations: Vec<usize>,
    pub max_ratio: f64,
    pub tolerance: f64,
}

impl EnclosureReport {
    pub fn encloses(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn enclosure_check(e: &Ellipsoid, points: &DenseMatrix, tol: f64) -> Result<EnclosureReport, LinalgError> {
    if points.cols() != e.dim() {
        return Err(LinalgError::ShapeMismatch {
            expected: format!("points of dimension {}", e.dim()),
            found: format!("dimension {}", points.cols()),
        });
    }
    let levels: Vec<f64> = (0..points.rows()).map(|r| e.level(points.row(r))).collect();
    let violations = levels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > 1.0 + tol)
        .map(|(i, _)| i)
        .collect();
    let max_ratio = levels.iter().copied().fold(0.0, f64::max);
    Ok(EnclosureReport {
        levels,
        violations,
        max_ratio,
        tolerance: tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MveeConfig {
    pub kappa: f64,
    pub enclosure_tol: f64,
    pub newton: NewtonConfig,
}

impl Default for MveeConfig {
    fn default() -> Self {
        Self {
            kappa: 1e-4,
            enclosure_tol: 5e-2,
            newton: NewtonConfig {
                tolerance: 1e-8,
                max_iterations: 200,
                ..NewtonConfig::with_backend(Backend::ReferenceDense)
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MveeSolution {
    pub ellipsoid: Ellipsoid,
    pub weights: RelaxedPoint,
    pub report: EnclosureReport,
    pub trace: SolveTrace,
}

/// Numerical rank of the rows of `a` by pivoted Gram–Schmidt.
fn row_rank(a: &DenseMatrix) -> usize {
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in 0..a.rows() {
        let mut v = a.row(r).to_vec();
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-10 * scale {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis.len()
}

pub fn mvee_solve(points: &DenseMatrix, cfg: &MveeConfig) -> Result<MveeSolution, MveeError> {
    let rank = row_rank(points);
    if rank < points.cols() {
        return Err(MveeError::DegeneratePoints {
            rank,
            dim: points.cols(),
        });
    }
    let p = SensorProblem::for_mvee(points.clone(), cfg.kappa)?;
    let out = newton_solve(&p, &cfg.newton).map_err(|e| MveeError::NoConvergence(Box::new(e)))?;
    let q = points.weighted_gram(&out.point)?;
    let ellipsoid = Ellipsoid::new(cholesky(&q)?.inverse())?;
    let report = enclosure_check(&ellipsoid, points, cfg.enclosure_tol)?;
    Ok(MveeSolution {
        ellipsoid,
        weights: out.point,
        report,
        trace: out.trace,
    })
}
