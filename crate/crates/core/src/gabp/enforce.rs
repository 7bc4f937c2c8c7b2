//! Convergence enforcement for GaBP by diagonal loading.
//!
//! The system `J x = b` is solved through the loaded matrix `J + ΓI`, which is
//! made strictly diagonally dominant so GaBP provably converges on it. The
//! outer loop then removes the bias:
//!
//! * [`OuterScheme::Richardson`] iterates `x ← (J + ΓI)⁻¹ (b + Γx)`, i.e.
//!   `x ← x + (J + ΓI)⁻¹ (b − Jx)`. Its fixed point solves `J x = b`, but the
//!   contraction factor is `Γ / (λ + Γ)` per eigenvalue `λ` of `J`, so it only
//!   converges for positive definite `J` and crawls when `λ_min ≪ Γ`.
//! * [`OuterScheme::Krylov`] (default) runs flexible GMRES on `J x = b` with
//!   the loaded GaBP solve as the preconditioner. It searches the same Krylov
//!   space the Richardson iterates live in, and also handles indefinite `J`.
//!
//! Systems whose diagonal is entirely negative (Newton Hessians of a concave
//! objective) are negated first so the loaded matrix stays close to `J`.

use crate::dense::{dot, norm2, norm_inf, DenseMatrix, LinalgError};

use super::{run_gabp, GabpConfig, GabpError, GabpGraph, NetworkMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterScheme {
    Richardson,
    Krylov,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnforceConfig {
    pub gabp: GabpConfig,
    /// Richardson: bound on `‖x⁺ − x‖∞`. Krylov: bound on `‖Jx − b‖∞ / (1 + ‖b‖∞)`.
    pub outer_tol: f64,
    pub max_outer: usize,
    pub scheme: OuterScheme,
    /// Added on top of the smallest load that gives diagonal dominance.
    pub loading_margin: f64,
    /// Krylov basis size before a restart.
    pub restart: usize,
}

impl Default for EnforceConfig {
    fn default() -> Self {
        Self {
            gabp: GabpConfig::default(),
            outer_tol: 1e-9,
            max_outer: 500,
            scheme: OuterScheme::Krylov,
            loading_margin: 1e-6,
            restart: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnforcedSolution {
    pub x: Vec<f64>,
    pub metrics: NetworkMetrics,
    /// Number of inner GaBP solves.
    pub outer_iterations: usize,
    /// Diagonal load Γ (0 when `J` was already dominant).
    pub loading: f64,
    /// Whether the system was negated before loading.
    pub negated: bool,
}

/// Smallest Γ ≥ 0 such that `J + ΓI` is strictly diagonally dominant with a
/// positive diagonal, or `None` when `J` already is.
pub fn dominance_load(j: &DenseMatrix, margin: f64) -> Option<f64> {
    let n = j.rows();
    let worst = (0..n)
        .map(|i| {
            let off: f64 = j
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i)
                .map(|(_, v)| v.abs())
                .sum();
            off - j[(i, i)]
        })
        .fold(f64::NEG_INFINITY, f64::max);
    if worst < 0.0 {
        None
    } else {
        Some(worst + margin)
    }
}

/// Solves `J x = b` for symmetric nonsingular `J` with GaBP as the only
/// linear solver, enforcing convergence by diagonal loading.
pub fn enforced_solve(
    j: &DenseMatrix,
    b: &[f64],
    cfg: &EnforceConfig,
) -> Result<EnforcedSolution, GabpError> {
    let j = j.symmetrized()?;
    let n = j.rows();
    if b.len() != n {
        return Err(LinalgError::ShapeMismatch {
            expected: format!("rhs of length {n}"),
            found: format!("{}", b.len()),
        }
        .into());
    }
    if !(cfg.outer_tol > 0.0) || cfg.max_outer == 0 {
        return Err(GabpError::InvalidConfig(
            "outer_tol must be positive and max_outer nonzero".into(),
        ));
    }
    let negated = n > 0 && (0..n).all(|i| j[(i, i)] < 0.0);
    let (j, b) = if negated {
        (j.scaled(-1.0), b.iter().map(|v| -v).collect::<Vec<_>>())
    } else {
        (j, b.to_vec())
    };

    let Some(loading) = dominance_load(&j, cfg.loading_margin) else {
        let graph = GabpGraph::from_dense(&j, &b)?;
        let res = run_gabp(&graph, &cfg.gabp).map_err(|e| GabpError::InnerFailure(Box::new(e)))?;
        return Ok(EnforcedSolution {
            metrics: res.metrics(),
            x: res.means,
            outer_iterations: 1,
            loading: 0.0,
            negated,
        });
    };

    let loaded = j.shifted_diagonal(loading);
    let mut inner = LoadedSolver {
        graph: GabpGraph::from_dense(&loaded, &b)?,
        cfg: cfg.gabp,
        metrics: NetworkMetrics::default(),
        calls: 0,
    };
    let x = match cfg.scheme {
        OuterScheme::Richardson => richardson(&j, &b, loading, &mut inner, cfg)?,
        OuterScheme::Krylov => flexible_gmres(&j, &b, &mut inner, cfg)?,
    };
    Ok(EnforcedSolution {
        x,
        metrics: inner.metrics,
        outer_iterations: inner.calls,
        loading,
        negated,
    })
}

struct LoadedSolver {
    graph: GabpGraph,
    cfg: GabpConfig,
    metrics: NetworkMetrics,
    calls: usize,
}

impl LoadedSolver {
    fn solve(&mut self, rhs: &[f64]) -> Result<Vec<f64>, GabpError> {
        self.graph.set_potential(rhs);
        let res = run_gabp(&self.graph, &self.cfg).map_err(|e| GabpError::InnerFailure(Box::new(e)))?;
        self.metrics = self.metrics.then(res.metrics());
        self.calls += 1;
        Ok(res.means)
    }

    /// One neighbour exchange computing `J v`.
    fn matvec(&mut self, j: &DenseMatrix, v: &[f64]) -> Vec<f64> {
        let cost = self.graph.round_cost();
        self.metrics = self.metrics.then(NetworkMetrics {
            payload: cost.messages,
            ..cost
        });
        j.matvec(v).expect("dimensions checked")
    }
}

fn richardson(
    j: &DenseMatrix,
    b: &[f64],
    loading: f64,
    inner: &mut LoadedSolver,
    cfg: &EnforceConfig,
) -> Result<Vec<f64>, GabpError> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    loop {
        for i in 0..n {
            rhs[i] = b[i] + loading * x[i];
        }
        let next = inner.solve(&rhs)?;
        let step = next.iter().zip(&x).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        x = next;
        if step <= cfg.outer_tol {
            return Ok(x);
        }
        if inner.calls >= cfg.max_outer || !step.is_finite() || step > 1e12 {
            let r = residual(j, &x, b);
            return Err(GabpError::MaxOuterExceeded {
                outer: inner.calls,
                residual: norm_inf(&r),
            });
        }
    }
}

fn residual(j: &DenseMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let jx = j.matvec(x).expect("dimensions checked");
    b.iter().zip(&jx).map(|(bi, ai)| bi - ai).collect()
}

fn flexible_gmres(
    j: &DenseMatrix,
    b: &[f64],
    inner: &mut LoadedSolver,
    cfg: &EnforceConfig,
) -> Result<Vec<f64>, GabpError> {
    let n = b.len();
    let tol = cfg.outer_tol * (1.0 + norm_inf(b));
    let restart = cfg.restart.max(1).min(n.max(1));
    let mut x = vec![0.0; n];
    loop {
        let r = residual(j, &x, b);
        let res_inf = norm_inf(&r);
        if res_inf <= tol {
            return Ok(x);
        }
        if inner.calls >= cfg.max_outer {
            return Err(GabpError::MaxOuterExceeded {
                outer: inner.calls,
                residual: res_inf,
            });
        }
        let beta = norm2(&r);
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut precond: Vec<Vec<f64>> = Vec::with_capacity(restart);
        // Hessenberg columns, already rotated to upper triangular form
        let mut hess: Vec<Vec<f64>> = Vec::with_capacity(restart);
        let mut cs: Vec<f64> = Vec::with_capacity(restart);
        let mut sn: Vec<f64> = Vec::with_capacity(restart);
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;

        for col in 0..restart {
            if inner.calls >= cfg.max_outer {
                break;
            }
            let z = inner.solve(&basis[col])?;
            let mut w = inner.matvec(j, &z);
            let mut h = vec![0.0; col + 2];
            for (i, v) in basis.iter().enumerate() {
                let hij = dot(&w, v);
                h[i] = hij;
                for (wk, vk) in w.iter_mut().zip(v) {
                    *wk -= hij * vk;
                }
            }
            let hn = norm2(&w);
            h[col + 1] = hn;
            for i in 0..col {
                let t = cs[i] * h[i] + sn[i] * h[i + 1];
                h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1];
                h[i] = t;
            }
            let denom = h[col].hypot(h[col + 1]);
            let (c, s) = if denom == 0.0 { (1.0, 0.0) } else { (h[col] / denom, h[col + 1] / denom) };
            h[col] = denom;
            h[col + 1] = 0.0;
            cs.push(c);
            sn.push(s);
            g[col + 1] = -s * g[col];
            g[col] *= c;
            hess.push(h);
            precond.push(z);
            if g[col + 1].abs() <= 0.5 * tol || hn <= 1e-14 * beta {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }

        let k = precond.len();
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for c in (i + 1)..k {
                s -= hess[c][i] * y[c];
            }
            y[i] = if hess[i][i] != 0.0 { s / hess[i][i] } else { 0.0 };
        }
        for (yi, zi) in y.iter().zip(&precond) {
            for (xk, zk) in x.iter_mut().zip(zi) {
                *xk += yi * zk;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::solve_lu;

    fn m(rows: &[Vec<f64>]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn dominant_system_reduces_to_plain_gabp() {
        let j = m(&[vec![4.0, 1.0, 0.5], vec![1.0, 5.0, 2.0], vec![0.5, 2.0, 6.0]]);
        let b = [1.0, -2.0, 3.0];
        let sol = enforced_solve(&j, &b, &EnforceConfig::default()).unwrap();
        assert_eq!(sol.loading, 0.0);
        assert_eq!(sol.outer_iterations, 1);
        let plain = run_gabp(&GabpGraph::from_dense(&j, &b).unwrap(), &GabpConfig::default()).unwrap();
        assert_eq!(sol.x, plain.means);
    }

    #[test]
    fn divergent_indefinite_two_by_two() {
        let j = m(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let sol = enforced_solve(&j, &[3.0, 3.0], &EnforceConfig::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-6 && (sol.x[1] - 1.0).abs() < 1e-6, "{:?}", sol.x);
        assert!(sol.loading > 1.0);
    }

    #[test]
    fn richardson_solves_positive_definite() {
        // PD but not diagonally dominant
        let j = m(&[vec![2.0, 1.5, 1.0], vec![1.5, 2.0, 1.5], vec![1.0, 1.5, 2.0]]);
        let b = [1.0, 0.0, -1.0];
        let cfg = EnforceConfig {
            scheme: OuterScheme::Richardson,
            outer_tol: 1e-10,
            max_outer: 5000,
            ..EnforceConfig::default()
        };
        let sol = enforced_solve(&j, &b, &cfg).unwrap();
        let x = solve_lu(&j, &b).unwrap();
        for i in 0..3 {
            assert!((sol.x[i] - x[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn richardson_cannot_fix_indefinite() {
        let j = m(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let cfg = EnforceConfig {
            scheme: OuterScheme::Richardson,
            max_outer: 200,
            ..EnforceConfig::default()
        };
        assert!(matches!(
            enforced_solve(&j, &[3.0, 1.0], &cfg),
            Err(GabpError::MaxOuterExceeded { .. })
        ));
    }

    #[test]
    fn negative_definite_is_negated() {
        let j = m(&[vec![-3.0, 1.0, 1.5], vec![1.0, -2.0, 1.2], vec![1.5, 1.2, -4.0]]);
        let b = [1.0, 2.0, 3.0];
        let sol = enforced_solve(&j, &b, &EnforceConfig::default()).unwrap();
        assert!(sol.negated);
        let r = residual(&j, &sol.x, &b);
        assert!(norm_inf(&r) <= 1e-9 * (1.0 + 3.0));
    }

    #[test]
    fn outer_budget_is_reported() {
        let j = m(&[vec![1.0, 2.0, 0.0], vec![2.0, 1.0, 3.0], vec![0.0, 3.0, -1.0]]);
        let cfg = EnforceConfig {
            max_outer: 1,
            outer_tol: 1e-14,
            ..EnforceConfig::default()
        };
        assert!(matches!(
            enforced_solve(&j, &[1.0, 1.0, 1.0], &cfg),
            Err(GabpError::MaxOuterExceeded { outer: 1, .. })
        ));
    }
}
