//! Boolean selections from a relaxed solution: top-k rounding, swap local
//! search and the bounds that sandwich the Boolean optimum.

use rayon::prelude::*;
use serde::Serialize;

use crate::barrier::{relaxed_logdet, BarrierError, RelaxedPoint, SensorProblem};
use crate::dense::{cholesky, dot, DenseMatrix, LinalgError};

/// Relative improvement a swap must exceed to count.
const SWAP_EPS: f64 = 1e-12;

/// Indices of the `k` largest entries of `z`, ties to the lower index,
/// returned in ascending order.
pub fn round_topk(z: &[f64], k: usize) -> Vec<usize> {
    assert!(k <= z.len(), "k={k} exceeds {} entries", z.len());
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// `log det(Σ_{i ∈ chosen} a_i a_iᵀ)`, or `−∞` when the rows do not span.
pub fn logdet_selection(a: &DenseMatrix, chosen: &[usize]) -> f64 {
    let gram = a.row_subset_gram(chosen);
    match cholesky(&gram) {
        Ok(f) => f.logdet(),
        Err(_) => f64::NEG_INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalSearchOutcome {
    /// Ascending sensor indices.
    pub chosen: Vec<usize>,
    pub logdet: f64,
    pub swaps: usize,
    pub passes: usize,
}

/// Best-improvement single-swap local search. Each pass scores all
/// `k·(m−k)` swaps and applies the best strictly improving one.
pub fn local_search(a: &DenseMatrix, chosen: &[usize], max_passes: usize) -> LocalSearchOutcome {
    let m = a.rows();
    let mut current: Vec<usize> = chosen.to_vec();
    current.sort_unstable();
    current.dedup();
    let mut value = logdet_selection(a, &current);
    let mut swaps = 0;
    let mut passes = 0;
    while passes < max_passes {
        passes += 1;
        let mut inside = vec![false; m];
        for &i in &current {
            inside[i] = true;
        }
        let outside: Vec<usize> = (0..m).filter(|&j| !inside[j]).collect();
        let best = if value.is_finite() {
            best_swap_rank2(a, &current, &outside)
        } else {
            best_swap_direct(a, &current, &outside)
        };
        let Some((pos, j)) = best else { break };
        let mut next = current.clone();
        next[pos] = j;
        next.sort_unstable();
        let next_value = logdet_selection(a, &next);
        if !improves(next_value, value) {
            break;
        }
        current = next;
        value = next_value;
        swaps += 1;
    }
    LocalSearchOutcome {
        chosen: current,
        logdet: value,
        swaps,
        passes,
    }
}

fn improves(new: f64, old: f64) -> bool {
    if old == f64::NEG_INFINITY {
        return new > old;
    }
    new > old + SWAP_EPS * old.abs().max(1.0)
}

/// Scores swaps through the determinant lemma: replacing `a_i` by `a_j` in
/// a Gram matrix `G` multiplies its determinant by
/// `(1 − a_iᵀWa_i)(1 + a_jᵀWa_j) + (a_iᵀWa_j)²` with `W = G⁻¹`.
fn best_swap_rank2(a: &DenseMatrix, current: &[usize], outside: &[usize]) -> Option<(usize, usize)> {
    let gram = a.row_subset_gram(current);
    let w = cholesky(&gram).ok()?.inverse();
    let wa: Vec<Vec<f64>> = (0..a.rows()).map(|r| w.matvec(a.row(r)).expect("shape")).collect();
    let leverage: Vec<f64> = (0..a.rows()).map(|r| dot(a.row(r), &wa[r])).collect();
    let scored: Vec<(f64, usize, usize)> = current
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| {
            let mut best = (f64::NEG_INFINITY, pos, usize::MAX);
            for &j in outside {
                let cross = dot(&wa[i], a.row(j));
                let ratio = (1.0 - leverage[i]) * (1.0 + leverage[j]) + cross * cross;
                if ratio > best.0 {
                    best = (ratio, pos, j);
                }
            }
            best
        })
        .collect();
    let (ratio, pos, j) = pick_best(scored)?;
    (ratio > 1.0 + SWAP_EPS).then_some((pos, j))
}

/// Direct Cholesky evaluation of every swap, for rank-deficient selections.
fn best_swap_direct(a: &DenseMatrix, current: &[usize], outside: &[usize]) -> Option<(usize, usize)> {
    let scored: Vec<(f64, usize, usize)> = (0..current.len())
        .into_par_iter()
        .map(|pos| {
            let mut trial = current.to_vec();
            let mut best = (f64::NEG_INFINITY, pos, usize::MAX);
            for &j in outside {
                trial[pos] = j;
                let v = logdet_selection(a, &trial);
                if v > best.0 {
                    best = (v, pos, j);
                }
            }
            best
        })
        .collect();
    let (value, pos, j) = pick_best(scored)?;
    value.is_finite().then_some((pos, j))
}

/// Largest score; ties go to the earliest position, then the lowest index.
fn pick_best(scored: Vec<(f64, usize, usize)>) -> Option<(f64, usize, usize)> {
    scored
        .into_iter()
        .filter(|s| s.2 != usize::MAX)
        .fold(None, |acc: Option<(f64, usize, usize)>, s| match acc {
            Some(b) if b.0 >= s.0 => Some(b),
            _ => Some(s),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bounds {
    pub upper: f64,
    pub lower: f64,
    pub gap: f64,
}

/// `log det(Aᵀdiag(z)A) + 2mκ`, the barrier bound on the relaxed optimum
/// when `z` is the exact barrier maximizer.
pub fn barrier_upper_bound(p: &SensorProblem, z: &RelaxedPoint) -> Result<f64, BarrierError> {
    Ok(relaxed_logdet(p.matrix(), z)? + 2.0 * p.m() as f64 * p.kappa())
}

/// Linearization bound `F(z) + max_s ∇F(z)ᵀ(s − z)` over the feasible set
/// `{0 ≤ s ≤ 1, 1ᵀs = k}`, valid at any feasible `z`. With `∇F_i = a_iᵀXa_i`
/// and `zᵀ∇F = n` this is `log det + (sum of the k largest leverages) − n`.
pub fn linearization_upper_bound(p: &SensorProblem, z: &RelaxedPoint) -> Result<f64, BarrierError> {
    let q = p.matrix().weighted_gram(z)?;
    let f = cholesky(&q).map_err(BarrierError::from)?;
    let x = f.inverse();
    let a = p.matrix();
    let mut lev: Vec<f64> = (0..a.rows())
        .map(|r| dot(a.row(r), &x.matvec(a.row(r)).expect("shape")))
        .collect();
    lev.sort_by(|x, y| y.total_cmp(x));
    let top: f64 = lev[..p.budget()].iter().sum();
    Ok(f.logdet() + top - p.n() as f64)
}

pub fn compute_bounds(p: &SensorProblem, z: &RelaxedPoint, best_boolean_logdet: f64) -> Result<Bounds, BarrierError> {
    let upper = linearization_upper_bound(p, z)?;
    Ok(Bounds {
        upper,
        lower: best_boolean_logdet,
        gap: upper - best_boolean_logdet,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    /// Ascending sensor indices after local search.
    pub chosen: Vec<usize>,
    pub logdet_value: f64,
    /// `log det(Aᵀdiag(z*)A)` without the barrier.
    pub relaxed_value: f64,
    pub upper_bound: f64,
    /// Simple-rule (top-k) selection value.
    pub lower_bound: f64,
    pub gap: f64,
    /// Local search value, an improved lower bound.
    pub improved_lower_bound: f64,
    pub improved_gap: f64,
    /// [`barrier_upper_bound`] at the same point, for reference only.
    pub barrier_bound: f64,
    /// Top-k selection before local search.
    pub rounded: Vec<usize>,
    pub swaps: usize,
}

/// Rounds `z`, improves by local search (`max_passes = 0` skips it) and
/// bounds both selections.
pub fn select(p: &SensorProblem, z: &RelaxedPoint, max_passes: usize) -> Result<SelectionResult, BarrierError> {
    let rounded = round_topk(z, p.budget());
    let rounded_logdet = logdet_selection(p.matrix(), &rounded);
    let improved = local_search(p.matrix(), &rounded, max_passes);
    let bounds = compute_bounds(p, z, rounded_logdet)?;
    Ok(SelectionResult {
        chosen: improved.chosen,
        logdet_value: improved.logdet,
        relaxed_value: relaxed_logdet(p.matrix(), z)?,
        upper_bound: bounds.upper,
        lower_bound: bounds.lower,
        gap: bounds.gap,
        improved_lower_bound: improved.logdet,
        improved_gap: bounds.upper - improved.logdet,
        barrier_bound: barrier_upper_bound(p, z)?,
        rounded,
        swaps: improved.swaps,
    })
}

/// Best selection by enumerating every `k`-subset. Exponential; for tests
/// and small instances only.
pub fn exhaustive_best(a: &DenseMatrix, k: usize) -> Result<(Vec<usize>, f64), LinalgError> {
    let m = a.rows();
    if k == 0 || k > m {
        return Err(LinalgError::ShapeMismatch {
            expected: format!("1 <= k <= {m}"),
            found: format!("k = {k}"),
        });
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best = (idx.clone(), logdet_selection(a, &idx));
    loop {
        // next combination in lexicographic order
        let mut i = k;
        while i > 0 && idx[i - 1] == m - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for t in i..k {
            idx[t] = idx[t - 1] + 1;
        }
        let v = logdet_selection(a, &idx);
        if v > best.1 {
            best = (idx.clone(), v);
        }
    }
    Ok(best)
}
