//! Gaussian belief propagation over a simulated synchronous network.
//!
//! Every variable of `J x = h` is a network node; every nonzero off-diagonal
//! `J_ij` is a bidirectional link. A round updates all directed messages
//! simultaneously from the previous round's values, so the number of rounds
//! is the number of communication steps a real deployment would need.
//!
//! Messages follow the classic precision/potential recursion:
//!
//! ```text
//! α_{i\j} = J_ii + Σ_{k∈N(i)\j} α_ki        β_{i\j} = h_i + Σ_{k∈N(i)\j} β_ki
//! α_ij    = -J_ij² / α_{i\j}                 β_ij    = -J_ij β_{i\j} / α_{i\j}
//! ```
//!
//! and on convergence `K̂_i = 1 / (J_ii + Σ α_ki)`, `μ̂_i = K̂_i (h_i + Σ β_ki)`.

mod enforce;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dense::{DenseMatrix, LinalgError};

pub use enforce::{enforced_solve, EnforceConfig, EnforcedSolution, OuterScheme};

/// Pivots with magnitude at or below this are treated as zero.
pub const ZERO_PIVOT: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GabpError {
    #[error("GaBP did not converge after {} rounds (last delta {:e}{})",
        .partial.rounds, .last_delta, if *.diverged { ", diverged" } else { "" })]
    DivergedOrMaxRounds {
        partial: Box<GabpResult>,
        last_delta: f64,
        diverged: bool,
    },
    #[error("zero pivot at node {node}")]
    ZeroPivot { node: usize },
    #[error("instance {index}: {source}")]
    Instance {
        index: usize,
        #[source]
        source: Box<GabpError>,
    },
    #[error("enforcement did not reach tolerance after {outer} outer iterations (residual {residual:e})")]
    MaxOuterExceeded { outer: usize, residual: f64 },
    #[error("inner solver failed on the loaded system: {0}")]
    InnerFailure(Box<GabpError>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GabpConfig {
    /// Convergence threshold on the ∞-norm of message changes.
    pub threshold: f64,
    pub max_rounds: usize,
    /// Any |α| or |β| beyond this aborts the run as diverged.
    pub divergence_limit: f64,
}

impl Default for GabpConfig {
    fn default() -> Self {
        Self {
            threshold: 1e-8,
            max_rounds: 1000,
            divergence_limit: 1e12,
        }
    }
}

impl GabpConfig {
    pub fn with_threshold(threshold: f64) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }
}

/// Communication cost of a (possibly composite) distributed computation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NetworkMetrics {
    pub rounds: u64,
    pub messages: u64,
    /// Number of scalars carried by all messages.
    pub payload: u64,
}

impl NetworkMetrics {
    /// Cost of running `self` and then `next`.
    pub fn then(self, next: NetworkMetrics) -> Self {
        Self {
            rounds: self.rounds + next.rounds,
            messages: self.messages + next.messages,
            payload: self.payload + next.payload,
        }
    }

    /// Cost of running `self` and `other` concurrently on the same network.
    pub fn alongside(self, other: NetworkMetrics) -> Self {
        Self {
            rounds: self.rounds.max(other.rounds),
            messages: self.messages + other.messages,
            payload: self.payload + other.payload,
        }
    }
}

/// Node/edge state of one linear-solve instance.
#[derive(Debug, Clone)]
pub struct GabpGraph {
    diag: Vec<f64>,
    potential: Vec<f64>,
    /// CSR-style adjacency: node `i` owns directed edges `offsets[i]..offsets[i+1]`.
    offsets: Vec<usize>,
    /// Target node of each directed edge, ascending within a node.
    targets: Vec<usize>,
    weights: Vec<f64>,
    /// Index of the opposite directed edge.
    reverse: Vec<usize>,
}

impl GabpGraph {
    /// Builds the graph for `J x = h`. `J` must be symmetric (small drift is
    /// symmetrized away); zero off-diagonals produce no link.
    pub fn from_dense(j: &DenseMatrix, h: &[f64]) -> Result<Self, GabpError> {
        let j = j.symmetrized()?;
        let n = j.rows();
        if h.len() != n {
            return Err(LinalgError::ShapeMismatch {
                expected: format!("potential of length {n}"),
                found: format!("{}", h.len()),
            }
            .into());
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for i in 0..n {
            for (k, &w) in j.row(i).iter().enumerate() {
                if k != i && w != 0.0 {
                    targets.push(k);
                    weights.push(w);
                }
            }
            offsets.push(targets.len());
        }
        let mut reverse = vec![0; targets.len()];
        for i in 0..n {
            for e in offsets[i]..offsets[i + 1] {
                let k = targets[e];
                let back = targets[offsets[k]..offsets[k + 1]]
                    .binary_search(&i)
                    .expect("symmetric sparsity pattern");
                reverse[e] = offsets[k] + back;
            }
        }
        Ok(Self {
            diag: j.diagonal(),
            potential: h.to_vec(),
            offsets,
            targets,
            weights,
            reverse,
        })
    }

    pub fn node_count(&self) -> usize {
        self.diag.len()
    }

    /// Number of undirected links.
    pub fn edge_count(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    pub fn set_potential(&mut self, h: &[f64]) {
        assert_eq!(h.len(), self.potential.len(), "potential length");
        self.potential.copy_from_slice(h);
    }

    /// Cost of one synchronous round on this graph.
    pub fn round_cost(&self) -> NetworkMetrics {
        let messages = self.targets.len() as u64;
        NetworkMetrics {
            rounds: 1,
            messages,
            payload: 2 * messages,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GabpResult {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub rounds: usize,
    pub messages_sent: u64,
    pub converged: bool,
}

impl GabpResult {
    pub fn metrics(&self) -> NetworkMetrics {
        NetworkMetrics {
            rounds: self.rounds as u64,
            messages: self.messages_sent,
            payload: 2 * self.messages_sent,
        }
    }
}

/// One directed message as emitted by the optional round trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MessageRecord {
    pub round: usize,
    pub from: usize,
    pub to: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// Runs GaBP until the message deltas fall below `cfg.threshold`.
///
/// A node whose diagonal is zero stays silent towards `j` until it has heard
/// a nonzero precision from some neighbour other than `j` (saddle matrices
/// have zero diagonal blocks); a zero pivot after that is an error.
pub fn run_gabp(graph: &GabpGraph, cfg: &GabpConfig) -> Result<GabpResult, GabpError> {
    run(graph, cfg, None)
}

/// Same as [`run_gabp`], reporting every message of every round to `sink`.
pub fn run_gabp_traced(
    graph: &GabpGraph,
    cfg: &GabpConfig,
    sink: &mut dyn FnMut(&MessageRecord),
) -> Result<GabpResult, GabpError> {
    run(graph, cfg, Some(sink))
}

fn run(
    graph: &GabpGraph,
    cfg: &GabpConfig,
    mut sink: Option<&mut dyn FnMut(&MessageRecord)>,
) -> Result<GabpResult, GabpError> {
    if !(cfg.threshold > 0.0) {
        return Err(GabpError::InvalidConfig("threshold must be positive".into()));
    }
    let n = graph.node_count();
    let e = graph.targets.len();
    let mut alpha = vec![0.0; e];
    let mut beta = vec![0.0; e];
    let mut next_alpha = vec![0.0; e];
    let mut next_beta = vec![0.0; e];
    // incoming messages of one node and their prefix/suffix sums
    let max_deg = (0..n).map(|i| graph.offsets[i + 1] - graph.offsets[i]).max().unwrap_or(0);
    let mut pre_a = vec![0.0; max_deg + 1];
    let mut pre_b = vec![0.0; max_deg + 1];
    let mut suf_a = vec![0.0; max_deg + 1];
    let mut suf_b = vec![0.0; max_deg + 1];

    let mut rounds = 0;
    let mut last_delta = f64::INFINITY;
    let mut converged = false;
    let mut diverged = false;

    while rounds < cfg.max_rounds {
        rounds += 1;
        for i in 0..n {
            let lo = graph.offsets[i];
            let hi = graph.offsets[i + 1];
            let deg = hi - lo;
            if deg == 0 {
                continue;
            }
            pre_a[0] = 0.0;
            pre_b[0] = 0.0;
            let mut heard = 0usize;
            for p in 0..deg {
                let back = graph.reverse[lo + p];
                heard += (alpha[back] != 0.0) as usize;
                pre_a[p + 1] = pre_a[p] + alpha[back];
                pre_b[p + 1] = pre_b[p] + beta[back];
            }
            suf_a[deg] = 0.0;
            suf_b[deg] = 0.0;
            for p in (0..deg).rev() {
                let back = graph.reverse[lo + p];
                suf_a[p] = suf_a[p + 1] + alpha[back];
                suf_b[p] = suf_b[p + 1] + beta[back];
            }
            for p in 0..deg {
                let out = lo + p;
                let cav_a = graph.diag[i] + (pre_a[p] + suf_a[p + 1]);
                let cav_b = graph.potential[i] + (pre_b[p] + suf_b[p + 1]);
                if cav_a.abs() <= ZERO_PIVOT {
                    let from_target = (alpha[graph.reverse[out]] != 0.0) as usize;
                    if graph.diag[i] == 0.0 && heard == from_target {
                        next_alpha[out] = alpha[out];
                        next_beta[out] = beta[out];
                        continue;
                    }
                    return Err(GabpError::ZeroPivot { node: i });
                }
                let w = graph.weights[out];
                next_alpha[out] = -w * w / cav_a;
                next_beta[out] = -w * cav_b / cav_a;
            }
        }

        let mut delta = 0.0f64;
        for k in 0..e {
            let da = (next_alpha[k] - alpha[k]).abs();
            let db = (next_beta[k] - beta[k]).abs();
            delta = delta.max(da).max(db);
            if !next_alpha[k].is_finite()
                || !next_beta[k].is_finite()
                || next_alpha[k].abs() > cfg.divergence_limit
                || next_beta[k].abs() > cfg.divergence_limit
            {
                diverged = true;
            }
        }
        std::mem::swap(&mut alpha, &mut next_alpha);
        std::mem::swap(&mut beta, &mut next_beta);
        if let Some(sink) = sink.as_deref_mut() {
            for i in 0..n {
                for out in graph.offsets[i]..graph.offsets[i + 1] {
                    sink(&MessageRecord {
                        round: rounds,
                        from: i,
                        to: graph.targets[out],
                        alpha: alpha[out],
                        beta: beta[out],
                    });
                }
            }
        }
        last_delta = if delta.is_nan() { f64::INFINITY } else { delta };
        if diverged {
            break;
        }
        if delta <= cfg.threshold {
            converged = true;
            break;
        }
    }

    let messages_sent = e as u64 * rounds as u64;
    let (means, variances) = if diverged {
        (vec![f64::NAN; n], vec![f64::NAN; n])
    } else {
        infer(graph, &alpha, &beta)?
    };
    let result = GabpResult {
        means,
        variances,
        rounds,
        messages_sent,
        converged,
    };
    if converged {
        Ok(result)
    } else {
        Err(GabpError::DivergedOrMaxRounds {
            partial: Box::new(result),
            last_delta,
            diverged,
        })
    }
}

fn infer(graph: &GabpGraph, alpha: &[f64], beta: &[f64]) -> Result<(Vec<f64>, Vec<f64>), GabpError> {
    let n = graph.node_count();
    let mut means = Vec::with_capacity(n);
    let mut variances = Vec::with_capacity(n);
    for i in 0..n {
        let mut prec = graph.diag[i];
        let mut pot = graph.potential[i];
        let mut sum_a = 0.0;
        let mut sum_b = 0.0;
        for out in graph.offsets[i]..graph.offsets[i + 1] {
            let back = graph.reverse[out];
            sum_a += alpha[back];
            sum_b += beta[back];
        }
        prec += sum_a;
        pot += sum_b;
        if prec.abs() <= ZERO_PIVOT {
            return Err(GabpError::ZeroPivot { node: i });
        }
        let var = 1.0 / prec;
        variances.push(var);
        means.push(var * pot);
    }
    Ok((means, variances))
}

/// Output of [`solve_multi_rhs`].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSolve {
    /// One solution per right-hand side, in input order.
    pub columns: Vec<Vec<f64>>,
    pub metrics: NetworkMetrics,
}

/// Runs one GaBP instance per right-hand side, logically in parallel: the
/// reported rounds are the maximum over instances, messages are summed.
pub fn solve_multi_rhs(
    j: &DenseMatrix,
    rhs: &[Vec<f64>],
    cfg: &GabpConfig,
) -> Result<MultiSolve, GabpError> {
    if rhs.is_empty() {
        return Ok(MultiSolve {
            columns: Vec::new(),
            metrics: NetworkMetrics::default(),
        });
    }
    let base = GabpGraph::from_dense(j, &rhs[0])?;
    for b in rhs {
        if b.len() != base.node_count() {
            return Err(LinalgError::ShapeMismatch {
                expected: format!("rhs of length {}", base.node_count()),
                found: format!("{}", b.len()),
            }
            .into());
        }
    }
    let results: Vec<Result<GabpResult, GabpError>> = rhs
        .par_iter()
        .map(|b| {
            let mut g = base.clone();
            g.set_potential(b);
            run_gabp(&g, cfg)
        })
        .collect();
    collect_instances(results.into_iter().map(|r| r.map(|res| {
        let m = res.metrics();
        (res.means, m)
    })))
}

/// Like [`solve_multi_rhs`] but each instance goes through [`enforced_solve`],
/// so it also handles systems on which plain GaBP diverges.
pub fn solve_multi_rhs_enforced(
    j: &DenseMatrix,
    rhs: &[Vec<f64>],
    cfg: &EnforceConfig,
) -> Result<(MultiSolve, usize), GabpError> {
    let results: Vec<Result<EnforcedSolution, GabpError>> =
        rhs.par_iter().map(|b| enforced_solve(j, b, cfg)).collect();
    let mut max_outer = 0;
    let mapped = results.into_iter().map(|r| {
        r.map(|s| {
            max_outer = max_outer.max(s.outer_iterations);
            (s.x, s.metrics)
        })
    });
    let multi = collect_instances(mapped)?;
    Ok((multi, max_outer))
}

fn collect_instances(
    results: impl Iterator<Item = Result<(Vec<f64>, NetworkMetrics), GabpError>>,
) -> Result<MultiSolve, GabpError> {
    let mut columns = Vec::new();
    let mut metrics = NetworkMetrics::default();
    for (index, r) in results.enumerate() {
        match r {
            Ok((x, m)) => {
                metrics = metrics.alongside(m);
                columns.push(x);
            }
            Err(e) => {
                return Err(GabpError::Instance {
                    index,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(MultiSolve { columns, metrics })
}
