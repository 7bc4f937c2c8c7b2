//! Budget sweeps: solve, round, improve and bound for every `(k, backend)`
//! cell and emit one JSON line per cell.
//!
//! Cells run in parallel; lines are written in cell order (ascending `k`,
//! then backend order) by a single writer as soon as their predecessors are
//! done, and flushed one at a time so a failure never truncates earlier rows.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::barrier::{relaxed_logdet, SensorProblem};
use crate::data::gen_synthetic;
use crate::dense::DenseMatrix;
use crate::ingest::{load_csv_matrix, preprocess_activity, scale_columns, IngestError};
use crate::newton::{newton_solve, Backend, NewtonConfig, NewtonError, NewtonOutcome, StopReason};
use crate::selection::select;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("writing results: {0}")]
    Io(#[from] std::io::Error),
    #[error("encoding results: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { m: usize, n: usize, seed: u64 },
    Csv {
        path: PathBuf,
        /// Minimum fraction of nonzero rows a column needs to be kept.
        min_activity: f64,
        scale: bool,
    },
}

/// Measurement matrix ready for selection, plus the original column index
/// of every kept column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub matrix: DenseMatrix,
    pub kept_columns: Vec<usize>,
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset, ExperimentError> {
        match self {
            DataSource::Synthetic { m, n, seed } => {
                if *n == 0 || m < n {
                    return Err(ExperimentError::Invalid(format!("need m >= n >= 1, got m={m}, n={n}")));
                }
                Ok(Dataset {
                    matrix: gen_synthetic(*m, *n, *seed),
                    kept_columns: (0..*n).collect(),
                })
            }
            DataSource::Csv {
                path,
                min_activity,
                scale,
            } => {
                let raw = load_csv_matrix(path)?;
                let (m, kept) = preprocess_activity(&raw, *min_activity)?;
                Ok(Dataset {
                    matrix: if *scale { scale_columns(&m) } else { m },
                    kept_columns: kept,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub k_values: Vec<usize>,
    /// Barrier weight; `None` uses [`SensorProblem::default_kappa`].
    pub kappa: Option<f64>,
    pub backends: Vec<Backend>,
    /// Newton settings shared by every cell; the backend is set per cell.
    pub newton: NewtonConfig,
    pub local_search_passes: usize,
    /// Record wall-clock time per cell. Off by default because it breaks
    /// byte-identical output.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            k_values: Vec::new(),
            kappa: None,
            backends: Backend::ALL.to_vec(),
            newton: NewtonConfig::default(),
            local_search_passes: 1000,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, m: usize, n: usize) -> Result<(), ExperimentError> {
        if self.k_values.is_empty() || self.backends.is_empty() {
            return Err(ExperimentError::Invalid("no k values or no backends".into()));
        }
        if let Some(&k) = self.k_values.iter().find(|&&k| k < n || k >= m) {
            return Err(ExperimentError::Invalid(format!("k={k} outside [{n}, {}]", m.saturating_sub(1))));
        }
        self.newton.validate().map_err(|e| ExperimentError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Converged,
    /// Truncated backend stopped at its accuracy floor.
    Stalled,
    Failed,
}

/// One line of sweep output. Numeric fields are `null` when the cell failed
/// before producing them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRecord {
    pub k: usize,
    pub backend: Backend,
    pub status: CellStatus,
    pub error: Option<String>,
    /// Barrier objective at the returned point.
    pub objective: Option<f64>,
    /// `log det(Aᵀdiag(z)A)` at the returned point.
    pub relaxed_logdet: Option<f64>,
    pub simple_rule_logdet: Option<f64>,
    pub local_search_logdet: Option<f64>,
    pub upper_bound: Option<f64>,
    /// Simple-rule value.
    pub lower_bound: Option<f64>,
    pub gap: Option<f64>,
    /// `upper_bound − local_search_logdet`.
    pub local_search_gap: Option<f64>,
    pub barrier_bound: Option<f64>,
    pub swaps: Option<usize>,
    pub chosen: Option<Vec<usize>>,
    pub newton_iterations: usize,
    pub gabp_rounds: u64,
    pub gabp_messages: u64,
    pub gabp_payload: u64,
    pub outer_iterations: usize,
    pub wall_time_ms: Option<f64>,
}

impl ResultRecord {
    fn empty(k: usize, backend: Backend) -> Self {
        Self {
            k,
            backend,
            status: CellStatus::Failed,
            error: None,
            objective: None,
            relaxed_logdet: None,
            simple_rule_logdet: None,
            local_search_logdet: None,
            upper_bound: None,
            lower_bound: None,
            gap: None,
            local_search_gap: None,
            barrier_bound: None,
            swaps: None,
            chosen: None,
            newton_iterations: 0,
            gabp_rounds: 0,
            gabp_messages: 0,
            gabp_payload: 0,
            outer_iterations: 0,
            wall_time_ms: None,
        }
    }

    fn absorb_trace(&mut self, out: &NewtonOutcome) {
        let t = &out.trace;
        self.objective = Some(t.final_objective);
        self.newton_iterations = t.newton_iterations();
        self.gabp_rounds = t.metrics.rounds;
        self.gabp_messages = t.metrics.messages;
        self.gabp_payload = t.metrics.payload;
        self.outer_iterations = t.outer_iterations;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExperimentSummary {
    pub cells: usize,
    pub converged: usize,
    pub stalled: usize,
    pub failed: usize,
}

impl ExperimentSummary {
    pub fn all_finished(&self) -> bool {
        self.failed == 0
    }
}

/// Solves and evaluates one cell; optionally writes its Newton trace.
pub fn run_cell(
    a: &DenseMatrix,
    k: usize,
    backend: Backend,
    cfg: &ExperimentConfig,
    trace_dir: Option<&Path>,
) -> ResultRecord {
    let start = Instant::now();
    let mut rec = ResultRecord::empty(k, backend);
    let kappa = cfg.kappa.unwrap_or_else(|| SensorProblem::default_kappa(a.rows(), a.cols()));
    let problem = match SensorProblem::new(a.clone(), k, kappa) {
        Ok(p) => p,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    let newton = NewtonConfig { backend, ..cfg.newton };
    let outcome = match newton_solve(&problem, &newton) {
        Ok(out) => out,
        Err(NewtonError::MaxIterations(partial)) => {
            rec.absorb_trace(&partial);
            rec.error = Some(format!("no convergence within {} Newton iterations", newton.max_iterations));
            write_trace(trace_dir, k, backend, &partial, &mut rec);
            return finish(rec, start, cfg.timing);
        }
        Err(e) => {
            rec.error = Some(e.to_string());
            return finish(rec, start, cfg.timing);
        }
    };
    rec.absorb_trace(&outcome);
    write_trace(trace_dir, k, backend, &outcome, &mut rec);
    match select(&problem, &outcome.point, cfg.local_search_passes) {
        Ok(sel) => {
            rec.relaxed_logdet = relaxed_logdet(a, &outcome.point).ok();
            rec.simple_rule_logdet = Some(sel.lower_bound);
            rec.local_search_logdet = Some(sel.logdet_value);
            rec.upper_bound = Some(sel.upper_bound);
            rec.lower_bound = Some(sel.lower_bound);
            rec.gap = Some(sel.gap);
            rec.local_search_gap = Some(sel.improved_gap);
            rec.barrier_bound = Some(sel.barrier_bound);
            rec.swaps = Some(sel.swaps);
            rec.chosen = Some(sel.chosen);
            if rec.error.is_none() {
                rec.status = match outcome.trace.stop {
                    StopReason::Converged => CellStatus::Converged,
                    StopReason::Stalled => CellStatus::Stalled,
                    StopReason::MaxIterations => CellStatus::Failed,
                };
            }
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    finish(rec, start, cfg.timing)
}

fn finish(mut rec: ResultRecord, start: Instant, timing: bool) -> ResultRecord {
    if timing {
        rec.wall_time_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    rec
}

fn write_trace(dir: Option<&Path>, k: usize, backend: Backend, out: &NewtonOutcome, rec: &mut ResultRecord) {
    let Some(dir) = dir else { return };
    let path = dir.join(format!("trace-k{k:04}-{backend}.json"));
    let result = std::fs::File::create(&path)
        .map_err(|e| e.to_string())
        .and_then(|f| serde_json::to_writer_pretty(std::io::BufWriter::new(f), &out.trace).map_err(|e| e.to_string()));
    if let Err(e) = result {
        rec.error = Some(format!("writing {}: {e}", path.display()));
    }
}

/// Runs every `(k, backend)` cell, writing one JSON line per cell to `out`.
pub fn run_experiment(
    a: &DenseMatrix,
    cfg: &ExperimentConfig,
    out: &mut dyn Write,
    trace_dir: Option<&Path>,
) -> Result<ExperimentSummary, ExperimentError> {
    cfg.validate(a.rows(), a.cols())?;
    if let Some(dir) = trace_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut ks = cfg.k_values.clone();
    ks.sort_unstable();
    ks.dedup();
    let cells: Vec<(usize, Backend)> = ks
        .iter()
        .flat_map(|&k| cfg.backends.iter().map(move |&b| (k, b)))
        .collect();

    let (tx, rx) = mpsc::channel();
    let mut summary = ExperimentSummary::default();
    let mut write_result = Ok(());
    std::thread::scope(|scope| {
        let cells = &cells;
        scope.spawn(move || {
            cells.par_iter().enumerate().for_each_with(tx, |tx, (i, &(k, b))| {
                // the receiver only hangs up after a write error; stop quietly
                let _ = tx.send((i, run_cell(a, k, b, cfg, trace_dir)));
            });
        });
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (i, rec) in rx {
            pending.insert(i, rec);
            while let Some(rec) = pending.remove(&next) {
                next += 1;
                summary.cells += 1;
                match rec.status {
                    CellStatus::Converged => summary.converged += 1,
                    CellStatus::Stalled => summary.stalled += 1,
                    CellStatus::Failed => summary.failed += 1,
                }
                if write_result.is_ok() {
                    write_result = write_line(out, &rec);
                }
            }
        }
    });
    write_result?;
    Ok(summary)
}

fn write_line(out: &mut dyn Write, rec: &ResultRecord) -> Result<(), ExperimentError> {
    serde_json::to_writer(&mut *out, rec)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(ks: Vec<usize>) -> ExperimentConfig {
        ExperimentConfig {
            k_values: ks,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn sweep_emits_ordered_complete_rows() {
        let a = gen_synthetic(20, 4, 3);
        let mut buf = Vec::new();
        let summary = run_experiment(&a, &small_config(vec![8, 4, 6]), &mut buf, None).unwrap();
        assert_eq!(summary.cells, 9);
        assert!(summary.all_finished());
        let rows: Vec<serde_json::Value> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let order: Vec<(u64, &str)> = rows
            .iter()
            .map(|r| (r["k"].as_u64().unwrap(), r["backend"].as_str().unwrap()))
            .collect();
        assert_eq!(order[0], (4, "reference-dense"));
        assert_eq!(order[2], (4, "truncated"));
        assert_eq!(order[8], (8, "truncated"));
        for r in &rows {
            assert!(r["gap"].as_f64().unwrap() >= 0.0);
            assert!(r["upper_bound"].as_f64().unwrap() >= r["lower_bound"].as_f64().unwrap());
            assert!(r["wall_time_ms"].is_null());
        }
    }

    #[test]
    fn repeated_runs_are_identical() {
        let a = gen_synthetic(16, 3, 8);
        let cfg = small_config(vec![3, 5, 9]);
        let run = || {
            let mut buf = Vec::new();
            run_experiment(&a, &cfg, &mut buf, None).unwrap();
            buf
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn failed_cells_are_tagged_not_fatal() {
        let a = gen_synthetic(20, 4, 3);
        let mut cfg = small_config(vec![5, 10]);
        cfg.newton.max_iterations = 1;
        cfg.backends = vec![Backend::ReferenceDense];
        let mut buf = Vec::new();
        let summary = run_experiment(&a, &cfg, &mut buf, None).unwrap();
        assert_eq!(summary.failed, 2);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().all(|l| l.contains("\"status\":\"failed\"")));
    }

    #[test]
    fn traces_are_written() {
        let a = gen_synthetic(12, 2, 1);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(vec![4]);
        cfg.backends = vec![Backend::Exact];
        run_experiment(&a, &cfg, &mut std::io::sink(), Some(dir.path())).unwrap();
        let trace: serde_json::Value =
            serde_json::from_reader(std::fs::File::open(dir.path().join("trace-k0004-exact.json")).unwrap()).unwrap();
        assert_eq!(trace["backend"], "exact");
        assert!(trace["metrics"]["rounds"].as_u64().unwrap() > 0);
    }

    #[test]
    fn invalid_budgets_rejected() {
        let a = gen_synthetic(10, 3, 1);
        let mut sink = std::io::sink();
        assert!(run_experiment(&a, &small_config(vec![2]), &mut sink, None).is_err());
        assert!(run_experiment(&a, &small_config(vec![10]), &mut sink, None).is_err());
        assert!(run_experiment(&a, &small_config(vec![]), &mut sink, None).is_err());
    }

    #[test]
    fn csv_source_filters_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "a,b,c\n1,0,2\n2,1,1\n3,1,0.5\n").unwrap();
        let src = DataSource::Csv {
            path,
            min_activity: 1.0,
            scale: false,
        };
        let data = src.load().unwrap();
        assert_eq!(data.kept_columns, vec![0, 2]);
        assert_eq!(data.matrix.cols(), 2);
    }
}
