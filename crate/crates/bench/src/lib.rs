//! Deterministic fixtures shared by the benchmarks.

use sensorsel_core::data::{gaussian_matrix, gen_synthetic};
use sensorsel_core::{DenseMatrix, SensorProblem};

/// Symmetric system `J = BᵀB/n + (rowsum + 1)·I`, strictly diagonally dominant.
pub fn dominant_system(n: usize, seed: u64) -> (DenseMatrix, Vec<f64>) {
    let b = gaussian_matrix(n, n, 1.0, seed);
    let mut j = b.transpose().matmul(&b).expect("square").scaled(1.0 / n as f64);
    for r in 0..n {
        let off: f64 = (0..n).filter(|&c| c != r).map(|c| j[(r, c)].abs()).sum();
        j[(r, r)] = off + 1.0;
    }
    let h = (0..n).map(|i| ((i + 1) as f64).sin()).collect();
    (j, h)
}

/// Synthetic selection instance with the default barrier weight.
pub fn selection_problem(m: usize, n: usize, k: usize, seed: u64) -> SensorProblem {
    SensorProblem::new(gen_synthetic(m, n, seed), k, SensorProblem::default_kappa(m, n)).expect("valid sizes")
}
