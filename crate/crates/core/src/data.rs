//! Reproducible synthetic data.
//!
//! # Random stream
//!
//! All randomness comes from [`GaussianStream`], whose output is fully
//! specified so that other implementations can reproduce it bit for bit:
//!
//! 1. The generator is ChaCha20 (20 rounds) seeded with
//!    `rand_chacha::ChaCha20Rng::seed_from_u64(seed)`, which expands the
//!    64-bit seed into the 256-bit key with PCG32 as defined by `rand_core`.
//! 2. A uniform is `(next_u64() >> 11) · 2⁻⁵³` in `[0, 1)`.
//! 3. Normals use the Marsaglia polar method: draw `u = 2U₁ − 1`,
//!    `v = 2U₂ − 1`, reject unless `0 < s = u² + v² < 1`, then emit
//!    `u·f` followed by `v·f` with `f = √(−2 ln s / s)`.
//! 4. Matrices are filled row-major.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::dense::DenseMatrix;

#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal sample.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }

    /// Uniform integer in `0..bound`.
    pub fn below(&mut self, bound: usize) -> usize {
        ((self.uniform() * bound as f64) as usize).min(bound.saturating_sub(1))
    }
}

/// `rows × cols` matrix of i.i.d. `N(0, std²)` entries.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> DenseMatrix {
    let mut s = GaussianStream::new(seed);
    let data = (0..rows * cols).map(|_| std * s.normal()).collect();
    DenseMatrix::from_row_major(rows, cols, data).expect("finite samples")
}

/// Measurement matrix with rows drawn from `N(0, (1/√n) I)`, i.e. each
/// coordinate has standard deviation `n^{-1/4}`.
pub fn gen_synthetic(m: usize, n: usize, seed: u64) -> DenseMatrix {
    gaussian_matrix(m, n, (n as f64).powf(-0.25), seed)
}

/// Stand-in for daily link-utilization data: `days × links` nonnegative
/// values where exactly `active` columns are nonzero on every day and the
/// remaining columns are idle (zero) on at least one day.
///
/// Active columns are spread over the link index range rather than placed
/// first so that filtering has to track the kept indices.
pub fn activity_fixture(days: usize, links: usize, active: usize, seed: u64) -> DenseMatrix {
    assert!(active <= links, "more active links than links");
    assert!(days > 0, "need at least one day");
    let mut s = GaussianStream::new(seed);
    // deterministic shuffle of link ids; the first `active` are always on
    let mut order: Vec<usize> = (0..links).collect();
    for i in (1..links).rev() {
        let j = s.below(i + 1);
        order.swap(i, j);
    }
    let mut always_on = vec![false; links];
    for &l in &order[..active] {
        always_on[l] = true;
    }
    let scales: Vec<f64> = (0..links).map(|_| (0.5 * s.normal()).exp()).collect();
    let mut m = DenseMatrix::zeros(days, links);
    for d in 0..days {
        for l in 0..links {
            m[(d, l)] = scales[l] * (0.3 * s.normal()).exp();
        }
    }
    for l in 0..links {
        if always_on[l] {
            continue;
        }
        // idle on a random stretch of days, never empty
        let start = s.below(days);
        let len = 1 + s.below(days - start);
        for d in start..start + len {
            m[(d, l)] = 0.0;
        }
    }
    m
}
