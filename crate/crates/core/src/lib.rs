//! Sensor selection by log-det maximization with Gaussian belief propagation.
//!
//! The relaxed problem
//!
//! ```text
//! maximize   log det(Aᵀdiag(z)A) + κ Σ (log z_i + log(1 − z_i))
//! subject to 1ᵀz = k
//! ```
//!
//! is solved by an equality-constrained Newton method whose linear algebra
//! runs either centrally ([`dense`]) or as message passing on a simulated
//! synchronous network ([`gabp`]). Relaxed solutions are rounded, improved
//! by swap local search and bounded ([`selection`]); the same machinery
//! computes minimum-volume enclosing ellipsoids ([`mvee`]).

pub mod barrier;
pub mod data;
pub mod dense;
pub mod diagnostics;
pub mod experiment;
pub mod gabp;
pub mod ingest;
pub mod mvee;
pub mod newton;
pub mod selection;

pub use barrier::{BarrierError, BarrierKind, RelaxedPoint, SensorProblem};
pub use dense::{DenseMatrix, LinalgError};
pub use experiment::{DataSource, ExperimentConfig, ResultRecord};
pub use gabp::{EnforceConfig, GabpConfig, NetworkMetrics};
pub use mvee::{Ellipsoid, MveeConfig};
pub use newton::{Backend, NewtonConfig, NewtonError, SolveTrace};
pub use selection::SelectionResult;
