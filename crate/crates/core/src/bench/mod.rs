//! Error and timing experiments: NMSE/timing primitives, the
//! length × feature-dimension grid and the tail-bound check.

mod grid;
mod metrics;
mod tail;

pub use grid::{run_approx_grid, run_approx_grid_with, GridConfig, GridResult};
pub use metrics::{moving_average, nmse, time_op};
pub use tail::{tail_bound, tail_bound_check, TailConfig, TailEntry, TailReport};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Bumped whenever a CSV or JSON layout changes.
pub const SCHEMA_VERSION: u32 = 1;

/// Matrix of independent standard normal entries.
pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}
