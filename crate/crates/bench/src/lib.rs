//! Shared fixtures for the benchmarks.

use std::f64::consts::PI;
use std::sync::Arc;

use osigma_core::fock::{enumerate_basis, sample_random_states, Species};
use osigma_core::{build_grid, FockState, MomentumGrid, VariationalProblem};

/// 2+1D problem on an `n × n` grid of half-width 20 at `R² = 1/(8π)`.
pub fn plane_problem(n: usize) -> VariationalProblem {
    let grid = Arc::new(build_grid(2, 20.0, n, n % 2 == 1).expect("grid"));
    VariationalProblem::new(grid, 1.0, 1, 1.0 / (8.0 * PI)).expect("problem")
}

/// A random two-species state on `modes` line modes with occupation cap `n_max`.
pub fn random_state(modes: usize, n_max: usize, seed: u64) -> (Arc<MomentumGrid>, FockState) {
    let grid = Arc::new(build_grid(1, PI, modes, modes % 2 == 1).expect("grid"));
    let basis = Arc::new(enumerate_basis(modes, n_max, Species::Two).expect("basis"));
    let state = sample_random_states(&basis, 1, seed).pop().expect("state");
    (grid, state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        assert_eq!(plane_problem(5).len(), 25);
        let (grid, state) = random_state(2, 2, 1);
        assert_eq!(grid.len(), 2);
        assert!(state.is_normalized());
    }
}
