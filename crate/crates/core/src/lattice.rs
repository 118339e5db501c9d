//! Discretized momentum space.
//!
//! A [`MomentumGrid`] is a uniform Cartesian lattice of cell midpoints
//! covering the box `[-k_max, k_max]^dim`. Every mode carries the weight
//! `(Δk / 2π)^dim`, so that `Σ w_k f(k)` approximates
//! `∫ d^dim k / (2π)^dim f(k)` by the midpoint rule.

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("spatial dimension must be 1, 2 or 3 (got {0})")]
    Dimension(usize),
    #[error("k_max must be positive and finite (got {0})")]
    Cutoff(f64),
    #[error("n_per_dim must be at least 1")]
    EmptyGrid,
    #[error(
        "n_per_dim = {n} has no exact zero mode; odd counts carry k = 0, even counts do not \
         (include_zero = {include_zero})"
    )]
    Parity { n: usize, include_zero: bool },
    #[error("grid with {0} modes exceeds the supported size")]
    TooLarge(usize),
    #[error("mass must be nonnegative and finite (got {0})")]
    Mass(f64),
}

/// Hard upper bound on the number of modes of a single grid.
pub const MAX_MODES: usize = 1 << 24;

/// Uniform midpoint grid in 1, 2 or 3 spatial dimensions.
///
/// Modes are stored in row-major order over the integer lattice
/// coordinates, the last axis running fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumGrid {
    dim_spatial: usize,
    n_per_dim: usize,
    k_max: f64,
    spacing: f64,
    modes: Vec<f64>,
    weights: Vec<f64>,
    zero_mode: Option<usize>,
}

/// Build the uniform grid. `include_zero` must agree with the parity of
/// `n_per_dim`: odd counts place a midpoint exactly at `k = 0`.
pub fn build_grid(
    dim_spatial: usize,
    k_max: f64,
    n_per_dim: usize,
    include_zero: bool,
) -> Result<MomentumGrid, LatticeError> {
    if !(1..=3).contains(&dim_spatial) {
        return Err(LatticeError::Dimension(dim_spatial));
    }
    if !(k_max > 0.0 && k_max.is_finite()) {
        return Err(LatticeError::Cutoff(k_max));
    }
    if n_per_dim == 0 {
        return Err(LatticeError::EmptyGrid);
    }
    if (n_per_dim % 2 == 1) != include_zero {
        return Err(LatticeError::Parity {
            n: n_per_dim,
            include_zero,
        });
    }
    let total = n_per_dim
        .checked_pow(dim_spatial as u32)
        .filter(|&t| t <= MAX_MODES)
        .ok_or(LatticeError::TooLarge(usize::MAX))?;

    let spacing = 2.0 * k_max / n_per_dim as f64;
    let centre = (n_per_dim as f64 - 1.0) / 2.0;
    let axis: Vec<f64> = (0..n_per_dim)
        .map(|i| (i as f64 - centre) * spacing)
        .collect();
    let weight = (spacing / (2.0 * PI)).powi(dim_spatial as i32);

    let mut modes = Vec::with_capacity(total * dim_spatial);
    let mut idx = vec![0usize; dim_spatial];
    for _ in 0..total {
        modes.extend(idx.iter().map(|&i| axis[i]));
        for d in (0..dim_spatial).rev() {
            idx[d] += 1;
            if idx[d] < n_per_dim {
                break;
            }
            idx[d] = 0;
        }
    }

    let zero_mode = include_zero.then(|| {
        let half = n_per_dim / 2;
        (0..dim_spatial).fold(0, |acc, _| acc * n_per_dim + half)
    });

    Ok(MomentumGrid {
        dim_spatial,
        n_per_dim,
        k_max,
        spacing,
        modes,
        weights: vec![weight; total],
        zero_mode,
    })
}

impl MomentumGrid {
    pub fn dim_spatial(&self) -> usize {
        self.dim_spatial
    }

    pub fn n_per_dim(&self) -> usize {
        self.n_per_dim
    }

    pub fn k_max(&self) -> f64 {
        self.k_max
    }

    /// Lattice spacing `Δk = 2 k_max / n_per_dim`.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn includes_zero_mode(&self) -> bool {
        self.zero_mode.is_some()
    }

    pub fn zero_mode(&self) -> Option<usize> {
        self.zero_mode
    }

    pub fn mode(&self, i: usize) -> &[f64] {
        &self.modes[i * self.dim_spatial..(i + 1) * self.dim_spatial]
    }

    pub fn modes(&self) -> impl Iterator<Item = &[f64]> {
        self.modes.chunks_exact(self.dim_spatial)
    }

    pub fn norm_sq(&self, i: usize) -> f64 {
        self.mode(i).iter().map(|k| k * k).sum()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integer lattice coordinates of mode `i`, centred on the box.
    ///
    /// Coordinates are doubled so that even grids (half-integer midpoints)
    /// stay integral: `k = coords * Δk / 2`.
    pub fn doubled_coords(&self, i: usize) -> Vec<i64> {
        let n = self.n_per_dim as i64;
        let mut rem = i as i64;
        let mut out = vec![0i64; self.dim_spatial];
        for d in (0..self.dim_spatial).rev() {
            let j = rem % n;
            rem /= n;
            out[d] = 2 * j - (n - 1);
        }
        out
    }

    /// Index of the mode at `-k`. Exact because the grid is symmetric.
    pub fn reflect(&self, i: usize) -> usize {
        self.len() - 1 - i
    }

    /// Index of the mode with the given doubled coordinates, if on the grid.
    pub fn index_of_doubled(&self, coords: &[i64]) -> Option<usize> {
        let n = self.n_per_dim as i64;
        let mut idx = 0i64;
        for &c in coords {
            let shifted = c + (n - 1);
            if shifted < 0 || shifted % 2 != 0 || shifted / 2 >= n {
                return None;
            }
            idx = idx * n + shifted / 2;
        }
        Some(idx as usize)
    }

    /// Σ w_k. Equals `(2 k_max / 2π)^dim` exactly for this construction.
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Free dispersion `ε_k = √(k² + μ²)` evaluated on every grid mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispersion {
    mu: f64,
    epsilon: Vec<f64>,
}

pub fn dispersion(grid: &MomentumGrid, mu: f64) -> Result<Dispersion, LatticeError> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(LatticeError::Mass(mu));
    }
    let epsilon = (0..grid.len())
        .map(|i| (grid.norm_sq(i) + mu * mu).sqrt())
        .collect();
    Ok(Dispersion { mu, epsilon })
}

impl Dispersion {
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn epsilon(&self) -> &[f64] {
        &self.epsilon
    }

    pub fn len(&self) -> usize {
        self.epsilon.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epsilon.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn one_dim_three_modes() {
        let g = build_grid(1, PI, 3, true).unwrap();
        assert_eq!(g.len(), 3);
        let ks: Vec<f64> = g.modes().map(|m| m[0]).collect();
        assert_relative_eq!(ks[0], -2.0 * PI / 3.0, epsilon = 1e-14);
        assert_eq!(ks[1], 0.0);
        assert_relative_eq!(ks[2], 2.0 * PI / 3.0, epsilon = 1e-14);
        for &w in g.weights() {
            assert_relative_eq!(w, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_eq!(g.zero_mode(), Some(1));
    }

    #[test]
    fn single_mode_at_origin() {
        let g = build_grid(2, 1.0, 1, true).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.mode(0), &[0.0, 0.0]);
        assert_relative_eq!(g.weights()[0], 1.0 / (PI * PI), epsilon = 1e-15);
    }

    #[test]
    fn weight_sum_is_exact() {
        let g = build_grid(2, 10.0, 64, false).unwrap();
        assert_relative_eq!(
            g.total_weight(),
            400.0 / (4.0 * PI * PI),
            max_relative = 1e-13
        );
        assert!(g.zero_mode().is_none());
        assert!(g.modes().all(|m| m.iter().any(|&k| k != 0.0)));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(
            build_grid(2, 1.0, 4, true),
            Err(LatticeError::Parity {
                n: 4,
                include_zero: true
            })
        );
        assert!(matches!(
            build_grid(2, 1.0, 5, false),
            Err(LatticeError::Parity { .. })
        ));
        assert_eq!(build_grid(2, 0.0, 3, true), Err(LatticeError::Cutoff(0.0)));
        assert_eq!(
            build_grid(2, -1.0, 3, true),
            Err(LatticeError::Cutoff(-1.0))
        );
        assert_eq!(build_grid(4, 1.0, 3, true), Err(LatticeError::Dimension(4)));
        assert_eq!(build_grid(1, 1.0, 0, false), Err(LatticeError::EmptyGrid));
    }

    #[test]
    fn zero_mode_is_unique() {
        for dim in 1..=3 {
            let g = build_grid(dim, 2.0, 7, true).unwrap();
            let zeros: Vec<usize> = (0..g.len()).filter(|&i| g.norm_sq(i) == 0.0).collect();
            assert_eq!(zeros, vec![g.zero_mode().unwrap()]);
        }
    }

    #[test]
    fn reflection_negates_momentum() {
        for (n, z) in [(5, true), (4, false)] {
            let g = build_grid(2, 3.0, n, z).unwrap();
            for i in 0..g.len() {
                let j = g.reflect(i);
                for (a, b) in g.mode(i).iter().zip(g.mode(j)) {
                    assert_relative_eq!(*a, -*b, epsilon = 1e-14);
                }
                assert_eq!(g.index_of_doubled(&g.doubled_coords(i)), Some(i));
            }
        }
    }

    #[test]
    fn dispersion_values() {
        let g = build_grid(2, 4.0, 2, false).unwrap();
        // modes at (±2, ±2)
        let e = dispersion(&g, 1.0).unwrap();
        for &x in e.epsilon() {
            assert_relative_eq!(x, 3.0, epsilon = 1e-14);
        }
        let g = build_grid(2, 1.0, 1, true).unwrap();
        assert_eq!(dispersion(&g, 1.0).unwrap().epsilon(), &[1.0]);
        let g = build_grid(2, 8.0, 2, false).unwrap(); // (±4, ±4)
        assert_relative_eq!(dispersion(&g, 0.0).unwrap().epsilon()[0], 32f64.sqrt());
        assert!(dispersion(&g, -1.0).is_err());
    }

    #[test]
    fn dispersion_example_points() {
        // spacing 1, integer coordinates
        let g = build_grid(2, 4.5, 9, true).unwrap();
        let at = |x: f64, y: f64| (0..g.len()).find(|&i| g.mode(i) == [x, y]).unwrap();
        let massless = dispersion(&g, 0.0).unwrap();
        let massive = dispersion(&g, 1.0).unwrap();
        assert_relative_eq!(massless.epsilon()[at(3.0, 4.0)], 5.0, epsilon = 1e-14);
        assert_relative_eq!(
            massive.epsilon()[at(1.0, 0.0)],
            2f64.sqrt(),
            epsilon = 1e-14
        );
        assert_eq!(massive.epsilon()[at(0.0, 0.0)], 1.0);
    }

    #[test]
    fn dispersion_is_monotone_in_norm() {
        let g = build_grid(3, 2.0, 5, true).unwrap();
        let e = dispersion(&g, 0.7).unwrap();
        let mut pairs: Vec<(f64, f64)> = (0..g.len())
            .map(|i| (g.norm_sq(i), e.epsilon()[i]))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
        for (k2, eps) in pairs {
            assert!(eps >= 0.7);
            assert_eq!(eps == 0.7, k2 == 0.0);
        }
    }

    #[test]
    fn midpoint_rule_is_second_order() {
        // ∫ d²k/(2π)² exp(-k²) = 1/(4π)
        let exact = 1.0 / (4.0 * PI);
        let err = |n: usize| {
            let g = build_grid(2, 3.0, n, true).unwrap();
            let s: f64 = (0..g.len())
                .map(|i| g.weights()[i] * (-g.norm_sq(i)).exp())
                .sum();
            (s - exact).abs()
        };
        let (e1, e2) = (err(5), err(9));
        assert!(e2 < e1);
    }
}
