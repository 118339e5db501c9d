//! Hermitian kernels over grid modes.
//!
//! A [`HermitianKernel`] is a dense complex matrix indexed by pairs of grid
//! modes, tagged with the grid it was built on. Matrix functions (square
//! roots, definiteness checks) go through a full eigendecomposition, which
//! is adequate for the few-thousand-mode grids used here.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use thiserror::Error;

use crate::lattice::MomentumGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("matrix is {rows}x{cols} but the grid has {modes} modes")]
    Shape {
        rows: usize,
        cols: usize,
        modes: usize,
    },
    #[error("kernel has a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("kernels live on different grids")]
    GridMismatch,
    #[error("weight vector has length {got}, expected {expected}")]
    WeightLength { got: usize, expected: usize },
    #[error("non-finite weight at mode {0}")]
    NonFiniteWeight(usize),
    #[error("operator is not positive semidefinite: eigenvalue {0:e}")]
    NotPsd(f64),
    #[error("trace has imaginary part {im:e} against real part {re:e}")]
    ComplexTrace { re: f64, im: f64 },
}

/// Relative threshold below which negative eigenvalues are treated as
/// roundoff and clipped to zero by [`HermitianKernel::sqrt_psd`].
pub const PSD_CLIP: f64 = 1e-10;

/// Result of a definiteness test: the verdict plus the smallest eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdCheck {
    pub is_psd: bool,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone)]
pub struct HermitianKernel {
    grid: Arc<MomentumGrid>,
    entries: DMatrix<Complex64>,
    correction: f64,
}

impl HermitianKernel {
    /// Wrap `entries`, replacing it by its hermitian part `(M + Mᴴ)/2`.
    ///
    /// The size of that correction is kept and reported by
    /// [`symmetrization_correction`](Self::symmetrization_correction).
    pub fn new(grid: Arc<MomentumGrid>, entries: DMatrix<Complex64>) -> Result<Self, KernelError> {
        let n = grid.len();
        if entries.nrows() != n || entries.ncols() != n {
            return Err(KernelError::Shape {
                rows: entries.nrows(),
                cols: entries.ncols(),
                modes: n,
            });
        }
        for j in 0..n {
            for i in 0..n {
                let z = entries[(i, j)];
                if !(z.re.is_finite() && z.im.is_finite()) {
                    return Err(KernelError::NonFinite(i, j));
                }
            }
        }
        let adjoint = entries.adjoint();
        let correction = (&entries - &adjoint)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
            * 0.5;
        let entries = (entries + adjoint).unscale(2.0);
        Ok(HermitianKernel {
            grid,
            entries,
            correction,
        })
    }

    pub fn zeros(grid: Arc<MomentumGrid>) -> Self {
        let n = grid.len();
        HermitianKernel {
            grid,
            entries: DMatrix::zeros(n, n),
            correction: 0.0,
        }
    }

    pub fn identity(grid: Arc<MomentumGrid>) -> Self {
        let n = grid.len();
        HermitianKernel {
            grid,
            entries: DMatrix::identity(n, n),
            correction: 0.0,
        }
    }

    pub fn from_diagonal(grid: Arc<MomentumGrid>, diag: &[f64]) -> Result<Self, KernelError> {
        let n = grid.len();
        if diag.len() != n {
            return Err(KernelError::Shape {
                rows: diag.len(),
                cols: diag.len(),
                modes: n,
            });
        }
        let d = DVector::from_iterator(n, diag.iter().map(|&x| Complex64::new(x, 0.0)));
        HermitianKernel::new(grid, DMatrix::from_diagonal(&d))
    }

    pub fn grid(&self) -> &Arc<MomentumGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.entries[(i, j)]
    }

    /// Largest `|M - Mᴴ|/2` entry removed when the kernel was constructed.
    pub fn symmetrization_correction(&self) -> f64 {
        self.correction
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    fn same_grid(&self, other: &HermitianKernel) -> Result<(), KernelError> {
        if Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid {
            Ok(())
        } else {
            Err(KernelError::GridMismatch)
        }
    }

    fn with_entries(&self, entries: DMatrix<Complex64>) -> HermitianKernel {
        let adjoint = entries.adjoint();
        HermitianKernel {
            grid: Arc::clone(&self.grid),
            entries: (entries + adjoint).unscale(2.0),
            correction: 0.0,
        }
    }

    pub fn add(&self, other: &HermitianKernel) -> Result<HermitianKernel, KernelError> {
        self.same_grid(other)?;
        Ok(self.with_entries(&self.entries + &other.entries))
    }

    pub fn sub(&self, other: &HermitianKernel) -> Result<HermitianKernel, KernelError> {
        self.same_grid(other)?;
        Ok(self.with_entries(&self.entries - &other.entries))
    }

    /// Matrix square `K·K` (hermitian for hermitian `K`).
    pub fn square(&self) -> HermitianKernel {
        self.with_entries(&self.entries * &self.entries)
    }

    pub fn scale(&self, s: f64) -> HermitianKernel {
        HermitianKernel {
            grid: Arc::clone(&self.grid),
            entries: self.entries.scale(s),
            correction: self.correction * s.abs(),
        }
    }

    /// `self + s·1`.
    pub fn shift(&self, s: f64) -> HermitianKernel {
        let mut entries = self.entries.clone();
        for i in 0..entries.nrows() {
            entries[(i, i)] += s;
        }
        HermitianKernel {
            grid: Arc::clone(&self.grid),
            entries,
            correction: self.correction,
        }
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.dim() == 0 {
            return Vec::new();
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(self.entries.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Eigenpairs in ascending eigenvalue order; eigenvectors are columns.
    pub fn eigen(&self) -> (Vec<f64>, DMatrix<Complex64>) {
        let n = self.dim();
        let eig = SymmetricEigen::new(self.entries.clone());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
        (values, vectors)
    }

    /// Positive-semidefiniteness test: passes iff `λ_min >= -tol`.
    pub fn is_psd(&self, tol: f64) -> PsdCheck {
        let min_eigenvalue = self.eigenvalues().first().copied().unwrap_or(0.0);
        PsdCheck {
            is_psd: min_eigenvalue >= -tol,
            min_eigenvalue,
        }
    }

    /// Principal square root of a positive-semidefinite kernel.
    ///
    /// Eigenvalues in `[-1e-10·max(1, |λ|_max), 0)` are clipped to zero;
    /// anything more negative is an error carrying the eigenvalue.
    pub fn sqrt_psd(&self) -> Result<HermitianKernel, KernelError> {
        let n = self.dim();
        if n == 0 {
            return Ok(self.clone());
        }
        let eig = SymmetricEigen::new(self.entries.clone());
        let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let threshold = -PSD_CLIP * scale;
        let mut roots = DVector::<Complex64>::zeros(n);
        for (i, &v) in eig.eigenvalues.iter().enumerate() {
            if v < threshold {
                return Err(KernelError::NotPsd(v));
            }
            roots[i] = Complex64::new(v.max(0.0).sqrt(), 0.0);
        }
        let u = &eig.eigenvectors;
        let mut scaled = u.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= roots[j];
        }
        Ok(self.with_entries(scaled * u.adjoint()))
    }

    /// `Σ_k W_k · w_k · K(k, k)` with `W_k` the grid quadrature weights.
    ///
    /// The imaginary part must vanish to `1e-12·|Re| + 1e-12`.
    pub fn trace_weighted(&self, w: &[f64]) -> Result<f64, KernelError> {
        let n = self.dim();
        if w.len() != n {
            return Err(KernelError::WeightLength {
                got: w.len(),
                expected: n,
            });
        }
        if let Some(i) = w.iter().position(|x| !x.is_finite()) {
            return Err(KernelError::NonFiniteWeight(i));
        }
        let gw = self.grid.weights();
        let sum = (0..n).fold(Complex64::new(0.0, 0.0), |acc, i| {
            acc + self.entries[(i, i)] * (gw[i] * w[i])
        });
        if sum.im.abs() > 1e-12 * sum.re.abs() + 1e-12 {
            return Err(KernelError::ComplexTrace {
                re: sum.re,
                im: sum.im,
            });
        }
        Ok(sum.re)
    }
}

/// Test `(1 + A) − √(1 + B·B) ⪰ 0` to tolerance `tol`.
///
/// `B·B` is the matrix square of the expectation kernel itself, not the
/// expectation of the squared operator.
pub fn check_quantum_constraint(
    a: &HermitianKernel,
    b: &HermitianKernel,
    tol: f64,
) -> Result<PsdCheck, KernelError> {
    a.same_grid(b)?;
    let root = b.square().shift(1.0).sqrt_psd()?;
    let gap = a.shift(1.0).sub(&root)?;
    Ok(gap.is_psd(tol))
}
