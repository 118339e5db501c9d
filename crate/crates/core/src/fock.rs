//! Truncated bosonic Fock space.
//!
//! This module is the brute-force reference for everything the kernel
//! formulation claims: it measures `A(k,k')` and `B(k,k')` on explicit
//! states, builds a state from a prescribed `⟨a†_k a_k'⟩` kernel, and
//! minimizes the constrained Hamiltonian directly over amplitude vectors.
//!
//! One species carries only `a` quanta. Two species carry `a` and `b`
//! quanta on the same modes, each capped at `n_max` total occupation. The
//! pair terms of `B` pair `a_k` with `b_{-k}`, with `-k` the grid
//! reflection of `k`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use argmin::core::{CostFunction, Executor, Gradient, State, TerminationReason, TerminationStatus};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{HermitianKernel, KernelError};
use crate::lattice::{dispersion, LatticeError, MomentumGrid};
use crate::numerics::nnls;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FockError {
    #[error("basis would hold {size} states, above the cap of {cap}")]
    BasisTooLarge { size: u128, cap: usize },
    #[error("need at least one mode")]
    NoModes,
    #[error("species must be 1 or 2 (got {0})")]
    Species(u8),
    #[error("occupation cap {0} exceeds 255")]
    OccupationCap(usize),
    #[error("amplitude vector has length {got}, basis has {expected} states")]
    Length { got: usize, expected: usize },
    #[error("state is not normalized (norm {0})")]
    NotNormalized(f64),
    #[error("basis has {basis} modes but the grid has {grid}")]
    GridSize { basis: usize, grid: usize },
    #[error("kernel is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("brute-force oracle supports at most 3 modes (grid has {0})")]
    OracleGrid(usize),
    #[error("oracle needs the two-species basis")]
    OracleSpecies,
    #[error("invalid oracle parameter: {0}")]
    OracleParameter(&'static str),
    #[error("optimizer failed: {0}")]
    Optimizer(String),
    #[error("malformed state dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Species {
    One,
    Two,
}

impl TryFrom<u8> for Species {
    type Error = FockError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Species::One),
            2 => Ok(Species::Two),
            other => Err(FockError::Species(other)),
        }
    }
}

impl From<Species> for u8 {
    fn from(s: Species) -> u8 {
        match s {
            Species::One => 1,
            Species::Two => 2,
        }
    }
}

pub const DEFAULT_BASIS_CAP: usize = 2_000_000;

/// Number of single-species occupation tuples over `modes` modes with total
/// occupation at most `n_max`: `C(n_max + modes, modes)`.
pub fn single_species_count(modes: usize, n_max: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 1..=modes as u128 {
        c = c * (n_max as u128 + i) / i;
    }
    c
}

pub fn basis_size(modes: usize, n_max: usize, species: Species) -> u128 {
    let s = single_species_count(modes, n_max);
    match species {
        Species::One => s,
        Species::Two => s * s,
    }
}

/// Ordered occupation-number basis.
///
/// Single-species tuples are ordered by total occupation, then in
/// descending lexicographic order within a shell: `(0,0), (1,0), (0,1),
/// (2,0), (1,1), (0,2)`. Two-species states are `a`-tuple major, `b`-tuple
/// minor in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct FockBasis {
    n_modes: usize,
    n_max: usize,
    species: Species,
    states: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
}

fn compositions(modes: usize, n_max: usize) -> Vec<Vec<u8>> {
    fn fill(rest: usize, pos: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if pos + 1 == cur.len() {
            cur[pos] = rest as u8;
            out.push(cur.clone());
            return;
        }
        for v in (0..=rest).rev() {
            cur[pos] = v as u8;
            fill(rest - v, pos + 1, cur, out);
        }
    }
    let mut out = Vec::new();
    let mut cur = vec![0u8; modes];
    for total in 0..=n_max {
        fill(total, 0, &mut cur, &mut out);
    }
    out
}

pub fn enumerate_basis(
    modes: usize,
    n_max: usize,
    species: Species,
) -> Result<FockBasis, FockError> {
    enumerate_basis_capped(modes, n_max, species, DEFAULT_BASIS_CAP)
}

pub fn enumerate_basis_capped(
    modes: usize,
    n_max: usize,
    species: Species,
    cap: usize,
) -> Result<FockBasis, FockError> {
    if modes == 0 {
        return Err(FockError::NoModes);
    }
    if n_max > u8::MAX as usize {
        return Err(FockError::OccupationCap(n_max));
    }
    let size = basis_size(modes, n_max, species);
    if size > cap as u128 {
        return Err(FockError::BasisTooLarge { size, cap });
    }
    let single = compositions(modes, n_max);
    let states: Vec<Vec<u8>> = match species {
        Species::One => single,
        Species::Two => single
            .iter()
            .flat_map(|a| {
                single.iter().map(move |b| {
                    let mut s = a.clone();
                    s.extend_from_slice(b);
                    s
                })
            })
            .collect(),
    };
    let index = states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    Ok(FockBasis {
        n_modes: modes,
        n_max,
        species,
        states,
        index,
    })
}

/// A single creation or annihilation operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ladder {
    A(usize),
    ADag(usize),
    B(usize),
    BDag(usize),
}

/// Sparse operator matrix: `O|col⟩ = Σ coef |row⟩` per stored triple.
#[derive(Debug, Clone, Default)]
pub struct SparseOperator {
    entries: Vec<(usize, usize, f64)>,
}

impl SparseOperator {
    fn push_scaled(&mut self, other: &SparseOperator, s: f64) {
        self.entries
            .extend(other.entries.iter().map(|&(r, c, v)| (r, c, v * s)));
    }

    /// Merge entries with the same `(row, col)` and drop zeros.
    fn compact(mut self) -> Self {
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len());
        for (r, c, v) in self.entries {
            match out.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => out.push((r, c, v)),
            }
        }
        out.retain(|e| e.2 != 0.0);
        SparseOperator { entries: out }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn apply(&self, psi: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); psi.len()];
        for &(r, c, v) in &self.entries {
            out[r] += psi[c] * v;
        }
        out
    }

    pub fn apply_adjoint(&self, psi: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); psi.len()];
        for &(r, c, v) in &self.entries {
            out[c] += psi[r] * v;
        }
        out
    }

    /// `⟨ψ|O|ψ⟩` for a (not necessarily normalized) vector.
    pub fn expectation(&self, psi: &[Complex64]) -> Complex64 {
        self.entries
            .iter()
            .fold(Complex64::new(0.0, 0.0), |acc, &(r, c, v)| {
                acc + psi[r].conj() * psi[c] * v
            })
    }
}

impl FockBasis {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn species(&self) -> Species {
        self.species
    }

    pub fn states(&self) -> &[Vec<u8>] {
        &self.states
    }

    /// `a` occupations of basis state `i`.
    pub fn a_occupations(&self, i: usize) -> &[u8] {
        &self.states[i][..self.n_modes]
    }

    /// `b` occupations of basis state `i` (empty for one species).
    pub fn b_occupations(&self, i: usize) -> &[u8] {
        &self.states[i][self.n_modes..]
    }

    pub fn index_of(&self, occupations: &[u8]) -> Option<usize> {
        self.index.get(occupations).copied()
    }

    /// Apply a product of ladder operators, rightmost first. `None` when the
    /// result vanishes or leaves the truncated space.
    pub fn apply_word(&self, state: usize, word: &[Ladder]) -> Option<(usize, f64)> {
        let mut occ = self.states[state].clone();
        let mut coef = 1.0;
        for op in word.iter().rev() {
            let (slot, raise) = match *op {
                Ladder::A(k) => (k, false),
                Ladder::ADag(k) => (k, true),
                Ladder::B(k) | Ladder::BDag(k) => {
                    if self.species == Species::One {
                        return None;
                    }
                    (self.n_modes + k, matches!(op, Ladder::BDag(_)))
                }
            };
            if raise {
                if occ[slot] == u8::MAX {
                    return None;
                }
                occ[slot] += 1;
                coef *= (occ[slot] as f64).sqrt();
            } else {
                if occ[slot] == 0 {
                    return None;
                }
                coef *= (occ[slot] as f64).sqrt();
                occ[slot] -= 1;
            }
        }
        self.index_of(&occ).map(|j| (j, coef))
    }

    pub fn operator(&self, word: &[Ladder]) -> SparseOperator {
        let entries = (0..self.len())
            .filter_map(|s| self.apply_word(s, word).map(|(t, c)| (t, s, c)))
            .collect();
        SparseOperator { entries }
    }

    /// Basis states in the top occupation shell of either species.
    fn is_top_sector(&self, i: usize) -> bool {
        let top = |occ: &[u8]| occ.iter().map(|&n| n as usize).sum::<usize>() == self.n_max;
        match self.species {
            Species::One => top(self.a_occupations(i)),
            Species::Two => top(self.a_occupations(i)) || top(self.b_occupations(i)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FockState {
    basis: Arc<FockBasis>,
    amplitudes: Vec<Complex64>,
}

impl FockState {
    pub fn new(basis: Arc<FockBasis>, amplitudes: Vec<Complex64>) -> Result<Self, FockError> {
        if amplitudes.len() != basis.len() {
            return Err(FockError::Length {
                got: amplitudes.len(),
                expected: basis.len(),
            });
        }
        Ok(FockState { basis, amplitudes })
    }

    pub fn vacuum(basis: Arc<FockBasis>) -> Self {
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); basis.len()];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        FockState { basis, amplitudes }
    }

    pub fn basis(&self) -> &Arc<FockBasis> {
        &self.basis
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            for z in &mut self.amplitudes {
                *z /= n;
            }
        }
        self
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= 1e-12
    }

    /// Probability carried by the top occupation shell.
    pub fn top_sector_weight(&self) -> f64 {
        (0..self.basis.len())
            .filter(|&i| self.basis.is_top_sector(i))
            .map(|i| self.amplitudes[i].norm_sqr())
            .sum()
    }

    /// `⟨N⟩` summed over species.
    pub fn mean_number(&self) -> f64 {
        self.amplitudes
            .iter()
            .enumerate()
            .map(|(i, z)| {
                z.norm_sqr() * self.basis.states[i].iter().map(|&n| n as f64).sum::<f64>()
            })
            .sum()
    }

    pub fn expectation(&self, word: &[Ladder]) -> Complex64 {
        (0..self.basis.len()).fold(Complex64::new(0.0, 0.0), |acc, s| {
            match self.basis.apply_word(s, word) {
                Some((t, c)) => acc + self.amplitudes[t].conj() * self.amplitudes[s] * c,
                None => acc,
            }
        })
    }

    pub fn to_dump(&self) -> FockDump {
        let two = self.basis.species == Species::Two;
        FockDump {
            n_modes: self.basis.n_modes,
            n_max: self.basis.n_max,
            species: self.basis.species,
            states: (0..self.basis.len())
                .map(|i| DumpEntry {
                    a: self.basis.a_occupations(i).to_vec(),
                    b: two.then(|| self.basis.b_occupations(i).to_vec()),
                    amplitude: [self.amplitudes[i].re, self.amplitudes[i].im],
                })
                .collect(),
        }
    }

    pub fn from_dump(dump: &FockDump) -> Result<Self, FockError> {
        let basis = Arc::new(enumerate_basis(dump.n_modes, dump.n_max, dump.species)?);
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); basis.len()];
        for entry in &dump.states {
            let mut occ = entry.a.clone();
            match (dump.species, &entry.b) {
                (Species::Two, Some(b)) => occ.extend_from_slice(b),
                (Species::One, None) => {}
                _ => return Err(FockError::Dump("b occupations must match species".into())),
            }
            let i = basis
                .index_of(&occ)
                .ok_or_else(|| FockError::Dump(format!("occupation {occ:?} outside the basis")))?;
            amplitudes[i] = Complex64::new(entry.amplitude[0], entry.amplitude[1]);
        }
        FockState::new(basis, amplitudes)
    }
}

/// JSON-friendly state layout: one entry per basis state with its
/// occupation tuples and `[re, im]` amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FockDump {
    pub n_modes: usize,
    pub n_max: usize,
    pub species: Species,
    pub states: Vec<DumpEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpEntry {
    pub a: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<u8>>,
    pub amplitude: [f64; 2],
}

/// Measured `A` and `B` kernels of a state.
#[derive(Debug, Clone)]
pub struct ExpectationKernels {
    pub a: HermitianKernel,
    pub b: HermitianKernel,
    /// Probability in the top occupation shell, where pair creation would
    /// leave the truncated space. Only nonzero for two species.
    pub leaked_norm: f64,
}

/// Leaked norm above which a debug message is logged.
pub const LEAK_WARN: f64 = 1e-6;

fn a_word(k: usize, kp: usize, grid: &MomentumGrid) -> [[Ladder; 2]; 2] {
    [
        [Ladder::ADag(k), Ladder::A(kp)],
        [Ladder::BDag(grid.reflect(kp)), Ladder::B(grid.reflect(k))],
    ]
}

fn b_word(k: usize, kp: usize, grid: &MomentumGrid) -> [[Ladder; 2]; 2] {
    [
        [Ladder::ADag(k), Ladder::BDag(grid.reflect(kp))],
        [Ladder::A(kp), Ladder::B(grid.reflect(k))],
    ]
}

/// `A(k,k') = ⟨a†_k a_k' + b†_{-k'} b_{-k}⟩`,
/// `B(k,k') = ⟨a†_k b†_{-k'} + a_k' b_{-k}⟩`.
pub fn expectation_kernels(
    state: &FockState,
    grid: &Arc<MomentumGrid>,
) -> Result<ExpectationKernels, FockError> {
    let k_modes = state.basis.n_modes;
    if grid.len() != k_modes {
        return Err(FockError::GridSize {
            basis: k_modes,
            grid: grid.len(),
        });
    }
    let norm = state.norm();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(FockError::NotNormalized(norm));
    }
    let two = state.basis.species == Species::Two;
    let mut a = DMatrix::<Complex64>::zeros(k_modes, k_modes);
    let mut b = DMatrix::<Complex64>::zeros(k_modes, k_modes);
    for k in 0..k_modes {
        for kp in 0..k_modes {
            a[(k, kp)] = a_word(k, kp, grid)
                .iter()
                .map(|w| state.expectation(w))
                .sum();
            if two {
                b[(k, kp)] = b_word(k, kp, grid)
                    .iter()
                    .map(|w| state.expectation(w))
                    .sum();
            }
        }
    }
    let leaked_norm = if two { state.top_sector_weight() } else { 0.0 };
    if leaked_norm > LEAK_WARN {
        log::debug!("truncation leak: top occupation shell holds {leaked_norm:e} of the norm");
    }
    Ok(ExpectationKernels {
        a: HermitianKernel::new(Arc::clone(grid), a)?,
        b: HermitianKernel::new(Arc::clone(grid), b)?,
        leaked_norm,
    })
}

/// Outcome of building a state from a prescribed kernel.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub state: FockState,
    /// `‖⟨a†a⟩_measured − g‖_F`, measured on the returned state.
    pub residual: f64,
    /// `|β_n|²` for `n = 0..=n_max`.
    pub sector_weights: Vec<f64>,
    /// Eigenvalues of `g`, ascending.
    pub spectrum: Vec<f64>,
    /// Residual above [`DECOMPOSE_TOL`].
    pub flagged: bool,
}

pub const DECOMPOSE_TOL: f64 = 1e-8;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Amplitudes of `(c†)^n |0⟩ / √n!` with `c† = Σ_k u_k a†_k`, written in the
/// occupation basis: `√(n!/Π n_k!) Π u_k^{n_k}` on every tuple of total `n`.
fn coherent_shell(basis: &FockBasis, u: &[Complex64], n: usize) -> Vec<Complex64> {
    let nf = factorial(n);
    (0..basis.len())
        .map(|i| {
            let occ = basis.a_occupations(i);
            if occ.iter().map(|&x| x as usize).sum::<usize>() != n {
                return Complex64::new(0.0, 0.0);
            }
            let denom: f64 = occ.iter().map(|&x| factorial(x as usize)).product();
            let prod = occ
                .iter()
                .zip(u)
                .fold(Complex64::new(1.0, 0.0), |acc, (&x, &uk)| {
                    acc * uk.powu(x as u32)
                });
            prod * (nf / denom).sqrt()
        })
        .collect()
}

/// Build a single-species state whose `⟨a†_k a_k'⟩` kernel is `g`.
///
/// `g = Σ_m λ_m g_m g_m*` is diagonalized; shell `n` is the normalized
/// superposition `Σ_m √λ_m |n quanta in mode g_m*⟩`, and the shell weights
/// `|β_n|²` are fitted by nonnegative least squares, adding shells one at a
/// time until the fit is exact. The residual is always measured on the
/// final state through [`expectation_kernels`].
pub fn decompose_kernel_to_state(
    g: &HermitianKernel,
    n_max: usize,
) -> Result<Decomposition, FockError> {
    let grid = Arc::clone(g.grid());
    let k_modes = g.dim();
    let scale = g.frobenius_norm().max(1.0);
    let check = g.is_psd(1e-10 * scale);
    if !check.is_psd {
        return Err(FockError::NotPsd(check.min_eigenvalue));
    }
    let (lambdas, vectors) = g.eigen();
    let basis = Arc::new(enumerate_basis(k_modes, n_max, Species::One)?);
    let trace: f64 = lambdas.iter().map(|l| l.max(0.0)).sum();

    // shell states |n̂⟩ and their measured kernels
    let mut shells: Vec<Vec<Complex64>> = Vec::with_capacity(n_max + 1);
    let mut shell_kernels: Vec<DMatrix<Complex64>> = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        let mut amp = vec![Complex64::new(0.0, 0.0); basis.len()];
        if n == 0 || trace <= 0.0 {
            if n == 0 {
                amp[0] = Complex64::new(1.0, 0.0);
            }
        } else {
            for (m, &lambda) in lambdas.iter().enumerate() {
                if lambda <= 0.0 {
                    continue;
                }
                let u: Vec<Complex64> = (0..k_modes).map(|k| vectors[(k, m)].conj()).collect();
                let shell = coherent_shell(&basis, &u, n);
                for (a, s) in amp.iter_mut().zip(shell) {
                    *a += s * lambda.sqrt();
                }
            }
        }
        let state = FockState::new(Arc::clone(&basis), amp)?;
        if state.norm() == 0.0 {
            shells.push(state.amplitudes);
            shell_kernels.push(DMatrix::zeros(k_modes, k_modes));
            continue;
        }
        let state = state.normalized();
        let kernels = expectation_kernels(&state, &grid)?;
        shell_kernels.push(kernels.a.matrix().clone());
        shells.push(state.amplitudes);
    }

    // rows: Re and Im of every kernel entry, then normalization
    let rows = 2 * k_modes * k_modes + 1;
    let target = {
        let mut t = DVector::<f64>::zeros(rows);
        for (idx, z) in g.matrix().iter().enumerate() {
            t[2 * idx] = z.re;
            t[2 * idx + 1] = z.im;
        }
        t[rows - 1] = 1.0;
        t
    };
    let column = |n: usize| {
        let mut c = DVector::<f64>::zeros(rows);
        for (idx, z) in shell_kernels[n].iter().enumerate() {
            c[2 * idx] = z.re;
            c[2 * idx + 1] = z.im;
        }
        c[rows - 1] = if shells[n].iter().any(|z| z.norm_sqr() > 0.0) {
            1.0
        } else {
            0.0
        };
        c
    };

    let mut weights = vec![0.0; n_max + 1];
    weights[0] = 1.0;
    let mut best_fit = f64::INFINITY;
    for top in 1..=n_max {
        let a = DMatrix::from_columns(&(0..=top).map(column).collect::<Vec<_>>());
        let p = nnls(&a, &target);
        let fit = (&a * &p - &target).norm();
        if fit < best_fit {
            best_fit = fit;
            weights = (0..=n_max)
                .map(|n| if n <= top { p[n] } else { 0.0 })
                .collect();
        }
        if fit <= 1e-12 * scale {
            break;
        }
    }

    let mut amp = vec![Complex64::new(0.0, 0.0); basis.len()];
    for (n, &p) in weights.iter().enumerate() {
        if p > 0.0 {
            for (a, &s) in amp.iter_mut().zip(&shells[n]) {
                *a += s * p.sqrt();
            }
        }
    }
    let state = FockState::new(Arc::clone(&basis), amp)?.normalized();
    let measured = expectation_kernels(&state, &grid)?;
    let residual = (measured.a.matrix() - g.matrix()).norm();
    let flagged = residual > DECOMPOSE_TOL;
    if flagged {
        log::warn!("kernel decomposition residual {residual:e} at n_max = {n_max}");
    }
    Ok(Decomposition {
        state,
        residual,
        sector_weights: weights,
        spectrum: lambdas,
        flagged,
    })
}

/// Seeded normalized states with i.i.d. complex Gaussian amplitudes.
pub fn sample_random_states(basis: &Arc<FockBasis>, count: usize, seed: u64) -> Vec<FockState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let amp: Vec<Complex64> = (0..basis.len())
                .map(|_| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    Complex64::new(re, im)
                })
                .collect();
            FockState {
                basis: Arc::clone(basis),
                amplitudes: amp,
            }
            .normalized()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub restarts: usize,
    /// L-BFGS iterations per penalty stage.
    pub max_iters: u64,
    /// Number of penalty stages, ending at the requested weight and
    /// growing by 100× per stage.
    pub penalty_stages: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            restarts: 8,
            max_iters: 500,
            penalty_stages: 3,
            grad_tol: 1e-11,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleGroundState {
    /// `N · Σ_k w_k ε_k A(k,k)` on the best state.
    pub energy: f64,
    /// `N · ½ Σ_k w_k ε_k⁻¹ (A + B)(k,k)`.
    pub constraint_value: f64,
    /// `|constraint − R²|` plus the norm of the off-diagonal constraint.
    pub constraint_residual: f64,
    pub penalized_objective: f64,
    /// Best single-component state; components are identical and decoupled.
    pub state: FockState,
    pub leaked_norm: f64,
    pub converged: bool,
    pub restart: usize,
}

/// Expectation-value operators of one field component on a small grid.
struct OracleOperators {
    hamiltonian: SparseOperator,
    uniform: SparseOperator,
    shifted: Vec<SparseOperator>,
}

fn oracle_operators(basis: &FockBasis, grid: &MomentumGrid, eps: &[f64]) -> OracleOperators {
    let w = grid.weights();
    let n = grid.len();
    let mut hamiltonian = SparseOperator::default();
    let mut uniform = SparseOperator::default();
    for k in 0..n {
        for word in a_word(k, k, grid) {
            hamiltonian.push_scaled(&basis.operator(&word), w[k] * eps[k]);
            uniform.push_scaled(&basis.operator(&word), w[k] / (2.0 * eps[k]));
        }
        for word in b_word(k, k, grid) {
            uniform.push_scaled(&basis.operator(&word), w[k] / (2.0 * eps[k]));
        }
    }
    // group (k, k') by the lattice displacement K = k' - k
    let mut by_shift: HashMap<Vec<i64>, SparseOperator> = HashMap::new();
    for k in 0..n {
        for kp in 0..n {
            if k == kp {
                continue;
            }
            let shift: Vec<i64> = grid
                .doubled_coords(kp)
                .iter()
                .zip(grid.doubled_coords(k))
                .map(|(a, b)| a - b)
                .collect();
            let coef = w[k] / (2.0 * (eps[k] * eps[kp]).sqrt());
            let entry = by_shift.entry(shift).or_default();
            for word in a_word(k, kp, grid).iter().chain(b_word(k, kp, grid).iter()) {
                entry.push_scaled(&basis.operator(word), coef);
            }
        }
    }
    let mut shifts: Vec<_> = by_shift.into_iter().collect();
    shifts.sort_by(|a, b| a.0.cmp(&b.0));
    OracleOperators {
        hamiltonian: hamiltonian.compact(),
        uniform: uniform.compact(),
        shifted: shifts.into_iter().map(|(_, op)| op.compact()).collect(),
    }
}

/// Point, value and gradient.
type Evaluation = (Vec<f64>, f64, Vec<f64>);

struct PenalizedProblem<'a> {
    ops: &'a OracleOperators,
    target: f64,
    penalty: f64,
    /// Last point with its value and gradient; the line search asks for
    /// both at the same point.
    cache: RefCell<Option<Evaluation>>,
}

fn unpack(x: &[f64]) -> Vec<Complex64> {
    x.chunks_exact(2)
        .map(|c| Complex64::new(c[0], c[1]))
        .collect()
}

impl PenalizedProblem<'_> {
    /// Penalized value and its gradient with respect to the real
    /// parametrization `ψ = x / ‖x‖`.
    fn evaluate(&self, x: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let psi = unpack(x);
        let n2: f64 = x.iter().map(|v| v * v).sum();
        let mut value;
        let mut dpsi = vec![Complex64::new(0.0, 0.0); psi.len()];

        // hermitian pieces: energy + p (C - target)²
        let h_psi = self.ops.hamiltonian.apply(&psi);
        let energy = psi
            .iter()
            .zip(&h_psi)
            .map(|(a, b)| (a.conj() * b).re)
            .sum::<f64>()
            / n2;
        let u_psi = self.ops.uniform.apply(&psi);
        let c = psi
            .iter()
            .zip(&u_psi)
            .map(|(a, b)| (a.conj() * b).re)
            .sum::<f64>()
            / n2;
        let r = c - self.target;
        value = energy + self.penalty * r * r;
        if want_grad {
            for j in 0..psi.len() {
                dpsi[j] += (h_psi[j] - psi[j] * energy) / n2;
                dpsi[j] += (u_psi[j] - psi[j] * c) * (2.0 * self.penalty * r / n2);
            }
        }
        for op in &self.ops.shifted {
            let o_psi = op.apply(&psi);
            let o = psi
                .iter()
                .zip(&o_psi)
                .fold(Complex64::new(0.0, 0.0), |s, (a, b)| s + a.conj() * b)
                / n2;
            value += self.penalty * o.norm_sqr();
            if want_grad {
                let od_psi = op.apply_adjoint(&psi);
                for j in 0..psi.len() {
                    let d_o = (o_psi[j] - psi[j] * o) / n2;
                    let d_oc = (od_psi[j] - psi[j] * o.conj()) / n2;
                    dpsi[j] += (d_o * o.conj() + d_oc * o) * self.penalty;
                }
            }
        }
        let grad = if want_grad {
            dpsi.iter().flat_map(|z| [2.0 * z.re, 2.0 * z.im]).collect()
        } else {
            Vec::new()
        };
        (value, grad)
    }
}

impl PenalizedProblem<'_> {
    fn cached(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut cache = self.cache.borrow_mut();
        if let Some((cx, v, g)) = cache.as_ref() {
            if cx.as_slice() == x {
                return (*v, g.clone());
            }
        }
        let (v, g) = self.evaluate(x, true);
        *cache = Some((x.to_vec(), v, g.clone()));
        (v, g)
    }
}

impl CostFunction for PenalizedProblem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> Result<f64, argmin::core::Error> {
        Ok(self.cached(x).0)
    }
}

impl Gradient for PenalizedProblem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, x: &Self::Param) -> Result<Vec<f64>, argmin::core::Error> {
        Ok(self.cached(x).1)
    }
}

/// Penalized objective, convergence flag and final point of one restart.
type RestartOutcome = (f64, bool, Vec<f64>);

/// Minimize `⟨:H:⟩ + p (⟨:φ²:⟩ − R²)² + p Σ_{K≠0} |⟨:φ²:⟩_K|²` over
/// normalized two-species states on a grid of at most three modes.
///
/// All `N` components see the same single-component problem with target
/// `R²/N`, so one component is minimized and the energy scaled by `N`.
/// Penalty weights grow by 100× per stage up to `penalty_weight`; every
/// restart starts from a seeded random vector and the lowest penalized
/// value wins, ties going to the lowest restart index.
pub fn brute_force_ground_state(
    grid: &Arc<MomentumGrid>,
    mu: f64,
    n_components: u32,
    r2: f64,
    n_max: usize,
    penalty_weight: f64,
    opts: &OracleOptions,
) -> Result<OracleGroundState, FockError> {
    if grid.len() > 3 {
        return Err(FockError::OracleGrid(grid.len()));
    }
    if n_components == 0 {
        return Err(FockError::OracleParameter("N must be at least 1"));
    }
    if !(r2 >= 0.0 && r2.is_finite()) {
        return Err(FockError::OracleParameter(
            "R² must be finite and nonnegative",
        ));
    }
    if !(penalty_weight > 0.0 && penalty_weight.is_finite()) {
        return Err(FockError::OracleParameter(
            "penalty weight must be positive",
        ));
    }
    if !(mu > 0.0) {
        return Err(FockError::OracleParameter("μ must be positive"));
    }
    let eps = dispersion(grid, mu)?;
    let basis = Arc::new(enumerate_basis(grid.len(), n_max, Species::Two)?);
    let ops = oracle_operators(&basis, grid, eps.epsilon());
    let nf = n_components as f64;
    let target = r2 / nf;
    let stages = opts.penalty_stages.max(1);

    let runs: Vec<Result<RestartOutcome, FockError>> = (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(restart as u64));
            let mut x: Vec<f64> = (0..2 * basis.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let mut converged = true;
            let mut value = f64::INFINITY;
            for stage in 0..stages {
                let penalty = penalty_weight / 100f64.powi((stages - 1 - stage) as i32);
                let problem = PenalizedProblem {
                    ops: &ops,
                    target,
                    penalty,
                    cache: RefCell::new(None),
                };
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                x.iter_mut().for_each(|v| *v /= norm);
                let linesearch = MoreThuenteLineSearch::new();
                let solver = LBFGS::new(linesearch, 12)
                    .with_tolerance_grad(opts.grad_tol)
                    .and_then(|s| s.with_tolerance_cost(0.0))
                    .map_err(|e| FockError::Optimizer(e.to_string()))?;
                let start = x.clone();
                let res = Executor::new(problem, solver)
                    .configure(|state| state.param(start).max_iters(opts.max_iters))
                    .run()
                    .map_err(|e| FockError::Optimizer(e.to_string()))?;
                let state = res.state();
                if stage + 1 == stages {
                    converged = !matches!(
                        state.get_termination_status(),
                        TerminationStatus::Terminated(TerminationReason::MaxItersReached)
                    );
                }
                value = state.get_best_cost();
                x = state
                    .get_best_param()
                    .cloned()
                    .ok_or_else(|| FockError::Optimizer("no parameter returned".into()))?;
            }
            Ok((value, converged, x))
        })
        .collect();

    let mut best: Option<(usize, f64, bool, Vec<f64>)> = None;
    for (restart, run) in runs.into_iter().enumerate() {
        let (value, converged, x) = run?;
        if best.as_ref().is_none_or(|b| value < b.1) {
            best = Some((restart, value, converged, x));
        }
    }
    let (restart, value, converged, x) = best.expect("at least one restart");
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let psi: Vec<Complex64> = unpack(&x).into_iter().map(|z| z / norm).collect();
    let energy = ops.hamiltonian.expectation(&psi).re;
    let c = ops.uniform.expectation(&psi).re;
    let off: f64 = ops
        .shifted
        .iter()
        .map(|op| op.expectation(&psi).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let state = FockState::new(basis, psi)?;
    let leaked_norm = state.top_sector_weight();
    Ok(OracleGroundState {
        energy: nf * energy,
        constraint_value: nf * c,
        constraint_residual: nf * ((c - target).abs() + off),
        penalized_objective: value,
        state,
        leaked_norm,
        converged,
        restart,
    })
}
