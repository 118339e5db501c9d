//! Constrained variational solver on a momentum grid.
//!
//! With the off-diagonal part of `B` set to zero the constraint
//! `1 + A ⪰ √(1 + B²)` is saturated by `A = √(1 + B²) − 1`, and each mode
//! is described by one real number. We parametrize by the unconstrained
//! `b_k = B(k,k)` through
//!
//! ```text
//! Q = √(1 + b²) − 1 + b ∈ (−1, ∞)
//! ```
//!
//! and minimize
//!
//! ```text
//! E(Q) = N Σ_k w_k ε_k Q_k² / (2(1 + Q_k))     subject to
//! C(Q) = N Σ_k w_k Q_k / (2 ε_k) = R²
//! ```
//!
//! by an augmented Lagrangian with a modified Newton inner loop. At the
//! optimum every mode satisfies `Q_k = ε_k/√(ε_k² − λ) − 1` with one
//! multiplier `λ = dE/dR²`.
//!
//! Modes outside the cutoff box can optionally be treated analytically
//! ("far field"): in one and two spatial dimensions the exterior of
//! `[−k_max, k_max]^dim` is assigned the profile at a common multiplier
//! `τ`, which enters the optimization as one extra variable.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gap::{Cutoff, GapError, GapModel};
use crate::kernel::{HermitianKernel, KernelError};
use crate::lattice::{dispersion, Dispersion, LatticeError, MomentumGrid};
use crate::numerics::{integrate, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("invalid solver option: {0}")]
    Options(String),
    #[error("mode {mode}: Q = {q} is not above -1")]
    Domain { mode: usize, q: f64 },
    #[error("vector has length {got}, grid has {expected} modes")]
    Length { got: usize, expected: usize },
    #[error("far-field correction is only available for 1 and 2 spatial dimensions (got {0})")]
    FarField(usize),
    #[error("mode pair ({0}, {1}) is invalid")]
    ModePair(usize, usize),
    #[error("dense check limited to {max} modes (grid has {got})")]
    TooLarge { got: usize, max: usize },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Gap(#[from] GapError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Grid, mass, number of components and sphere radius.
#[derive(Debug, Clone)]
pub struct VariationalProblem {
    grid: Arc<MomentumGrid>,
    dispersion: Dispersion,
    n_components: u32,
    r2: f64,
}

impl VariationalProblem {
    pub fn new(
        grid: Arc<MomentumGrid>,
        mu: f64,
        n_components: u32,
        r2: f64,
    ) -> Result<Self, SolverError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(SolverError::Problem(format!(
                "μ must be positive and finite (got {mu})"
            )));
        }
        if n_components == 0 {
            return Err(SolverError::Problem("N must be at least 1".into()));
        }
        if !(r2 >= 0.0 && r2.is_finite()) {
            return Err(SolverError::Problem(format!(
                "R² must be finite and nonnegative (got {r2})"
            )));
        }
        let dispersion = dispersion(&grid, mu)?;
        Ok(VariationalProblem {
            grid,
            dispersion,
            n_components,
            r2,
        })
    }

    pub fn with_r2(&self, r2: f64) -> Result<Self, SolverError> {
        Self::new(Arc::clone(&self.grid), self.mu(), self.n_components, r2)
    }

    pub fn grid(&self) -> &Arc<MomentumGrid> {
        &self.grid
    }

    pub fn mu(&self) -> f64 {
        self.dispersion.mu()
    }

    pub fn n_components(&self) -> u32 {
        self.n_components
    }

    pub fn r2(&self) -> f64 {
        self.r2
    }

    pub fn epsilon(&self) -> &[f64] {
        self.dispersion.epsilon()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Energy coefficient `N w_k ε_k / 2`.
    fn alpha(&self, k: usize) -> f64 {
        self.n_components as f64 * self.grid.weights()[k] * self.epsilon()[k] / 2.0
    }

    /// Constraint coefficient `N w_k / (2 ε_k)`.
    fn gamma(&self, k: usize) -> f64 {
        self.n_components as f64 * self.grid.weights()[k] / (2.0 * self.epsilon()[k])
    }

    fn check_len(&self, v: &[f64]) -> Result<(), SolverError> {
        if v.len() != self.len() {
            return Err(SolverError::Length {
                got: v.len(),
                expected: self.len(),
            });
        }
        Ok(())
    }

    fn check_q(&self, q: &[f64]) -> Result<(), SolverError> {
        self.check_len(q)?;
        match q.iter().position(|&x| !(x > -1.0 && x.is_finite())) {
            Some(mode) => Err(SolverError::Domain { mode, q: q[mode] }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    /// Relative: `|C − R²| ≤ feasibility_tol · R²`.
    pub feasibility_tol: f64,
    /// Inner stationarity, measured as the spread of the per-mode
    /// multiplier estimates relative to `μ²`.
    pub grad_tol: f64,
    pub penalty_growth: f64,
    pub multistart_count: usize,
    pub seed: u64,
    /// Treat modes outside the cutoff box analytically.
    pub far_field: bool,
    /// Positive factor applied to the objective. Leaves the minimizer
    /// unchanged; only the raw multiplier scales with it.
    pub objective_scale: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_outer_iters: 60,
            max_inner_iters: 200,
            feasibility_tol: 1e-8,
            grad_tol: 1e-8,
            penalty_growth: 10.0,
            multistart_count: 1,
            seed: 0,
            far_field: true,
            objective_scale: 1.0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::Options(m.to_string()));
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return bad("iteration limits must be at least 1");
        }
        if !(self.feasibility_tol > 0.0 && self.feasibility_tol.is_finite()) {
            return bad("feasibility_tol must be positive");
        }
        if !(self.grad_tol > 0.0 && self.grad_tol.is_finite()) {
            return bad("grad_tol must be positive");
        }
        if !(self.penalty_growth > 1.0 && self.penalty_growth.is_finite()) {
            return bad("penalty_growth must exceed 1");
        }
        if self.multistart_count == 0 {
            return bad("multistart_count must be at least 1");
        }
        if !(self.objective_scale > 0.0 && self.objective_scale.is_finite()) {
            return bad("objective_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalSolution {
    pub q: Vec<f64>,
    pub b_diag: Vec<f64>,
    /// Multiplier fitted to the converged profile.
    pub lambda: f64,
    /// Raw augmented-Lagrangian multiplier (scales with `objective_scale`).
    pub multiplier: f64,
    /// Unscaled energy, grid plus exterior.
    pub energy: f64,
    /// Constraint value, grid plus exterior.
    pub constraint_value: f64,
    pub exterior_energy: f64,
    pub exterior_constraint: f64,
    /// Exterior multiplier `τ`, zero without the far-field term.
    pub exterior_multiplier: f64,
    pub condensate_density: f64,
    /// `max_k |Q_k − (ε_k/√(ε_k² − λ) − 1)|` at the fitted `λ`.
    pub fit_residual: f64,
    /// `|C − R²|`.
    pub feasibility: f64,
    pub stationarity: f64,
    pub converged: bool,
    /// Total inner (Newton) iterations.
    pub iterations: usize,
    pub outer_iterations: usize,
}

/// `Q(b) = √(1 + b²) − 1 + b`, evaluated without cancellation.
pub fn q_from_b(b: f64) -> f64 {
    let s = (1.0 + b * b).sqrt();
    if b >= 0.0 {
        b * b / (s + 1.0) + b
    } else {
        (b - b * b / (s + 1.0)) / (s - b)
    }
}

/// Inverse of [`q_from_b`]: `b = Q(2 + Q) / (2(1 + Q))`.
pub fn b_from_q(q: f64) -> f64 {
    q * (2.0 + q) / (2.0 * (1.0 + q))
}

/// `(Q, dQ/db, d²Q/db²)`.
fn q_derivs(b: f64) -> (f64, f64, f64) {
    let s = (1.0 + b * b).sqrt();
    let q = q_from_b(b);
    (q, (1.0 + q) / s, 1.0 / (s * s * s))
}

/// `N Σ w ε Q²/(2(1+Q))`.
pub fn objective(q: &[f64], problem: &VariationalProblem) -> Result<f64, SolverError> {
    problem.check_q(q)?;
    Ok(q.iter()
        .enumerate()
        .map(|(k, &x)| problem.alpha(k) * x * x / (1.0 + x))
        .sum())
}

/// `N Σ w Q / (2ε)`.
pub fn constraint_value(q: &[f64], problem: &VariationalProblem) -> Result<f64, SolverError> {
    problem.check_q(q)?;
    Ok(q.iter()
        .enumerate()
        .map(|(k, &x)| problem.gamma(k) * x)
        .sum())
}

/// Gradient of [`objective`] with respect to `b_diag`.
pub fn objective_gradient_b(
    b: &[f64],
    problem: &VariationalProblem,
) -> Result<Vec<f64>, SolverError> {
    problem.check_len(b)?;
    Ok(b.iter()
        .enumerate()
        .map(|(k, &bk)| {
            let (q, dq, _) = q_derivs(bk);
            let inv = 1.0 / (1.0 + q);
            problem.alpha(k) * (1.0 - inv * inv) * dq
        })
        .collect())
}

/// Gradient of [`constraint_value`] with respect to `b_diag`.
pub fn constraint_gradient_b(
    b: &[f64],
    problem: &VariationalProblem,
) -> Result<Vec<f64>, SolverError> {
    problem.check_len(b)?;
    Ok(b.iter()
        .enumerate()
        .map(|(k, &bk)| problem.gamma(k) * q_derivs(bk).1)
        .collect())
}

/// Analytic treatment of the modes outside `[−L, L]^dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarField {
    dim: usize,
    l: f64,
    mu: f64,
    n: f64,
}

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

impl FarField {
    pub fn new(dim: usize, k_max: f64, mu: f64, n_components: u32) -> Result<Self, SolverError> {
        if dim == 0 || dim > 2 {
            return Err(SolverError::FarField(dim));
        }
        Ok(FarField {
            dim,
            l: k_max,
            mu,
            n: n_components as f64,
        })
    }

    /// Largest admissible `τ` (exclusive): the smallest exterior `ε²`.
    pub fn tau_limit(&self) -> f64 {
        self.l * self.l + self.mu * self.mu
    }

    fn octants<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64, SolverError> {
        let r = |t: f64| {
            let c = t.cos();
            f(self.l / c)
        };
        Ok(8.0 * integrate(r, 0.0, std::f64::consts::FRAC_PI_4, 2, 1e-13, 0.0)?)
    }

    /// Exterior share of the constraint at multiplier `τ`.
    pub fn constraint(&self, tau: f64) -> Result<f64, SolverError> {
        let mu_sq = self.mu * self.mu;
        match self.dim {
            1 => {
                let e = (self.l * self.l + mu_sq).sqrt();
                let s = (self.l * self.l + mu_sq - tau).sqrt();
                Ok(self.n / TWO_PI * (tau / ((e + s) * (self.l + s))).ln_1p())
            }
            _ => {
                let v = self.octants(|r| {
                    let e = (r * r + mu_sq).sqrt();
                    let s = (r * r + mu_sq - tau).sqrt();
                    tau / (e + s)
                })?;
                Ok(self.n * v / (2.0 * TWO_PI * TWO_PI))
            }
        }
    }

    pub fn constraint_derivative(&self, tau: f64) -> Result<f64, SolverError> {
        let mu_sq = self.mu * self.mu;
        match self.dim {
            1 => {
                let s = (self.l * self.l + mu_sq - tau).sqrt();
                Ok(self.n / TWO_PI / (2.0 * s * (self.l + s)))
            }
            _ => {
                let v = self.octants(|r| 0.5 / (r * r + mu_sq - tau).sqrt())?;
                Ok(self.n * v / (2.0 * TWO_PI * TWO_PI))
            }
        }
    }

    /// Exterior energy at multiplier `τ`, with `dE/dτ = τ·dC/dτ`.
    pub fn energy(&self, tau: f64) -> Result<f64, SolverError> {
        let mu_sq = self.mu * self.mu;
        match self.dim {
            1 => {
                if tau == 0.0 {
                    return Ok(0.0);
                }
                let l = self.l;
                let v = integrate(
                    |t| {
                        let s = (l * l + mu_sq - t).sqrt();
                        t / (2.0 * s * (l + s))
                    },
                    0.0,
                    tau,
                    1,
                    1e-13,
                    0.0,
                )?;
                Ok(self.n / TWO_PI * v)
            }
            _ => {
                let v = self.octants(|r| {
                    let e = (r * r + mu_sq).sqrt();
                    let s = (r * r + mu_sq - tau).sqrt();
                    tau * tau * (2.0 * e + s) / (6.0 * (e + s) * (e + s))
                })?;
                Ok(self.n * v / (TWO_PI * TWO_PI))
            }
        }
    }
}

/// Lattice constants `lim (Σ_{j≠0} 1/|j| − ∫ d^D x/|x|)` over cubes
/// `[−M−½, M+½]^D`, for `D = 2, 3`.
pub const LATTICE_ZETA_2: f64 = -3.900_264_920_001_955;
pub const LATTICE_ZETA_3: f64 = -2.313_698_7;

/// Share of the constraint that the zero-mode cell carries in the
/// continuum limit at `λ = μ²` because the `k ≠ 0` grid sum undercounts
/// the `1/(2|k|)` singularity.
pub fn zero_mode_regular_part(grid: &MomentumGrid, n_components: u32) -> f64 {
    let ds = grid.dim_spatial();
    let z = match ds {
        2 => LATTICE_ZETA_2,
        3 => LATTICE_ZETA_3,
        _ => return 0.0,
    };
    n_components as f64 * (-z) * grid.spacing().powi(ds as i32 - 1) / (2.0 * TWO_PI.powi(ds as i32))
}

struct Evaluation {
    lagrangian: f64,
    energy: f64,
    exterior_energy: f64,
    constraint: f64,
    exterior_constraint: f64,
}

struct Workspace<'a> {
    problem: &'a VariationalProblem,
    far: Option<FarField>,
    scale: f64,
}

impl Workspace<'_> {
    fn evaluate(
        &self,
        b: &[f64],
        tau: f64,
        nu: f64,
        rho: f64,
    ) -> Result<Option<Evaluation>, SolverError> {
        let p = self.problem;
        let (mut energy, mut constraint) = (0.0, 0.0);
        for (k, &bk) in b.iter().enumerate() {
            let q = q_from_b(bk);
            energy += p.alpha(k) * q * q / (1.0 + q);
            constraint += p.gamma(k) * q;
        }
        let (mut e_ext, mut c_ext) = (0.0, 0.0);
        if let Some(far) = &self.far {
            if !(tau < far.tau_limit()) {
                return Ok(None);
            }
            e_ext = far.energy(tau)?;
            c_ext = far.constraint(tau)?;
        }
        let c = constraint + c_ext;
        let r = c - p.r2;
        let lagrangian = self.scale * (energy + e_ext) - nu * r + 0.5 * rho * r * r;
        if !lagrangian.is_finite() {
            return Ok(None);
        }
        Ok(Some(Evaluation {
            lagrangian,
            energy,
            exterior_energy: e_ext,
            constraint: c,
            exterior_constraint: c_ext,
        }))
    }

    /// Newton minimization of the augmented Lagrangian in `(b, τ)`.
    /// Returns (iterations, final stationarity).
    fn inner(
        &self,
        b: &mut [f64],
        tau: &mut f64,
        nu: f64,
        rho: f64,
        max_iters: usize,
        tol: f64,
    ) -> Result<(usize, f64), SolverError> {
        let p = self.problem;
        let n = b.len();
        let lambda_scale = self.scale * p.mu() * p.mu();
        let mut g = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut u = vec![0.0; n];
        let mut stationarity = f64::INFINITY;
        for iter in 0..max_iters {
            let cur = match self.evaluate(b, *tau, nu, rho)? {
                Some(e) => e,
                None => return Err(SolverError::Options("iterate left the domain".into())),
            };
            let r = cur.constraint - p.r2;
            let nu_eff = nu - rho * r;
            stationarity = 0.0f64;
            for k in 0..n {
                let (q, dq, d2q) = q_derivs(b[k]);
                let inv = 1.0 / (1.0 + q);
                let alpha = self.scale * p.alpha(k);
                let gamma = p.gamma(k);
                let de = alpha * (1.0 - inv * inv);
                let lam_k = de / gamma;
                stationarity = stationarity.max((lam_k - nu_eff).abs());
                let coef = de - nu_eff * gamma;
                g[k] = coef * dq;
                d[k] = 2.0 * alpha * inv * inv * inv * dq * dq + coef.max(0.0) * d2q;
                u[k] = gamma * dq;
            }
            let (mut g_t, mut d_t, mut u_t) = (0.0, 0.0, 0.0);
            if let Some(far) = &self.far {
                let dc = far.constraint_derivative(*tau)?;
                stationarity = stationarity.max((self.scale * *tau - nu_eff).abs());
                g_t = (self.scale * *tau - nu_eff) * dc;
                d_t = self.scale * dc;
                u_t = dc;
            }
            stationarity /= lambda_scale;
            if stationarity <= tol {
                return Ok((iter, stationarity));
            }
            // (D + ρ u uᵀ) p = −g by Sherman–Morrison
            let mut dinv_g: Vec<f64> = (0..n).map(|k| g[k] / d[k]).collect();
            let dinv_u: Vec<f64> = (0..n).map(|k| u[k] / d[k]).collect();
            let (mut ug, mut uu) = (0.0, 0.0);
            for k in 0..n {
                ug += u[k] * dinv_g[k];
                uu += u[k] * dinv_u[k];
            }
            let (dg_t, du_t) = if self.far.is_some() {
                (g_t / d_t, u_t / d_t)
            } else {
                (0.0, 0.0)
            };
            ug += u_t * dg_t;
            uu += u_t * du_t;
            let factor = rho * ug / (1.0 + rho * uu);
            for k in 0..n {
                dinv_g[k] = -(dinv_g[k] - dinv_u[k] * factor);
            }
            let step = dinv_g;
            let step_t = -(dg_t - du_t * factor);
            let slope: f64 = (0..n).map(|k| g[k] * step[k]).sum::<f64>() + g_t * step_t;
            if !(slope < 0.0) {
                return Ok((iter, stationarity));
            }

            let mut t = 1.0;
            let mut trial_b = b.to_vec();
            let mut accepted = false;
            for _ in 0..60 {
                for k in 0..n {
                    trial_b[k] = b[k] + t * step[k];
                }
                let trial_tau = *tau + t * step_t;
                if let Some(e) = self.evaluate(&trial_b, trial_tau, nu, rho)? {
                    if e.lagrangian <= cur.lagrangian + 1e-4 * t * slope {
                        b.copy_from_slice(&trial_b);
                        *tau = trial_tau;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                // no representable decrease left
                return Ok((iter + 1, stationarity));
            }
        }
        Ok((max_iters, stationarity))
    }
}

struct RunOutcome {
    b: Vec<f64>,
    tau: f64,
    nu: f64,
    converged: bool,
    iterations: usize,
    outer: usize,
    stationarity: f64,
}

fn run_from(
    ws: &Workspace<'_>,
    mut b: Vec<f64>,
    opts: &SolverOptions,
) -> Result<RunOutcome, SolverError> {
    let p = ws.problem;
    let r2 = p.r2;
    // multiplier estimate from the starting profile
    let (mut num, mut den) = (0.0, 0.0);
    for (k, &bk) in b.iter().enumerate() {
        let q = q_from_b(bk);
        let inv = 1.0 / (1.0 + q);
        num += p.alpha(k) * (1.0 - inv * inv);
        den += p.gamma(k);
    }
    let mu_sq = p.mu() * p.mu();
    let mut nu = ws.scale * (num / den).min(mu_sq);
    let mut tau = nu / ws.scale;
    let mut rho = 10.0 * ws.scale * mu_sq / r2;
    let mut prev_r = f64::INFINITY;
    let mut iterations = 0;
    let mut stationarity = f64::INFINITY;
    for outer in 1..=opts.max_outer_iters {
        let (its, st) = ws.inner(
            &mut b,
            &mut tau,
            nu,
            rho,
            opts.max_inner_iters,
            opts.grad_tol,
        )?;
        iterations += its;
        stationarity = st;
        let e = ws
            .evaluate(&b, tau, nu, rho)?
            .ok_or_else(|| SolverError::Options("iterate left the domain".into()))?;
        let r = e.constraint - r2;
        if r.abs() <= opts.feasibility_tol * r2 && st <= opts.grad_tol {
            return Ok(RunOutcome {
                b,
                tau,
                nu: nu - rho * r,
                converged: true,
                iterations,
                outer,
                stationarity,
            });
        }
        nu -= rho * r;
        if r.abs() > 0.25 * prev_r {
            rho *= opts.penalty_growth;
        }
        prev_r = r.abs();
    }
    Ok(RunOutcome {
        b,
        tau,
        nu,
        converged: false,
        iterations,
        outer: opts.max_outer_iters,
        stationarity,
    })
}

/// Least-squares fit of `λ` in `Q_k ≈ ε_k/√(ε_k² − λ) − 1`, by
/// Gauss–Newton from `start`. Returns `(λ, max abs residual)`.
pub fn fit_lambda(q: &[f64], epsilon: &[f64], weights: &[f64], start: f64) -> (f64, f64) {
    let min_eps_sq = epsilon.iter().fold(f64::INFINITY, |m, &e| m.min(e * e));
    let cap = min_eps_sq * (1.0 - 1e-15);
    let profile = |lambda: f64, e: f64| {
        let s = (e * e - lambda).sqrt();
        lambda / (s * (e + s))
    };
    let sse = |lambda: f64| -> f64 {
        q.iter()
            .zip(epsilon)
            .zip(weights)
            .map(|((&qk, &e), &w)| w * (qk - profile(lambda, e)).powi(2))
            .sum()
    };
    let mut lambda = start.min(cap);
    let mut cur = sse(lambda);
    for _ in 0..100 {
        let (mut num, mut den) = (0.0, 0.0);
        for ((&qk, &e), &w) in q.iter().zip(epsilon).zip(weights) {
            let s = (e * e - lambda).sqrt();
            let jac = e / (2.0 * s * s * s);
            num += w * (qk - profile(lambda, e)) * jac;
            den += w * jac * jac;
        }
        if den == 0.0 {
            break;
        }
        let step = num / den;
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-12 {
            let trial = lambda + t * step;
            if trial < cap {
                let v = sse(trial);
                if v <= cur {
                    moved = trial != lambda;
                    lambda = trial;
                    cur = v;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved || (t * step).abs() <= 1e-15 * lambda.abs().max(min_eps_sq) {
            break;
        }
    }
    let resid = q.iter().zip(epsilon).fold(0.0f64, |m, (&qk, &e)| {
        m.max((qk - profile(lambda, e)).abs())
    });
    (lambda, resid)
}

fn critical_r2(problem: &VariationalProblem, far_field: bool) -> Result<Option<f64>, SolverError> {
    let grid = problem.grid();
    let (mu, n) = (problem.mu(), problem.n_components());
    let model = match (grid.dim_spatial(), far_field) {
        (2, true) => GapModel::new(mu, n, 3)?,
        (2, false) => GapModel::with_cutoff(
            mu,
            n,
            3,
            Cutoff::Hard {
                k_max: grid.k_max(),
            },
        )?,
        (3, _) => GapModel::with_cutoff(
            mu,
            n,
            4,
            Cutoff::Hard {
                k_max: grid.k_max(),
            },
        )?,
        _ => return Ok(None),
    };
    let rc2 = model.critical_radius()?;
    Ok(rc2.is_finite().then_some(rc2))
}

/// Zero-mode constraint share minus its regular part, when `R²` exceeds
/// the continuum capacity; zero otherwise.
fn extract_condensate(
    problem: &VariationalProblem,
    q: &[f64],
    far_field: bool,
) -> Result<f64, SolverError> {
    let Some(zero) = problem.grid().zero_mode() else {
        return Ok(0.0);
    };
    let Some(rc2) = critical_r2(problem, far_field)? else {
        return Ok(0.0);
    };
    if problem.r2() <= rc2 {
        return Ok(0.0);
    }
    let share = problem.gamma(zero) * q[zero];
    Ok((share - zero_mode_regular_part(problem.grid(), problem.n_components())).max(0.0))
}

/// Starting point `Q_k ∝ 1/ε_k`, normalized to the grid constraint.
fn initial_b(problem: &VariationalProblem) -> Vec<f64> {
    let eps = problem.epsilon();
    let norm: f64 = (0..problem.len()).map(|k| problem.gamma(k) / eps[k]).sum();
    let t = problem.r2() / norm;
    eps.iter().map(|&e| b_from_q(t / e)).collect()
}

/// Minimize the energy at fixed `R²` over diagonal profiles.
pub fn minimize_constrained(
    problem: &VariationalProblem,
    opts: &SolverOptions,
) -> Result<VariationalSolution, SolverError> {
    opts.validate()?;
    let grid = problem.grid();
    let far = if opts.far_field {
        Some(FarField::new(
            grid.dim_spatial(),
            grid.k_max(),
            problem.mu(),
            problem.n_components(),
        )?)
    } else {
        None
    };
    let n = problem.len();
    if problem.r2() == 0.0 {
        return Ok(VariationalSolution {
            q: vec![0.0; n],
            b_diag: vec![0.0; n],
            lambda: 0.0,
            multiplier: 0.0,
            energy: 0.0,
            constraint_value: 0.0,
            exterior_energy: 0.0,
            exterior_constraint: 0.0,
            exterior_multiplier: 0.0,
            condensate_density: 0.0,
            fit_residual: 0.0,
            feasibility: 0.0,
            stationarity: 0.0,
            converged: true,
            iterations: 0,
            outer_iterations: 0,
        });
    }
    let ws = Workspace {
        problem,
        far,
        scale: opts.objective_scale,
    };
    let base = initial_b(problem);
    let mut best: Option<(RunOutcome, f64)> = None;
    for start in 0..opts.multistart_count {
        let b0 = if start == 0 {
            base.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(start as u64));
            base.iter()
                .map(|&b| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    b_from_q(q_from_b(b) * (0.5 * z).exp())
                })
                .collect()
        };
        let run = run_from(&ws, b0, opts)?;
        let e = ws
            .evaluate(&run.b, run.tau, 0.0, 0.0)?
            .map_or(f64::INFINITY, |e| e.energy + e.exterior_energy);
        let better = match &best {
            None => true,
            Some((prev, pe)) => {
                (run.converged && !prev.converged) || (run.converged == prev.converged && e < *pe)
            }
        };
        if better {
            best = Some((run, e));
        }
    }
    let (run, _) = best.expect("at least one start");
    let ev = ws
        .evaluate(&run.b, run.tau, 0.0, 0.0)?
        .ok_or_else(|| SolverError::Options("final iterate left the domain".into()))?;
    let q: Vec<f64> = run.b.iter().map(|&b| q_from_b(b)).collect();
    let (lambda, fit_residual) = fit_lambda(
        &q,
        problem.epsilon(),
        grid.weights(),
        run.nu / opts.objective_scale,
    );
    let condensate_density = extract_condensate(problem, &q, opts.far_field)?;
    let feasibility = (ev.constraint - problem.r2()).abs();
    if !run.converged {
        log::warn!(
            "solver did not converge: |C − R²| = {feasibility:e}, stationarity {:e} after {} outer iterations",
            run.stationarity,
            run.outer
        );
    }
    Ok(VariationalSolution {
        q,
        b_diag: run.b,
        lambda,
        multiplier: run.nu,
        energy: ev.energy + ev.exterior_energy,
        constraint_value: ev.constraint,
        exterior_energy: ev.exterior_energy,
        exterior_constraint: ev.exterior_constraint,
        exterior_multiplier: if ws.far.is_some() { run.tau } else { 0.0 },
        condensate_density,
        fit_residual,
        feasibility,
        stationarity: run.stationarity,
        converged: run.converged,
        iterations: run.iterations,
        outer_iterations: run.outer,
    })
}

/// Largest grid for the dense matrix checks.
pub const DENSE_LIMIT: usize = 2048;

/// Grid energy and constraint of a full (non-diagonal) `B` kernel with
/// `A = √(1 + B²) − 1`.
fn dense_energy_constraint(
    b: &HermitianKernel,
    problem: &VariationalProblem,
) -> Result<(f64, f64), SolverError> {
    let root = b.square().shift(1.0).sqrt_psd()?;
    let a = root.shift(-1.0);
    let nf = problem.n_components() as f64;
    let eps = problem.epsilon();
    let energy = nf * a.trace_weighted(eps)?;
    let inv: Vec<f64> = eps.iter().map(|e| 0.5 / e).collect();
    let constraint = nf * a.add(b)?.trace_weighted(&inv)?;
    Ok((energy, constraint))
}

/// Objective change from a hermitian off-diagonal perturbation `δ` at
/// `(k, k')` of the diagonal `B`, after restoring the uniform constraint
/// with a diagonal shift along its gradient. Both energies are computed
/// through the full matrix square root; exterior modes are held fixed.
pub fn check_diagonal_optimality(
    solution: &VariationalSolution,
    problem: &VariationalProblem,
    mode_pair: (usize, usize),
    delta: Complex64,
) -> Result<f64, SolverError> {
    let n = problem.len();
    let (k, kp) = mode_pair;
    if k == kp || k >= n || kp >= n {
        return Err(SolverError::ModePair(k, kp));
    }
    if n > DENSE_LIMIT {
        return Err(SolverError::TooLarge {
            got: n,
            max: DENSE_LIMIT,
        });
    }
    problem.check_len(&solution.b_diag)?;
    let grid = Arc::clone(problem.grid());
    let build = |diag: &[f64], off: Complex64| -> Result<HermitianKernel, SolverError> {
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = Complex64::new(v, 0.0);
        }
        m[(k, kp)] = off;
        m[(kp, k)] = off.conj();
        Ok(HermitianKernel::new(Arc::clone(&grid), m)?)
    };
    let (e0, c0) =
        dense_energy_constraint(&build(&solution.b_diag, Complex64::new(0.0, 0.0))?, problem)?;
    if delta == Complex64::new(0.0, 0.0) {
        return Ok(0.0);
    }
    let grad = constraint_gradient_b(&solution.b_diag, problem)?;
    let slope: f64 = grad.iter().map(|g| g * g).sum();
    let mut diag = solution.b_diag.clone();
    let (mut e, mut c) = dense_energy_constraint(&build(&diag, delta)?, problem)?;
    for _ in 0..30 {
        let r = c - c0;
        if r.abs() <= 1e-15 * c0.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        let t = -r / slope;
        for (d, g) in diag.iter_mut().zip(&grad) {
            *d += t * g;
        }
        (e, c) = dense_energy_constraint(&build(&diag, delta)?, problem)?;
    }
    Ok(e - e0)
}

/// First-order factor `1 − ε_k²/ε_k'²` of the off-diagonal variation;
/// exactly zero on degenerate pairs.
pub fn variation_prefactor(eps_k: f64, eps_kp: f64) -> f64 {
    1.0 - (eps_k * eps_k) / (eps_kp * eps_kp)
}

/// `max_{K≠0} |Σ_k N w_k Q(k, k+K) / (2√(ε_k ε_{k+K}))|` over the nonzero
/// off-diagonal entries `(k, k', Q(k, k'))` of a profile matrix.
pub fn offdiagonal_violation<I>(entries: I, problem: &VariationalProblem) -> f64
where
    I: IntoIterator<Item = (usize, usize, Complex64)>,
{
    let grid = problem.grid();
    let eps = problem.epsilon();
    let nf = problem.n_components() as f64;
    let mut sums: HashMap<Vec<i64>, Complex64> = HashMap::new();
    for (k, kp, v) in entries {
        if k == kp {
            continue;
        }
        let shift: Vec<i64> = grid
            .doubled_coords(kp)
            .iter()
            .zip(grid.doubled_coords(k))
            .map(|(a, b)| a - b)
            .collect();
        let coef = nf * grid.weights()[k] / (2.0 * (eps[k] * eps[kp]).sqrt());
        *sums.entry(shift).or_default() += v * coef;
    }
    sums.values().fold(0.0f64, |m, z| m.max(z.norm()))
}

/// [`offdiagonal_violation`] of a dense profile matrix.
pub fn offdiagonal_violation_dense(q: &HermitianKernel, problem: &VariationalProblem) -> f64 {
    let n = q.dim();
    let entries = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && q.get(i, j) != Complex64::new(0.0, 0.0))
        .map(|(i, j)| (i, j, q.get(i, j)));
    offdiagonal_violation(entries, problem)
}

/// Off-diagonal constraint violation of a solution. Solutions are diagonal
/// by construction, so the entry list is empty and the value is exactly 0.
pub fn check_offdiagonal_constraint(
    solution: &VariationalSolution,
    problem: &VariationalProblem,
) -> f64 {
    let _ = solution;
    offdiagonal_violation(std::iter::empty(), problem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gap::analytic_q;
    use crate::lattice::build_grid;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn single_mode() -> Arc<MomentumGrid> {
        // k_max = π, one zero mode, weight (2π/2π) = 1
        Arc::new(build_grid(1, PI, 1, true).unwrap())
    }

    #[test]
    fn q_b_map_round_trips() {
        for &b in &[-1e3, -5.0, -1.0, -1e-9, 0.0, 1e-9, 0.5, 3.0, 1e4] {
            let q = q_from_b(b);
            let direct = (1.0f64 + b * b).sqrt() - 1.0 + b;
            assert!(q > -1.0);
            if b.abs() < 1e3 {
                assert!((q - direct).abs() <= 1e-10 * (1.0 + direct.abs()));
            }
            assert_relative_eq!(b_from_q(q), b, max_relative = 1e-12, epsilon = 1e-300);
        }
    }

    #[test]
    fn objective_examples() {
        let g = single_mode();
        let p = VariationalProblem::new(Arc::clone(&g), 1.0, 1, 0.0).unwrap();
        assert_eq!(objective(&[0.0], &p).unwrap(), 0.0);
        // w = 1, ε = 1, N = 1, Q = 1: ε Q²/(2(1+Q)) = 1/4
        assert_relative_eq!(objective(&[1.0], &p).unwrap(), 0.25, max_relative = 1e-15);
        assert!(matches!(
            objective(&[-1.0], &p),
            Err(SolverError::Domain { mode: 0, .. })
        ));
        assert!(matches!(
            objective(&[0.0, 0.0], &p),
            Err(SolverError::Length { .. })
        ));
    }

    #[test]
    fn constraint_examples() {
        let g = single_mode();
        let p = VariationalProblem::new(g, 2.0, 1, 0.0).unwrap();
        assert_eq!(constraint_value(&[0.0], &p).unwrap(), 0.0);
        // w = 1, ε = 2, Q = 1: Q/(2ε) = 1/4
        assert_relative_eq!(
            constraint_value(&[1.0], &p).unwrap(),
            0.25,
            max_relative = 1e-15
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = Arc::new(build_grid(2, 3.0, 5, true).unwrap());
        let p = VariationalProblem::new(g, 1.3, 2, 0.1).unwrap();
        let b: Vec<f64> = (0..p.len())
            .map(|i| ((i as f64) * 0.37).sin() * 2.0)
            .collect();
        let ge = objective_gradient_b(&b, &p).unwrap();
        let gc = constraint_gradient_b(&b, &p).unwrap();
        let h = 1e-6;
        for k in 0..p.len() {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[k] += h;
            bm[k] -= h;
            let qp: Vec<f64> = bp.iter().map(|&x| q_from_b(x)).collect();
            let qm: Vec<f64> = bm.iter().map(|&x| q_from_b(x)).collect();
            let fe = (objective(&qp, &p).unwrap() - objective(&qm, &p).unwrap()) / (2.0 * h);
            let fc = (constraint_value(&qp, &p).unwrap() - constraint_value(&qm, &p).unwrap())
                / (2.0 * h);
            assert_relative_eq!(ge[k], fe, max_relative = 1e-6, epsilon = 1e-12);
            assert_relative_eq!(gc[k], fc, max_relative = 1e-6, epsilon = 1e-12);
        }
    }

    #[test]
    fn far_field_matches_direct_quadrature() {
        let (l, mu, tau) = (6.0, 1.2, 1.1);
        let n = 2;
        let nf = n as f64;
        let f1 = FarField::new(1, l, mu, n).unwrap();
        let c1 = |k: f64| {
            let e = (k * k + mu * mu).sqrt();
            let s = (k * k + mu * mu - tau).sqrt();
            tau / (2.0 * s * e * (e + s))
        };
        let e1 = |k: f64| {
            let e = (k * k + mu * mu).sqrt();
            let s = (k * k + mu * mu - tau).sqrt();
            tau * tau / (2.0 * s * (e + s) * (e + s))
        };
        // map [L, ∞) to (0, 1] with k = L/x
        let tail = |f: &dyn Fn(f64) -> f64| {
            integrate(|x: f64| f(l / x) * l / (x * x), 0.0, 1.0, 8, 1e-12, 1e-18).unwrap()
        };
        assert_relative_eq!(
            f1.constraint(tau).unwrap(),
            2.0 * nf * tail(&c1) / TWO_PI,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            f1.energy(tau).unwrap(),
            2.0 * nf * tail(&e1) / TWO_PI,
            max_relative = 1e-9
        );

        let f2 = FarField::new(2, l, mu, n).unwrap();
        let h = 1e-5;
        for far in [f1, f2] {
            let de = (far.energy(tau + h).unwrap() - far.energy(tau - h).unwrap()) / (2.0 * h);
            let dc =
                (far.constraint(tau + h).unwrap() - far.constraint(tau - h).unwrap()) / (2.0 * h);
            assert_relative_eq!(de, tau * dc, max_relative = 1e-6);
            assert_relative_eq!(
                far.constraint_derivative(tau).unwrap(),
                dc,
                max_relative = 1e-6
            );
        }
        assert!(FarField::new(3, l, mu, n).is_err());
    }

    #[test]
    fn far_field_2d_matches_cartesian_quadrature() {
        let (l, mu, tau) = (3.0, 1.0, 0.7);
        let far = FarField::new(2, l, mu, 1).unwrap();
        let integrand = |x: f64, y: f64| {
            let e = (x * x + y * y + mu * mu).sqrt();
            let s = (x * x + y * y + mu * mu - tau).sqrt();
            tau / (2.0 * s * e * (e + s))
        };
        // strip y ∈ [−L, L], x ∈ [L, ∞) (×4) plus corner x, y ≥ L (×4)
        let strip = integrate(
            |y| {
                integrate(
                    |u: f64| integrand(l / u, y) * l / (u * u),
                    0.0,
                    1.0,
                    8,
                    1e-12,
                    1e-18,
                )
                .unwrap()
            },
            -l,
            l,
            8,
            1e-11,
            0.0,
        )
        .unwrap();
        let corner = integrate(
            |v: f64| {
                integrate(
                    |u: f64| integrand(l / u, l / v) * l / (u * u),
                    0.0,
                    1.0,
                    8,
                    1e-12,
                    1e-18,
                )
                .unwrap()
                    * l
                    / (v * v)
            },
            0.0,
            1.0,
            8,
            1e-11,
            0.0,
        )
        .unwrap();
        let direct = 4.0 * (strip + corner) / (TWO_PI * TWO_PI);
        assert_relative_eq!(far.constraint(tau).unwrap(), direct, max_relative = 1e-8);
    }

    #[test]
    fn zero_radius_is_vacuum() {
        let g = Arc::new(build_grid(2, 4.0, 9, true).unwrap());
        let p = VariationalProblem::new(g, 1.0, 1, 0.0).unwrap();
        let s = minimize_constrained(&p, &SolverOptions::default()).unwrap();
        assert!(s.converged);
        assert!(s.q.iter().all(|&q| q == 0.0));
        assert_eq!((s.energy, s.lambda), (0.0, 0.0));
    }

    #[test]
    fn single_mode_solution_is_exact() {
        // one mode: Q fixed by the constraint alone
        let g = single_mode();
        let p = VariationalProblem::new(g, 1.0, 1, 0.25).unwrap();
        let opts = SolverOptions {
            far_field: false,
            ..SolverOptions::default()
        };
        let s = minimize_constrained(&p, &opts).unwrap();
        assert!(s.converged);
        assert_relative_eq!(s.q[0], 0.5, max_relative = 1e-8);
        assert_relative_eq!(s.energy, 0.5 * 0.25 / 1.5, max_relative = 1e-8);
        // λ = ε²(1 − 1/(1+Q)²)
        assert_relative_eq!(s.lambda, 1.0 - 1.0 / 2.25, max_relative = 1e-8);
    }

    #[test]
    fn stationary_profile_matches_analytic_form() {
        let g = Arc::new(build_grid(2, 6.0, 15, true).unwrap());
        let p = VariationalProblem::new(g, 1.0, 1, 0.02).unwrap();
        let s = minimize_constrained(&p, &SolverOptions::default()).unwrap();
        assert!(s.converged);
        assert!(s.fit_residual <= 1e-6, "fit residual {}", s.fit_residual);
        for (k, &e) in p.epsilon().iter().enumerate() {
            assert!((s.q[k] - analytic_q(s.lambda, e).unwrap()).abs() <= 1e-6);
        }
        assert!(s.feasibility <= 1e-8 * p.r2());
        assert_relative_eq!(s.lambda, s.multiplier, max_relative = 1e-6);
        assert_relative_eq!(s.exterior_multiplier, s.lambda, max_relative = 1e-6);
    }

    #[test]
    fn scaling_leaves_minimizer_unchanged() {
        let g = Arc::new(build_grid(2, 5.0, 11, true).unwrap());
        let p = VariationalProblem::new(g, 1.0, 2, 0.05).unwrap();
        let base = minimize_constrained(&p, &SolverOptions::default()).unwrap();
        let scaled = minimize_constrained(
            &p,
            &SolverOptions {
                objective_scale: 37.0,
                ..SolverOptions::default()
            },
        )
        .unwrap();
        for (a, b) in base.q.iter().zip(&scaled.q) {
            assert_relative_eq!(a, b, max_relative = 1e-6, epsilon = 1e-12);
        }
        assert_relative_eq!(
            scaled.multiplier,
            37.0 * base.multiplier,
            max_relative = 1e-6
        );
        assert_relative_eq!(scaled.lambda, base.lambda, max_relative = 1e-7);
    }

    #[test]
    fn multistart_agrees_with_single_start() {
        let g = Arc::new(build_grid(1, 4.0, 9, true).unwrap());
        let p = VariationalProblem::new(g, 1.0, 1, 0.05).unwrap();
        let one = minimize_constrained(&p, &SolverOptions::default()).unwrap();
        let many = minimize_constrained(
            &p,
            &SolverOptions {
                multistart_count: 4,
                seed: 9,
                ..SolverOptions::default()
            },
        )
        .unwrap();
        assert_relative_eq!(one.energy, many.energy, max_relative = 1e-9);
    }

    #[test]
    fn zeta_constant_matches_lattice_sum() {
        // Σ_{j≠0} 1/|j| − ∫ d²x/|x| over [−M−½, M+½]², with
        // ∫ = 8 L ln(1 + √2)
        let m = 300i64;
        let mut sum = 0.0;
        for x in -m..=m {
            for y in -m..=m {
                if x != 0 || y != 0 {
                    sum += 1.0 / ((x * x + y * y) as f64).sqrt();
                }
            }
        }
        let l = m as f64 + 0.5;
        let approx = sum - 8.0 * l * (1.0 + 2f64.sqrt()).ln();
        assert!((approx - LATTICE_ZETA_2).abs() < 1e-3, "{approx}");
    }

    #[test]
    fn diagonal_perturbation_examples() {
        let g = Arc::new(build_grid(1, 4.0, 7, true).unwrap());
        let p = VariationalProblem::new(g, 1.0, 1, 0.05).unwrap();
        let s = minimize_constrained(&p, &SolverOptions::default()).unwrap();
        assert_eq!(
            check_diagonal_optimality(&s, &p, (1, 2), Complex64::new(0.0, 0.0)).unwrap(),
            0.0
        );
        let d = check_diagonal_optimality(&s, &p, (1, 2), Complex64::new(1e-3, 0.0)).unwrap();
        assert!(d > 0.0, "change {d}");
        // k and −k are degenerate: exact zero prefactor, change still ≥ 0
        let (k, kp) = (1, p.grid().reflect(1));
        assert_eq!(variation_prefactor(p.epsilon()[k], p.epsilon()[kp]), 0.0);
        let d = check_diagonal_optimality(&s, &p, (k, kp), Complex64::new(0.0, 1e-3)).unwrap();
        assert!(d >= -1e-14, "change {d}");
        assert!(matches!(
            check_diagonal_optimality(&s, &p, (2, 2), Complex64::new(1e-3, 0.0)),
            Err(SolverError::ModePair(2, 2))
        ));
    }

    #[test]
    fn offdiagonal_constraint_examples() {
        let g = Arc::new(build_grid(1, 3.0, 3, true).unwrap());
        let p = VariationalProblem::new(Arc::clone(&g), 1.0, 1, 0.05).unwrap();
        let s = minimize_constrained(&p, &SolverOptions::default()).unwrap();
        assert_eq!(check_offdiagonal_constraint(&s, &p), 0.0);

        let v = 0.3;
        let entries = vec![(0, 1, Complex64::new(v, 0.0))];
        let eps = p.epsilon();
        let expected = g.weights()[0] * v / (2.0 * (eps[0] * eps[1]).sqrt());
        assert_relative_eq!(
            offdiagonal_violation(entries, &p),
            expected,
            max_relative = 1e-15
        );

        let diag = HermitianKernel::from_diagonal(g, &s.q).unwrap();
        assert_eq!(offdiagonal_violation_dense(&diag, &p), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let g = single_mode();
        assert!(VariationalProblem::new(Arc::clone(&g), 0.0, 1, 0.1).is_err());
        assert!(VariationalProblem::new(Arc::clone(&g), 1.0, 0, 0.1).is_err());
        assert!(VariationalProblem::new(Arc::clone(&g), 1.0, 1, -0.1).is_err());
        let p = VariationalProblem::new(g, 1.0, 1, 0.1).unwrap();
        let bad = SolverOptions {
            penalty_growth: 1.0,
            ..SolverOptions::default()
        };
        assert!(matches!(
            minimize_constrained(&p, &bad),
            Err(SolverError::Options(_))
        ));
        let g3 = Arc::new(build_grid(3, 2.0, 3, true).unwrap());
        let p3 = VariationalProblem::new(g3, 1.0, 1, 0.1).unwrap();
        assert_eq!(
            minimize_constrained(&p3, &SolverOptions::default()).unwrap_err(),
            SolverError::FarField(3)
        );
    }
}
