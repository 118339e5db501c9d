//! Continuum gap equation, critical radius and phase sweeps.
//!
//! Momentum integrals are reduced to one radial quadrature over
//! `k ∈ [0, ∞)` in `d − 1` spatial dimensions, with angular factor
//! `Ω_{d−2}/(2π)^{d−1}`. `d` is always the spacetime dimension.
//!
//! Conventions: the constraint density is `(1/2ε)·Q` and the energy
//! density is `ε·Q²/(2(1+Q))`, so that the multiplier `λ` in
//! `Q = ε/√(ε²−λ) − 1` is exactly `dE/dR²`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{bracketed_root, integrate, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GapError {
    #[error("λ = {lambda} outside [0, μ²) with μ² = {mu_sq}")]
    Domain { lambda: f64, mu_sq: f64 },
    #[error("λ = {lambda} is at or above ε² = {eps_sq}")]
    Singular { lambda: f64, eps_sq: f64 },
    #[error("spacetime dimension {0} is not supported (use 2, 3 or 4)")]
    Dimension(u32),
    #[error("d = 4 is logarithmically divergent and needs an explicit hard cutoff")]
    NeedsHardCutoff,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("R² list must be sorted ascending")]
    Unsorted,
    #[error("gap root finding failed for R² = {r2}: {source}")]
    Root {
        r2: f64,
        #[source]
        source: NumericsError,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `Q = ε/√(ε² − λ) − 1`.
pub fn analytic_q(lambda: f64, epsilon: f64) -> Result<f64, GapError> {
    let eps_sq = epsilon * epsilon;
    if !(lambda < eps_sq) || !lambda.is_finite() {
        return Err(GapError::Singular { lambda, eps_sq });
    }
    let s = (eps_sq - lambda).sqrt();
    // ε/s − 1 = λ / (s (ε + s)), exact at λ = 0
    Ok(lambda / (s * (epsilon + s)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Normal,
    Critical,
    Condensed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Normal => "normal",
            Phase::Critical => "critical",
            Phase::Condensed => "condensed",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMethod {
    ClosedForm2p1,
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSolution {
    pub lambda: f64,
    pub r2: f64,
    pub phase: Phase,
    pub condensate_density: f64,
    /// `|LHS(λ) − R²|` on the normal branch, zero when condensed.
    pub residual: f64,
    pub method: GapMethod,
}

/// Relative width of the critical window: `|R² − R_c²| ≤ CRITICAL_TOL·R_c²`.
pub const CRITICAL_TOL: f64 = 1e-10;

/// Exact 2+1D inversion `(Nμ/4π)(1 − √(1 − λ/μ²)) = R²`.
pub fn closed_form_2p1(mu: f64, n_components: u32, r2: f64) -> Result<GapSolution, GapError> {
    check_mu(mu)?;
    check_n(n_components)?;
    check_r2(r2)?;
    let rc2 = n_components as f64 * mu / (4.0 * std::f64::consts::PI);
    let mu_sq = mu * mu;
    let (lambda, phase, condensate) = if (r2 - rc2).abs() <= CRITICAL_TOL * rc2 {
        (mu_sq, Phase::Critical, (r2 - rc2).max(0.0))
    } else if r2 > rc2 {
        (mu_sq, Phase::Condensed, r2 - rc2)
    } else {
        let x = 1.0 - r2 / rc2;
        (mu_sq * (1.0 - x * x), Phase::Normal, 0.0)
    };
    Ok(GapSolution {
        lambda,
        r2,
        phase,
        condensate_density: condensate,
        residual: 0.0,
        method: GapMethod::ClosedForm2p1,
    })
}

fn check_mu(mu: f64) -> Result<(), GapError> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(GapError::Parameter(format!(
            "μ must be positive and finite (got {mu})"
        )))
    }
}

fn check_n(n: u32) -> Result<(), GapError> {
    if n >= 1 {
        Ok(())
    } else {
        Err(GapError::Parameter("N must be at least 1".into()))
    }
}

fn check_r2(r2: f64) -> Result<(), GapError> {
    if r2 >= 0.0 && r2.is_finite() {
        Ok(())
    } else {
        Err(GapError::Parameter(format!(
            "R² must be finite and nonnegative (got {r2})"
        )))
    }
}

/// Upper end of the radial integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Cutoff {
    /// Integrate numerically up to `k_split`, then add the analytic
    /// large-k expansion of the integrand out to infinity.
    Asymptotic { k_split: f64 },
    /// Plain truncation at `k_max`.
    Hard { k_max: f64 },
}

impl Cutoff {
    pub fn limit(&self) -> f64 {
        match *self {
            Cutoff::Asymptotic { k_split } => k_split,
            Cutoff::Hard { k_max } => k_max,
        }
    }
}

/// Continuum model `(μ, N, d)` with a radial integration cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct GapModel {
    mu: f64,
    n_components: u32,
    d: u32,
    cutoff: Cutoff,
    rel_tol: f64,
}

impl GapModel {
    /// Model with the default asymptotic cutoff at `10³μ`.
    pub fn new(mu: f64, n_components: u32, d: u32) -> Result<Self, GapError> {
        Self::with_cutoff(
            mu,
            n_components,
            d,
            Cutoff::Asymptotic { k_split: 1e3 * mu },
        )
    }

    pub fn with_cutoff(
        mu: f64,
        n_components: u32,
        d: u32,
        cutoff: Cutoff,
    ) -> Result<Self, GapError> {
        check_mu(mu)?;
        check_n(n_components)?;
        if !(2..=4).contains(&d) {
            return Err(GapError::Dimension(d));
        }
        let limit = cutoff.limit();
        if !(limit > 0.0 && limit.is_finite()) {
            return Err(GapError::Parameter(format!(
                "cutoff must be positive and finite (got {limit})"
            )));
        }
        if d == 4 && matches!(cutoff, Cutoff::Asymptotic { .. }) {
            return Err(GapError::NeedsHardCutoff);
        }
        Ok(GapModel {
            mu,
            n_components,
            d,
            cutoff,
            rel_tol: 1e-10,
        })
    }

    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn n_components(&self) -> u32 {
        self.n_components
    }

    pub fn d(&self) -> u32 {
        self.d
    }

    pub fn cutoff(&self) -> Cutoff {
        self.cutoff
    }

    /// `N·Ω_{d−2}/(2π)^{d−1}`.
    fn prefactor(&self) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        let omega = match self.d {
            2 => 2.0,
            3 => two_pi,
            _ => 2.0 * two_pi,
        };
        self.n_components as f64 * omega / two_pi.powi(self.d as i32 - 1)
    }

    fn check_lambda(&self, lambda: f64) -> Result<(), GapError> {
        let mu_sq = self.mu * self.mu;
        if !(lambda >= 0.0 && lambda < mu_sq) {
            return Err(GapError::Domain { lambda, mu_sq });
        }
        Ok(())
    }

    /// `∫₀^K k^{d−2} f(k) dk` on geometric pieces starting at the scale `h`,
    /// where the integrand varies fastest.
    fn radial<F: Fn(f64) -> f64>(&self, f: F, h: f64, upper: f64) -> Result<f64, GapError> {
        let power = self.d as i32 - 2;
        let g = |k: f64| {
            if power == 0 {
                f(k)
            } else {
                k.powi(power) * f(k)
            }
        };
        let mut total = 0.0;
        let mut lo = 0.0;
        let mut hi = h.min(upper);
        loop {
            total += integrate(g, lo, hi, 2, self.rel_tol * 0.1, 0.0)?;
            if hi >= upper {
                break;
            }
            lo = hi;
            hi = (hi * 4.0).min(upper);
        }
        Ok(total)
    }

    /// Left-hand side of the gap equation,
    /// `N ∫ d^{d−1}k/(2π)^{d−1} (1/2ε)(ε/√(ε²−λ) − 1)`.
    pub fn gap_lhs(&self, lambda: f64) -> Result<f64, GapError> {
        self.check_lambda(lambda)?;
        if lambda == 0.0 {
            return Ok(0.0);
        }
        let mu_sq = self.mu * self.mu;
        let delta = mu_sq - lambda;
        let integrand = |k: f64| {
            let e = (k * k + mu_sq).sqrt();
            let s = (k * k + delta).sqrt();
            lambda / (2.0 * s * e * (e + s))
        };
        let upper = self.cutoff.limit();
        let h = delta.sqrt().max(1e-6 * self.mu);
        let body = self.radial(integrand, h, upper)?;
        let tail = match self.cutoff {
            Cutoff::Hard { .. } => 0.0,
            Cutoff::Asymptotic { k_split: l } => {
                // ∫_L^∞ k^{d−2} [λ k⁻³/4 − 3λ(2μ²−λ) k⁻⁵/16] dk
                let c = 3.0 * lambda * (2.0 * mu_sq - lambda) / 16.0;
                match self.d {
                    2 => lambda / (8.0 * l * l) - c / (4.0 * l.powi(4)),
                    _ => lambda / (4.0 * l) - c / (3.0 * l.powi(3)),
                }
            }
        };
        Ok(self.prefactor() * (body + tail))
    }

    /// Capacity of the `k ≠ 0` modes, `lim_{λ→μ²} LHS(λ)`.
    ///
    /// For `d = 3` with the asymptotic cutoff this is exactly `Nμ/4π`.
    /// Otherwise see [`capacity_extrapolated`](Self::capacity_extrapolated);
    /// a divergent capacity is reported as `f64::INFINITY`.
    pub fn critical_radius(&self) -> Result<f64, GapError> {
        if self.d == 4 {
            log::warn!(
                "d = 4 capacity depends on the cutoff k_max = {}",
                self.cutoff.limit()
            );
        }
        if self.d == 3 && matches!(self.cutoff, Cutoff::Asymptotic { .. }) {
            return Ok(self.n_components as f64 * self.mu / (4.0 * std::f64::consts::PI));
        }
        self.capacity_extrapolated()
    }

    /// Quadratic extrapolation in `t = √(δ/μ²)` of `LHS(μ² − δ)` from
    /// `t = 0.04, 0.02, 0.01`. Geometric growth of the increments (ratio
    /// above 0.85) is read as divergence.
    pub fn capacity_extrapolated(&self) -> Result<f64, GapError> {
        let mu_sq = self.mu * self.mu;
        let at = |t: f64| self.gap_lhs(mu_sq * (1.0 - t * t));
        let f1 = at(0.04)?;
        let f2 = at(0.02)?;
        let f4 = at(0.01)?;
        let (d1, d2) = (f2 - f1, f4 - f2);
        if d1 > 0.0 && d2 / d1 > 0.85 {
            return Ok(f64::INFINITY);
        }
        Ok((8.0 * f4 - 6.0 * f2 + f1) / 3.0)
    }

    /// Solve `LHS(λ) = R²` for `λ ∈ [0, μ²)`, or return the condensed
    /// solution `λ = μ²` when `R²` exceeds the capacity.
    pub fn solve_gap(&self, r2: f64) -> Result<GapSolution, GapError> {
        check_r2(r2)?;
        let mu_sq = self.mu * self.mu;
        let normal = |lambda, residual| GapSolution {
            lambda,
            r2,
            phase: Phase::Normal,
            condensate_density: 0.0,
            residual,
            method: GapMethod::Quadrature,
        };
        if r2 == 0.0 {
            return Ok(normal(0.0, 0.0));
        }
        let rc2 = self.critical_radius()?;
        if rc2.is_finite() {
            if (r2 - rc2).abs() <= CRITICAL_TOL * rc2 {
                return Ok(GapSolution {
                    lambda: mu_sq,
                    r2,
                    phase: Phase::Critical,
                    condensate_density: (r2 - rc2).max(0.0),
                    residual: 0.0,
                    method: GapMethod::Quadrature,
                });
            }
            if r2 > rc2 {
                return Ok(GapSolution {
                    lambda: mu_sq,
                    r2,
                    phase: Phase::Condensed,
                    condensate_density: r2 - rc2,
                    residual: 0.0,
                    method: GapMethod::Quadrature,
                });
            }
        }
        let scale = if rc2.is_finite() { r2.max(rc2) } else { r2 };
        let f_tol = 1e-10 * scale;
        let hi = mu_sq * (1.0 - 1e-14);
        let (lambda, fx, _) = bracketed_root(|l| Ok(self.gap_lhs(l)? - r2), 0.0, hi, f_tol, 400)
            .map_err(|e: GapError| match e {
                GapError::Numerics(source) => GapError::Root { r2, source },
                other => other,
            })?;
        Ok(normal(lambda, fx.abs()))
    }

    /// `N ∫ d^{d−1}k/(2π)^{d−1} ε Q²/(2(1+Q)) + μ²·condensate` on the
    /// profile `Q = ε/√(ε²−λ) − 1`, `λ ∈ [0, μ²]`.
    pub fn ground_state_energy(&self, lambda: f64, condensate: f64) -> Result<f64, GapError> {
        let mu_sq = self.mu * self.mu;
        if !(lambda >= 0.0 && lambda <= mu_sq) {
            return Err(GapError::Domain { lambda, mu_sq });
        }
        if !(condensate >= 0.0 && condensate.is_finite()) {
            return Err(GapError::Parameter(format!(
                "condensate must be nonnegative (got {condensate})"
            )));
        }
        if condensate > 0.0 && lambda < mu_sq {
            return Err(GapError::Parameter("condensate requires λ = μ²".into()));
        }
        if lambda == 0.0 {
            return Ok(0.0);
        }
        let delta = mu_sq - lambda;
        // ε Q²/(2(1+Q)) = (ε − s)²/(2s) = λ² / (2 s (ε + s)²)
        let integrand = |k: f64| {
            let e = (k * k + mu_sq).sqrt();
            let s = (k * k + delta).sqrt();
            lambda * lambda / (2.0 * s * (e + s) * (e + s))
        };
        let upper = self.cutoff.limit();
        let h = delta.sqrt().max(1e-6 * self.mu);
        let body = self.radial(integrand, h, upper)?;
        let tail = match self.cutoff {
            Cutoff::Hard { .. } => 0.0,
            Cutoff::Asymptotic { k_split: l } => match self.d {
                2 => lambda * lambda / (16.0 * l * l),
                _ => lambda * lambda / (8.0 * l),
            },
        };
        Ok(self.prefactor() * (body + tail) + mu_sq * condensate)
    }

    /// Solve and evaluate the energy on every `R²` (ascending), with
    /// central-difference slopes and curvatures and the transition
    /// diagnostic.
    pub fn phase_sweep(&self, r2_values: &[f64]) -> Result<SweepReport, GapError> {
        if r2_values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(GapError::Unsorted);
        }
        let results: Vec<Result<(GapSolution, f64), GapError>> = r2_values
            .par_iter()
            .map(|&r2| {
                let sol = self.solve_gap(r2)?;
                let e = self.ground_state_energy(sol.lambda, sol.condensate_density)?;
                Ok((sol, e))
            })
            .collect();
        let mut rows = Vec::with_capacity(results.len());
        let mut failures = Vec::new();
        for (i, res) in results.into_iter().enumerate() {
            match res {
                Ok((sol, energy)) => rows.push(SweepRow {
                    r2: sol.r2,
                    lambda: sol.lambda,
                    phase: sol.phase,
                    condensate: sol.condensate_density,
                    energy,
                    de_dr2: f64::NAN,
                    d2e_dr2: f64::NAN,
                    residual: sol.residual,
                }),
                Err(e) => failures.push(SweepFailure {
                    index: i,
                    r2: r2_values[i],
                    message: e.to_string(),
                }),
            }
        }
        fill_derivatives(&mut rows);
        let rc2 = self.critical_radius()?;
        let transition = TransitionDiagnostic::from_rows(&rows, rc2, self.mu * self.mu);
        Ok(SweepReport {
            rows,
            failures,
            critical_r2: rc2,
            transition,
        })
    }
}

fn fill_derivatives(rows: &mut [SweepRow]) {
    let n = rows.len();
    if n < 2 {
        return;
    }
    let x: Vec<f64> = rows.iter().map(|r| r.r2).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.energy).collect();
    for i in 0..n {
        let (slope, curv) = if i == 0 {
            ((y[1] - y[0]) / (x[1] - x[0]), f64::NAN)
        } else if i + 1 == n {
            ((y[i] - y[i - 1]) / (x[i] - x[i - 1]), f64::NAN)
        } else {
            let (h1, h2) = (x[i] - x[i - 1], x[i + 1] - x[i]);
            let slope = (h1 * h1 * y[i + 1] - h2 * h2 * y[i - 1] + (h2 * h2 - h1 * h1) * y[i])
                / (h1 * h2 * (h1 + h2));
            let curv =
                2.0 * (h1 * y[i + 1] - (h1 + h2) * y[i] + h2 * y[i - 1]) / (h1 * h2 * (h1 + h2));
            (slope, curv)
        };
        rows[i].de_dr2 = slope;
        rows[i].d2e_dr2 = curv;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r2: f64,
    pub lambda: f64,
    pub phase: Phase,
    pub condensate: f64,
    pub energy: f64,
    /// Central difference (one-sided at the ends).
    pub de_dr2: f64,
    /// Three-point second difference, `NaN` at the ends.
    pub d2e_dr2: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub index: usize,
    pub r2: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
    pub critical_r2: f64,
    pub transition: Option<TransitionDiagnostic>,
}

/// Behaviour of `E(R²)` on either side of `R_c²`, from the last normal
/// and first condensed rows of a sweep.
///
/// In 2+1D the slope `dE/dR² = λ` and the curvature `dλ/dR²` both go to
/// their condensed values (`μ²` and 0) continuously; the curvature has a
/// kink rather than a jump. `curvature_below` is the last interior
/// second difference on the normal side, `curvature_above` the first
/// one fully inside the condensed side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDiagnostic {
    pub critical_r2: f64,
    /// Energy extrapolated to `R_c²` from the two rows below and above.
    pub energy_below: f64,
    pub energy_above: f64,
    /// One-sided difference quotients closest to `R_c²`.
    pub slope_below: f64,
    pub slope_above: f64,
    pub curvature_below: f64,
    pub curvature_above: f64,
    pub mu_sq: f64,
}

impl TransitionDiagnostic {
    fn from_rows(rows: &[SweepRow], rc2: f64, mu_sq: f64) -> Option<Self> {
        if !rc2.is_finite() {
            return None;
        }
        let split = rows.iter().position(|r| r.r2 > rc2)?;
        if split < 2 || rows.len() - split < 2 {
            return None;
        }
        let (b1, b0) = (&rows[split - 2], &rows[split - 1]);
        let (a0, a1) = (&rows[split], &rows[split + 1]);
        let slope_below = (b0.energy - b1.energy) / (b0.r2 - b1.r2);
        let slope_above = (a1.energy - a0.energy) / (a1.r2 - a0.r2);
        let curvature_below = rows[..split]
            .iter()
            .rev()
            .find(|r| r.d2e_dr2.is_finite())
            .map_or(f64::NAN, |r| r.d2e_dr2);
        // first row whose left neighbour is also condensed
        let curvature_above = rows
            .get(split + 1..)
            .and_then(|rest| rest.iter().find(|r| r.d2e_dr2.is_finite()))
            .map_or(f64::NAN, |r| r.d2e_dr2);
        Some(TransitionDiagnostic {
            critical_r2: rc2,
            energy_below: b0.energy + slope_below * (rc2 - b0.r2),
            energy_above: a0.energy + slope_above * (rc2 - a0.r2),
            slope_below,
            slope_above,
            curvature_below,
            curvature_above,
            mu_sq,
        })
    }
}
