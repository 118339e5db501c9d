//! One-dimensional adaptive quadrature and bracketed root finding.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("quadrature did not reach tolerance {tol:e} (estimated error {err:e} after {evals} evaluations)")]
    Quadrature { tol: f64, err: f64, evals: usize },
    #[error("integrand returned a non-finite value at x = {0}")]
    NonFinite(f64),
    #[error("root is not bracketed: f({lo}) = {f_lo}, f({hi}) = {f_hi}")]
    NotBracketed {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },
    #[error("root finder stalled after {iters} iterations; bracket history {history:?}")]
    RootStalled {
        iters: usize,
        history: Vec<(f64, f64)>,
    },
}

// 15-point Kronrod abscissae on [-1, 1] (nonnegative half) and weights, with
// the embedded 7-point Gauss weights at the odd-indexed nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Result<(f64, f64), NumericsError> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    if !fc.is_finite() {
        return Err(NumericsError::NonFinite(c));
    }
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let (x1, x2) = (c - dx, c + dx);
        let (f1, f2) = (f(x1), f(x2));
        if !f1.is_finite() {
            return Err(NumericsError::NonFinite(x1));
        }
        if !f2.is_finite() {
            return Err(NumericsError::NonFinite(x2));
        }
        kronrod += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    Ok((kronrod * h, ((kronrod - gauss) * h).abs()))
}

/// Adaptive Gauss–Kronrod (7/15) integration of `f` over `[a, b]`.
///
/// The interval is first split into `panels` equal pieces, then the piece
/// with the largest error estimate is bisected until the summed estimate
/// is below `max(abs_tol, rel_tol·|I|)`.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    panels: usize,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<f64, NumericsError> {
    if a == b {
        return Ok(0.0);
    }
    const MAX_SEGMENTS: usize = 20_000;
    let panels = panels.max(1);
    let mut segs: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(panels * 4);
    let step = (b - a) / panels as f64;
    for i in 0..panels {
        let lo = a + step * i as f64;
        let hi = if i + 1 == panels { b } else { lo + step };
        let (v, e) = gk15(&f, lo, hi)?;
        segs.push((lo, hi, v, e));
    }
    loop {
        let total: f64 = segs.iter().map(|s| s.2).sum();
        let err: f64 = segs.iter().map(|s| s.3).sum();
        let tol = abs_tol.max(rel_tol * total.abs());
        if err <= tol {
            return Ok(total);
        }
        if segs.len() >= MAX_SEGMENTS {
            return Err(NumericsError::Quadrature {
                tol,
                err,
                evals: segs.len() * 15,
            });
        }
        let (worst, _) = segs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, s)| {
                if s.3 > acc.1 {
                    (i, s.3)
                } else {
                    acc
                }
            });
        let (lo, hi, _, _) = segs.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // interval exhausted at machine resolution
            return Err(NumericsError::Quadrature {
                tol,
                err,
                evals: segs.len() * 15,
            });
        }
        let (v1, e1) = gk15(&f, lo, mid)?;
        let (v2, e2) = gk15(&f, mid, hi)?;
        segs.push((lo, mid, v1, e1));
        segs.push((mid, hi, v2, e2));
    }
}

/// Root of a monotone function on `[lo, hi]`: bisection first, then
/// secant steps kept strictly inside the bracket.
///
/// Stops when `|f(x)| <= f_tol` and returns `(x, f(x), iterations)`.
pub fn bracketed_root<F, E>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    f_tol: f64,
    max_iters: usize,
) -> Result<(f64, f64, usize), E>
where
    F: FnMut(f64) -> Result<f64, E>,
    E: From<NumericsError>,
{
    let mut f_lo = f(lo)?;
    let mut f_hi = f(hi)?;
    if f_lo.abs() <= f_tol {
        return Ok((lo, f_lo, 0));
    }
    if f_hi.abs() <= f_tol {
        return Ok((hi, f_hi, 0));
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(NumericsError::NotBracketed { lo, hi, f_lo, f_hi }.into());
    }
    let mut history = Vec::new();
    for iter in 1..=max_iters {
        history.push((lo, hi));
        let width = hi - lo;
        let secant = lo - f_lo * (hi - lo) / (f_hi - f_lo);
        let x = if iter > 8 && secant > lo + 0.01 * width && secant < hi - 0.01 * width {
            secant
        } else {
            0.5 * (lo + hi)
        };
        let fx = f(x)?;
        if fx.abs() <= f_tol || x <= lo || x >= hi {
            return Ok((x, fx, iter));
        }
        if fx.signum() == f_lo.signum() {
            lo = x;
            f_lo = fx;
        } else {
            hi = x;
            f_hi = fx;
        }
    }
    if history.len() > 16 {
        history.drain(..history.len() - 16);
    }
    Err(NumericsError::RootStalled {
        iters: max_iters,
        history,
    }
    .into())
}

/// Nonnegative least squares `min ‖A x − b‖₂, x ≥ 0` (Lawson–Hanson
/// active set).
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let scale =
        a.iter().fold(0.0f64, |m, v| m.max(v.abs())) * b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-13 * scale.max(1.0) * n.max(1) as f64;

    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = DMatrix::from_fn(a.nrows(), cols.len(), |r, c| a[(r, cols[c])]);
        let sol = sub
            .svd(true, true)
            .solve(b, 1e-14)
            .unwrap_or_else(|_| DVector::zeros(cols.len()));
        let mut z = DVector::zeros(n);
        for (c, &j) in cols.iter().enumerate() {
            z[j] = sol[c];
        }
        z
    };

    for _ in 0..3 * n + 3 {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let j = match candidate {
            Some(j) if w[j] > tol => j,
            _ => break,
        };
        passive[j] = true;
        for _ in 0..3 * n + 3 {
            let z = solve_passive(&passive);
            if (0..n).filter(|&i| passive[i]).all(|i| z[i] > 0.0) {
                x = z;
                break;
            }
            let alpha = (0..n)
                .filter(|&i| passive[i] && z[i] <= 0.0)
                .map(|i| x[i] / (x[i] - z[i]))
                .fold(f64::INFINITY, f64::min);
            x += (z - &x) * alpha;
            for i in 0..n {
                if passive[i] && x[i] <= 1e-15 {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn integrates_polynomials_exactly() {
        let v = integrate(|x| 3.0 * x * x, 0.0, 2.0, 1, 1e-14, 0.0).unwrap();
        assert_relative_eq!(v, 8.0, max_relative = 1e-14);
    }

    #[test]
    fn integrates_peaked_function() {
        // ∫_0^1 dx / √(x² + a), a small
        let a: f64 = 1e-10;
        let exact = ((1.0 + (1.0 + a).sqrt()) / a.sqrt()).ln();
        let v = integrate(|x| 1.0 / (x * x + a).sqrt(), 0.0, 1.0, 4, 1e-12, 0.0).unwrap();
        assert_relative_eq!(v, exact, max_relative = 1e-11);
    }

    #[test]
    fn reports_non_finite() {
        let r = integrate(|x| 1.0 / (x - 0.5), 0.0, 1.0, 1, 1e-10, 0.0);
        assert!(matches!(r, Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn nnls_recovers_feasible_solution() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![0.25, 0.5, 0.75]);
        let x = nnls(&a, &b);
        assert_relative_eq!(x[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn nnls_clamps_at_zero() {
        // unconstrained solution is (1, -1)
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let x = nnls(&a, &b);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_eq!(x[1], 0.0);
    }

    #[test]
    fn finds_roots() {
        let (x, _, _) =
            bracketed_root::<_, NumericsError>(|x| Ok(x * x - 2.0), 0.0, 2.0, 1e-14, 200).unwrap();
        assert_relative_eq!(x, 2f64.sqrt(), max_relative = 1e-13);
        let r = bracketed_root::<_, NumericsError>(|x| Ok(x * x + 1.0), 0.0, 2.0, 1e-14, 200);
        assert!(matches!(r, Err(NumericsError::NotBracketed { .. })));
    }
}
