//! Remez exchange for weighted minimax approximation.
//!
//! The exchange runs in a Chebyshev basis on the affinely rescaled interval
//! (or an odd Chebyshev basis for sign-like targets) and only converts to the
//! stored monomial representation at the end.

use serde::{Deserialize, Serialize};

use super::polynomial::{chebyshev_to_monomial, compose_affine_coeffs, Interval, Polynomial};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemezOptions {
    /// Relative spread allowed between the extremal error magnitudes.
    pub tol: f64,
    pub max_iterations: usize,
    pub grid_points: usize,
}

impl Default for RemezOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iterations: 100,
            grid_points: 10_001,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemezResult {
    pub poly: Polynomial,
    pub minimax_error: f64,
    /// Alternation set as `(x, signed weighted error)`.
    pub extrema: Vec<(f64, f64)>,
    pub iterations: usize,
}

impl RemezResult {
    /// Relative spread `(max − min)/max` of the extremal magnitudes.
    pub fn equioscillation_spread(&self) -> f64 {
        spread(&self.extrema)
    }

    pub fn alternates(&self) -> bool {
        self.extrema.windows(2).all(|w| w[0].1 * w[1].1 < 0.0)
    }
}

/// Minimax polynomial of `degree` approximating `f` on `domain`.
pub fn remez_fit(
    f: impl Fn(f64) -> f64,
    domain: Interval,
    degree: usize,
    opts: &RemezOptions,
) -> Result<RemezResult> {
    remez_fit_weighted(f, |_| 1.0, domain, degree, opts)
}

/// Minimizes `max w(x)·|p(x) − f(x)|` over `domain`.
pub fn remez_fit_weighted(
    f: impl Fn(f64) -> f64,
    w: impl Fn(f64) -> f64,
    domain: Interval,
    degree: usize,
    opts: &RemezOptions,
) -> Result<RemezResult> {
    let domain = Interval::new(domain.0, domain.1)?;
    let basis = Basis::Chebyshev(domain);
    let fit = exchange(&f, &w, domain, &basis, degree + 1, opts)?;
    let (a, b) = (2.0 / domain.width(), -(domain.lo() + domain.hi()) / domain.width());
    let mono_t = chebyshev_to_monomial(&fit.coeffs);
    let poly = Polynomial::new(compose_affine_coeffs(&mono_t, a, b), domain)?;
    Ok(RemezResult {
        poly,
        minimax_error: fit.error,
        extrema: fit.extrema,
        iterations: fit.iterations,
    })
}

/// Odd minimax polynomial `Σ c_j x^(2j+1)` of odd `degree` approximating `f`
/// on `[lo, hi]` with `0 < lo`. The returned polynomial's domain is `[-hi, hi]`.
pub fn remez_fit_odd(
    f: impl Fn(f64) -> f64,
    w: impl Fn(f64) -> f64,
    positive: Interval,
    degree: usize,
    opts: &RemezOptions,
) -> Result<RemezResult> {
    if degree % 2 == 0 {
        return Err(Error::InvalidDegree(format!("odd fit requires odd degree, got {degree}")));
    }
    if positive.lo() <= 0.0 {
        return Err(Error::InvalidDomain(format!(
            "odd fit needs a positive half-interval, got [{}, {}]",
            positive.lo(),
            positive.hi()
        )));
    }
    let scale = positive.hi();
    let basis = Basis::OddChebyshev(scale);
    let fit = exchange(&f, &w, positive, &basis, degree.div_ceil(2), opts)?;
    let mut full = vec![0.0; degree + 1];
    for (j, c) in fit.coeffs.iter().enumerate() {
        full[2 * j + 1] = *c;
    }
    let mono_u = chebyshev_to_monomial(&full);
    let coeffs: Vec<f64> = mono_u
        .iter()
        .enumerate()
        .map(|(k, c)| c / scale.powi(k as i32))
        .collect();
    let poly = Polynomial::new(coeffs, Interval::new(-scale, scale)?)?;
    Ok(RemezResult {
        poly,
        minimax_error: fit.error,
        extrema: fit.extrema,
        iterations: fit.iterations,
    })
}

enum Basis {
    /// `T_j((2x − lo − hi)/(hi − lo))`
    Chebyshev(Interval),
    /// `T_{2j+1}(x / s)`
    OddChebyshev(f64),
}

impl Basis {
    fn eval_into(&self, x: f64, out: &mut [f64]) {
        match self {
            Basis::Chebyshev(d) => {
                let t = (2.0 * x - d.lo() - d.hi()) / d.width();
                chebyshev_values(t, out.len(), |j, v| out[j] = v);
            }
            Basis::OddChebyshev(s) => {
                let t = x / s;
                let n = out.len();
                chebyshev_values(t, 2 * n, |j, v| {
                    if j % 2 == 1 {
                        out[j / 2] = v;
                    }
                });
            }
        }
    }
}

fn chebyshev_values(t: f64, n: usize, mut sink: impl FnMut(usize, f64)) {
    let (mut prev, mut cur) = (1.0, t);
    for j in 0..n {
        match j {
            0 => sink(0, 1.0),
            1 => sink(1, t),
            _ => {
                let next = 2.0 * t * cur - prev;
                prev = cur;
                cur = next;
                sink(j, cur);
            }
        }
    }
}

struct ExchangeFit {
    coeffs: Vec<f64>,
    error: f64,
    extrema: Vec<(f64, f64)>,
    iterations: usize,
}

fn exchange(
    f: &dyn Fn(f64) -> f64,
    w: &dyn Fn(f64) -> f64,
    domain: Interval,
    basis: &Basis,
    nb: usize,
    opts: &RemezOptions,
) -> Result<ExchangeFit> {
    let grid = domain.grid(opts.grid_points.max(nb + 1));
    let fvals: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let wvals: Vec<f64> = grid.iter().map(|&x| w(x)).collect();
    for (i, (&fv, &wv)) in fvals.iter().zip(&wvals).enumerate() {
        if !fv.is_finite() || !wv.is_finite() {
            return Err(Error::NonFinite(grid[i]));
        }
    }
    let scale = fvals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);

    // Chebyshev extrema as the initial reference.
    let m = nb + 1;
    let mut reference: Vec<f64> = (0..m)
        .map(|i| {
            let c = -(std::f64::consts::PI * i as f64 / (m - 1) as f64).cos();
            domain.lo() + 0.5 * (c + 1.0) * domain.width()
        })
        .collect();

    let mut phi = vec![0.0; nb];
    let eval_p = |coeffs: &[f64], x: f64, phi: &mut [f64]| -> f64 {
        basis.eval_into(x, phi);
        coeffs.iter().zip(phi.iter()).map(|(c, p)| c * p).sum()
    };

    let mut last_spread = f64::INFINITY;
    for iteration in 1..=opts.max_iterations {
        // Σ c_j φ_j(x_i) + (−1)^i E / w(x_i) = f(x_i)
        let mut a = vec![vec![0.0; m]; m];
        let mut rhs = vec![0.0; m];
        for (i, &x) in reference.iter().enumerate() {
            basis.eval_into(x, &mut phi);
            a[i][..nb].copy_from_slice(&phi);
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            a[i][nb] = sign / w(x);
            rhs[i] = f(x);
        }
        let sol = solve_dense(a, rhs).ok_or(Error::NoConvergence {
            iterations: iteration,
            residual: last_spread,
        })?;
        let coeffs = sol[..nb].to_vec();

        let err_at = |x: f64, phi: &mut [f64]| w(x) * (eval_p(&coeffs, x, phi) - f(x));
        let errs: Vec<f64> = grid
            .iter()
            .zip(&fvals)
            .zip(&wvals)
            .map(|((&x, &fv), &wv)| wv * (eval_p(&coeffs, x, &mut phi) - fv))
            .collect();
        let grid_max = errs.iter().fold(0.0f64, |m, e| m.max(e.abs()));

        if grid_max <= 1e-14 * scale {
            let extrema = reference.iter().map(|&x| (x, err_at(x, &mut phi))).collect();
            return Ok(ExchangeFit {
                coeffs,
                error: grid_max,
                extrema,
                iterations: iteration,
            });
        }

        let mut extrema = locate_extrema(&grid, &errs, &err_at, &mut phi);
        prune_extrema(&mut extrema, m);
        if extrema.len() < m {
            return Err(Error::NoConvergence {
                iterations: iteration,
                residual: last_spread,
            });
        }
        let s = spread(&extrema);
        let max_e = extrema.iter().fold(0.0f64, |m, e| m.max(e.1.abs()));
        last_spread = s;
        // Near the rounding floor the magnitudes cannot be equalized further.
        if s <= opts.tol || s * max_e <= 1e-13 * scale {
            return Ok(ExchangeFit {
                coeffs,
                error: max_e.max(grid_max),
                extrema,
                iterations: iteration,
            });
        }
        reference = extrema.iter().map(|e| e.0).collect();
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iterations,
        residual: last_spread,
    })
}

/// One extremum per maximal same-sign run of the grid error, refined by
/// golden-section search between the neighbouring grid points.
fn locate_extrema(
    grid: &[f64],
    errs: &[f64],
    err_at: &dyn Fn(f64, &mut [f64]) -> f64,
    phi: &mut [f64],
) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut i = 0;
    let n = grid.len();
    while i < n {
        let sign = errs[i].signum();
        let mut best = i;
        let mut j = i;
        while j < n && (errs[j].signum() == sign || errs[j] == 0.0) {
            if errs[j].abs() > errs[best].abs() {
                best = j;
            }
            j += 1;
        }
        let lo = grid[best.saturating_sub(1).max(i)];
        let hi = grid[(best + 1).min(j - 1)];
        let x = golden_max(lo, hi, grid[best], |x| err_at(x, phi).abs());
        let e = err_at(x, phi);
        let e_grid = errs[best];
        if e.abs() >= e_grid.abs() && e.signum() == e_grid.signum() {
            out.push((x, e));
        } else {
            out.push((grid[best], e_grid));
        }
        i = j;
    }
    out
}

fn golden_max(mut a: f64, mut b: f64, start: f64, mut g: impl FnMut(f64) -> f64) -> f64 {
    if b - a <= 0.0 {
        return start;
    }
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut gc, mut gd) = (g(c), g(d));
    for _ in 0..80 {
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if gc > gd {
            b = d;
            d = c;
            gd = gc;
            c = b - r * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + r * (b - a);
            gd = g(d);
        }
    }
    let mid = 0.5 * (a + b);
    [start, mid, c, d]
        .into_iter()
        .max_by(|x, y| g(*x).partial_cmp(&g(*y)).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or(start)
}

/// Reduces an alternating sequence to `m` points while keeping alternation.
fn prune_extrema(ext: &mut Vec<(f64, f64)>, m: usize) {
    while ext.len() > m {
        if ext.len() == m + 1 {
            // Dropping an end point keeps alternation.
            if ext[0].1.abs() < ext[ext.len() - 1].1.abs() {
                ext.remove(0);
            } else {
                ext.pop();
            }
            continue;
        }
        let (k, _) = ext
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .1.abs().partial_cmp(&b.1 .1.abs()).unwrap())
            .unwrap();
        if k == 0 || k == ext.len() - 1 {
            ext.remove(k);
        } else {
            // Remove it with its smaller neighbour so signs still alternate.
            let nb = if ext[k - 1].1.abs() < ext[k + 1].1.abs() { k - 1 } else { k + 1 };
            let (first, _) = if nb < k { (nb, k) } else { (k, nb) };
            ext.drain(first..first + 2);
        }
    }
}

fn spread(ext: &[(f64, f64)]) -> f64 {
    let max = ext.iter().fold(0.0f64, |m, e| m.max(e.1.abs()));
    let min = ext.iter().fold(f64::INFINITY, |m, e| m.min(e.1.abs()));
    if max == 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

/// Gaussian elimination with partial pivoting.
pub(crate) fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}
