//! Polynomial approximations of the non-polynomial pieces of a transformer:
//! Remez minimax fits, composite sign-based ReLU, and Newton-refined inverse
//! square root.

mod composite;
mod polynomial;
mod remez;

pub use composite::{compose_relu_approx, fit_inverse_sqrt, CompositePolynomial, Stage, DEFAULT_RELU_GAP};
pub use polynomial::{Basis, Interval, Polynomial};
pub use remez::{remez_fit, remez_fit_odd, remez_fit_weighted, RemezOptions, RemezResult};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{PolyMode, Tensor};

/// Anything evaluable as a real polynomial map with a declared domain.
pub trait Approximant {
    fn domain(&self) -> (f64, f64);
    fn eval_unchecked(&self, x: f64) -> f64;

    /// Evaluates with the given domain policy (strict: error, clamp: clamp).
    fn eval_mode(&self, x: f64, mode: PolyMode) -> Result<f64> {
        let (lo, hi) = self.domain();
        if x < lo || x > hi {
            match mode {
                PolyMode::Strict => {
                    return Err(crate::Error::DomainViolation {
                        value: x,
                        lo,
                        hi,
                        site: None,
                    })
                }
                PolyMode::Clamp => return Ok(self.eval_unchecked(x.clamp(lo, hi))),
            }
        }
        Ok(self.eval_unchecked(x))
    }

    fn eval_tensor(&self, x: &Tensor, mode: PolyMode) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| self.eval_mode(v, mode)).collect::<Result<Vec<_>>>()?;
        Tensor::new(x.shape().to_vec(), data)
    }
}

impl Approximant for Polynomial {
    fn domain(&self) -> (f64, f64) {
        (Polynomial::domain(self).lo(), Polynomial::domain(self).hi())
    }

    fn eval_unchecked(&self, x: f64) -> f64 {
        self.eval(x)
    }
}

impl Approximant for CompositePolynomial {
    fn domain(&self) -> (f64, f64) {
        CompositePolynomial::domain(self)
    }

    fn eval_unchecked(&self, x: f64) -> f64 {
        self.eval(x)
    }
}

/// Pointwise error of an approximation on a uniform grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub l1: f64,
    pub linf: f64,
    /// `(x, |p(x) − f(x)|)` per grid point.
    pub curve: Vec<(f64, f64)>,
}

impl ErrorCurve {
    /// CSV with header `x,error`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "x,error")?;
        for (x, e) in &self.curve {
            writeln!(w, "{x},{e}")?;
        }
        Ok(())
    }
}

/// Mean (L1) and max (L∞) absolute error of `p` against `f` on `grid_points`
/// uniformly spaced points of `domain`.
pub fn approx_error(
    p: impl Fn(f64) -> f64,
    f: impl Fn(f64) -> f64,
    domain: Interval,
    grid_points: usize,
) -> ErrorCurve {
    let curve: Vec<(f64, f64)> = domain
        .grid(grid_points.max(2))
        .into_iter()
        .map(|x| (x, (p(x) - f(x)).abs()))
        .collect();
    let l1 = curve.iter().map(|c| c.1).sum::<f64>() / curve.len() as f64;
    let linf = curve.iter().fold(0.0f64, |m, c| m.max(c.1));
    ErrorCurve { l1, linf, curve }
}
