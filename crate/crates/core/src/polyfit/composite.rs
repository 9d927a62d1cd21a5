use serde::{Deserialize, Serialize};

use super::polynomial::{Interval, Polynomial};
use super::remez::{remez_fit_odd, remez_fit_weighted, RemezOptions};
use crate::error::{Error, Result};

/// One step of a composite evaluation. Every stage sees the original input
/// `x` and the running value `y` (initially `y = x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    /// `y ← p(y)`
    Poly(Polynomial),
    /// `y ← y·(3 − x·y²)/2`
    NewtonInvSqrt,
    /// `y ← x·(1 + y)/2`
    ReluAssemble,
}

/// Chain of polynomial stages evaluated with additions and multiplications only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositePolynomial {
    domain: Interval,
    stages: Vec<Stage>,
}

impl CompositePolynomial {
    pub fn new(stages: Vec<Stage>, domain: Interval) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidDegree("composite needs at least one stage".into()));
        }
        Ok(Self {
            domain: Interval::new(domain.0, domain.1)?,
            stages,
        })
    }

    pub fn from_poly(p: Polynomial) -> Self {
        Self {
            domain: p.domain(),
            stages: vec![Stage::Poly(p)],
        }
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.domain.lo(), self.domain.hi())
    }

    pub fn interval(&self) -> Interval {
        self.domain
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut y = x;
        for s in &self.stages {
            y = match s {
                Stage::Poly(p) => p.eval(y),
                Stage::NewtonInvSqrt => y * (3.0 - x * y * y) / 2.0,
                Stage::ReluAssemble => x * (1.0 + y) / 2.0,
            };
        }
        y
    }

    pub fn eval_checked(&self, x: f64) -> Result<f64> {
        if !self.domain.contains(x) {
            return Err(Error::DomainViolation {
                value: x,
                lo: self.domain.lo(),
                hi: self.domain.hi(),
                site: None,
            });
        }
        Ok(self.eval(x))
    }

    /// Value and `d/dx` by forward-mode propagation through the stages.
    pub fn eval_with_derivative(&self, x: f64) -> (f64, f64) {
        let (mut y, mut dy) = (x, 1.0);
        for s in &self.stages {
            (y, dy) = match s {
                Stage::Poly(p) => {
                    let (v, d) = p.eval_with_derivative(y);
                    (v, d * dy)
                }
                Stage::NewtonInvSqrt => {
                    let v = y * (3.0 - x * y * y) / 2.0;
                    // ∂/∂y = (3 − 3xy²)/2, ∂/∂x = −y³/2
                    let d = (3.0 - 3.0 * x * y * y) / 2.0 * dy - y * y * y / 2.0;
                    (v, d)
                }
                Stage::ReluAssemble => (x * (1.0 + y) / 2.0, (1.0 + y) / 2.0 + x * dy / 2.0),
            };
        }
        (y, dy)
    }

    /// Stage-by-stage prefix values, useful for per-step error curves.
    pub fn prefix(&self, n_stages: usize) -> Result<Self> {
        Self::new(self.stages[..n_stages].to_vec(), self.domain)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("composite serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: CompositePolynomial = serde_json::from_str(s)?;
        Self::new(c.stages, c.domain)
    }
}

/// Remez seed for `1/√x` (relative-error minimax) followed by Newton steps.
///
/// The seed is rescaled so the first Newton step sees balanced worst-case
/// errors on both sides, which makes every step after the seed contract as
/// `e' = −e²(3 + e)/2` with `e ≤ 0`.
pub fn fit_inverse_sqrt(domain: Interval, seed_degree: usize, newton_steps: usize) -> Result<CompositePolynomial> {
    if domain.lo() <= 0.0 {
        return Err(Error::InvalidDomain(format!(
            "inverse square root needs a positive domain, got [{}, {}]",
            domain.lo(),
            domain.hi()
        )));
    }
    let seed = remez_fit_weighted(
        |x| 1.0 / x.sqrt(),
        f64::sqrt,
        domain,
        seed_degree,
        &RemezOptions::default(),
    )?;
    let e = seed.minimax_error;
    let s = balanced_newton_scale(e);
    let coeffs = seed.poly.coeffs().iter().map(|c| c * s).collect();
    let mut stages = vec![Stage::Poly(Polynomial::new(coeffs, domain)?)];
    stages.extend(std::iter::repeat_n(Stage::NewtonInvSqrt, newton_steps));
    CompositePolynomial::new(stages, domain)
}

/// Scale `s` equalizing `h(s(1+E)−1) = h(s(1−E)−1)` where `h(e) = e²(3+e)/2`
/// is the magnitude of the relative error after one Newton step.
fn balanced_newton_scale(e: f64) -> f64 {
    if e <= 0.0 || e >= 1.0 {
        return 1.0;
    }
    let h = |r: f64| r * r * (3.0 + r) / 2.0;
    let diff = |s: f64| h(s * (1.0 + e) - 1.0) - h(s * (1.0 - e) - 1.0);
    let (mut lo, mut hi) = (1.0 / (1.0 + e), 1.0 / (1.0 - e));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if diff(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Scaled gap `δ` (fraction of `B`) excluded around zero when fitting the
/// first sign stage.
pub const DEFAULT_RELU_GAP: f64 = 1.0 / 32.0;

/// `ReLU(x) ≈ x·(1 + s(x/B))/2` where `s` is a composition of odd minimax
/// approximations of `sign`. Stage `k` is fitted on the positive image of
/// stage `k−1`; the first stage covers `[δ, 1]` in scaled units.
pub fn compose_relu_approx(sign_degrees: &[usize], bound: f64, gap: f64) -> Result<CompositePolynomial> {
    if sign_degrees.is_empty() {
        return Err(Error::InvalidDegree("at least one sign stage is required".into()));
    }
    if let Some(d) = sign_degrees.iter().find(|d| *d % 2 == 0) {
        return Err(Error::InvalidDegree(format!("sign stages must have odd degree, got {d}")));
    }
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::InvalidDomain(format!("ReLU bound must be positive, got {bound}")));
    }
    if !(gap > 0.0 && gap < 1.0) {
        return Err(Error::InvalidDomain(format!("gap must lie in (0, 1), got {gap}")));
    }
    let opts = RemezOptions::default();
    let mut stages = Vec::with_capacity(sign_degrees.len() + 1);
    let mut lo = gap;
    let mut hi = 1.0;
    for (k, &d) in sign_degrees.iter().enumerate() {
        let fit = remez_fit_odd(|_| 1.0, |_| 1.0, Interval::new(lo, hi)?, d, &opts)?;
        let poly = if k == 0 {
            // Fold the 1/B input scaling into the stored coefficients.
            let coeffs = fit
                .poly
                .coeffs()
                .iter()
                .enumerate()
                .map(|(i, c)| c / bound.powi(i as i32))
                .collect();
            Polynomial::new(coeffs, Interval::new(-bound, bound)?)?
        } else {
            fit.poly
        };
        stages.push(Stage::Poly(poly));
        let e = fit.minimax_error;
        lo = (1.0 - e).max(1e-6);
        hi = 1.0 + e;
    }
    stages.push(Stage::ReluAssemble);
    CompositePolynomial::new(stages, Interval::new(-bound, bound)?)
}
