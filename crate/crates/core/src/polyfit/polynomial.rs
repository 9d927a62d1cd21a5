use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidDomain(format!("[{lo}, {hi}]")));
        }
        Ok(Self(lo, hi))
    }

    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn width(&self) -> f64 {
        self.1 - self.0
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.0 && x <= self.1
    }

    /// Uniform grid of `n ≥ 2` points including both endpoints.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        assert!(n >= 2);
        let step = self.width() / (n - 1) as f64;
        (0..n)
            .map(|i| if i == n - 1 { self.1 } else { self.0 + step * i as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    #[default]
    Monomial,
}

/// Polynomial in the monomial basis (`coeffs[i]` multiplies `x^i`) with a
/// declared validity domain in original input units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    #[serde(default)]
    basis: Basis,
    coeffs: Vec<f64>,
    domain: Interval,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>, domain: Interval) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::InvalidDegree("empty coefficient list".into()));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidDegree("non-finite coefficient".into()));
        }
        let domain = Interval::new(domain.0, domain.1)?;
        Ok(Self {
            basis: Basis::Monomial,
            coeffs,
            domain,
        })
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Horner evaluation, ignoring the domain.
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn eval_checked(&self, x: f64) -> Result<f64> {
        if !self.domain.contains(x) {
            return Err(Error::DomainViolation {
                value: x,
                lo: self.domain.0,
                hi: self.domain.1,
                site: None,
            });
        }
        Ok(self.eval(x))
    }

    /// Value and first derivative in one Horner pass.
    pub fn eval_with_derivative(&self, x: f64) -> (f64, f64) {
        let mut p = 0.0;
        let mut dp = 0.0;
        for &c in self.coeffs.iter().rev() {
            dp = dp * x + p;
            p = p * x + c;
        }
        (p, dp)
    }

    /// `q(x) = p(a·x + b)` in the monomial basis, with a new domain.
    pub fn compose_affine(&self, a: f64, b: f64, domain: Interval) -> Result<Self> {
        Self::new(compose_affine_coeffs(&self.coeffs, a, b), domain)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("polynomial serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Polynomial = serde_json::from_str(s)?;
        Self::new(p.coeffs, p.domain)
    }
}

/// Coefficients of `p(a·x + b)` given coefficients of `p`.
pub(crate) fn compose_affine_coeffs(coeffs: &[f64], a: f64, b: f64) -> Vec<f64> {
    // Horner over polynomials: acc = acc·(a·x + b) + c
    let mut acc: Vec<f64> = vec![0.0];
    for &c in coeffs.iter().rev() {
        let mut next = vec![0.0; acc.len() + 1];
        for (i, &v) in acc.iter().enumerate() {
            next[i] += v * b;
            next[i + 1] += v * a;
        }
        next[0] += c;
        acc = next;
    }
    acc.truncate(coeffs.len());
    acc
}

/// Converts a Chebyshev series `Σ c_j T_j(t)` to monomial coefficients in `t`.
pub(crate) fn chebyshev_to_monomial(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    let mut out = vec![0.0; n];
    // T_{j+1} = 2t·T_j − T_{j−1}
    let mut prev = vec![0.0; n];
    let mut cur = vec![0.0; n];
    prev[0] = 1.0;
    if n > 1 {
        cur[1] = 1.0;
    }
    for (j, &cj) in c.iter().enumerate() {
        let tj = if j == 0 { &prev } else { &cur };
        for (o, &t) in out.iter_mut().zip(tj.iter()) {
            *o += cj * t;
        }
        if j >= 1 && j + 1 < n {
            let mut next = vec![0.0; n];
            for i in 0..n - 1 {
                next[i + 1] += 2.0 * cur[i];
            }
            for i in 0..n {
                next[i] -= prev[i];
            }
            prev = std::mem::replace(&mut cur, next);
        }
    }
    out
}
