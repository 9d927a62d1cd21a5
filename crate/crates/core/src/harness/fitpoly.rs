use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polyconvert::{depth_report, emit_composite, Budget, PolyGraph};
use crate::polyfit::{
    approx_error, compose_relu_approx, fit_inverse_sqrt, remez_fit, CompositePolynomial, ErrorCurve, Interval,
    RemezOptions, DEFAULT_RELU_GAP,
};
use crate::tensor::gelu;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitTarget {
    Relu,
    Gelu,
    InvSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub function: FitTarget,
    /// `[a, b]`; ReLU uses `[-max(|a|,|b|), max(|a|,|b|)]`.
    pub domain: (f64, f64),
    /// GELU degree, or inverse-square-root seed degree.
    pub degree: usize,
    pub sign_degrees: Vec<usize>,
    pub gap: f64,
    pub newton_steps: usize,
    pub grid_points: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            function: FitTarget::Gelu,
            domain: (-20.0, 20.0),
            degree: 15,
            sign_degrees: vec![7, 7, 7],
            gap: DEFAULT_RELU_GAP,
            newton_steps: 2,
            grid_points: 10_001,
        }
    }
}

/// Fitted approximation with its error curve against the exact function.
pub fn fit_poly(cfg: &FitConfig) -> Result<(CompositePolynomial, ErrorCurve)> {
    let domain = Interval::new(cfg.domain.0, cfg.domain.1).map_err(|e| Error::Config(e.to_string()))?;
    if cfg.function == FitTarget::InvSqrt && domain.lo() <= 0.0 {
        return Err(Error::Config(format!("inverse square root needs a positive domain, got {domain:?}")));
    }
    if cfg.grid_points < 2 {
        return Err(Error::Config("grid_points must be at least 2".into()));
    }
    Ok(match cfg.function {
        FitTarget::Gelu => {
            let fit = remez_fit(gelu, domain, cfg.degree, &RemezOptions::default())?;
            let c = CompositePolynomial::from_poly(fit.poly);
            let e = approx_error(|x| c.eval(x), gelu, domain, cfg.grid_points);
            (c, e)
        }
        FitTarget::Relu => {
            let b = domain.lo().abs().max(domain.hi().abs());
            let c = compose_relu_approx(&cfg.sign_degrees, b, cfg.gap)?;
            let e = approx_error(|x| c.eval(x), |x| x.max(0.0), c.interval(), cfg.grid_points);
            (c, e)
        }
        FitTarget::InvSqrt => {
            let c = fit_inverse_sqrt(domain, cfg.degree, cfg.newton_steps)?;
            let e = approx_error(|x| c.eval(x), |x| 1.0 / x.sqrt(), domain, cfg.grid_points);
            (c, e)
        }
    })
}

/// Multiplicative depth of evaluating `c` on one ciphertext slot.
pub fn composite_depth(c: &CompositePolynomial) -> Result<usize> {
    let mut g = PolyGraph::new();
    let x = g.input(&[1]);
    let y = emit_composite(&mut g, x, &Arc::new(c.clone()), &[1], &None);
    g.set_outputs(vec![y]);
    Ok(depth_report(&g, Budget::default())?.max_depth)
}
