use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polyfit::{approx_error, compose_relu_approx, fit_inverse_sqrt, remez_fit, CompositePolynomial, Interval, RemezOptions};
use crate::tensor::{gelu, PolyMode};
use crate::training::Recorder;
use crate::transformer::{AttentionKind, Model, NormKind, SiteRole, Target};

/// Candidate gaps tried when [`DegreeConfig::relu_gap`] is unset.
pub const RELU_GAP_CANDIDATES: [f64; 5] = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegreeConfig {
    pub relu_sign_degrees: Vec<usize>,
    /// Fixed sign gap; when absent the candidate with the lowest error wins.
    pub relu_gap: Option<f64>,
    pub gelu_degree: usize,
    pub inv_sqrt_seed_degree: usize,
    pub newton_steps: usize,
    /// Points of the grid used to measure each fit.
    pub error_grid: usize,
}

impl Default for DegreeConfig {
    fn default() -> Self {
        Self {
            relu_sign_degrees: vec![7, 7, 7],
            relu_gap: None,
            gelu_degree: 15,
            inv_sqrt_seed_degree: 7,
            newton_steps: 2,
            error_grid: 2001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub site: String,
    pub layer: usize,
    pub role: SiteRole,
    pub target: Target,
    /// Observed `(min, max)` of the polynomial's input.
    pub recorded: (f64, f64),
    pub domain: Interval,
    pub approx: CompositePolynomial,
    /// Max absolute error on the domain grid (relative for inverse square root).
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionPlan {
    pub margin: f64,
    pub epsilon: f64,
    pub degrees: DegreeConfig,
    pub entries: Vec<PlanEntry>,
}

impl ConversionPlan {
    pub fn entry(&self, site: &str) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.site == site)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization cannot fail")
    }
}

fn widen(lo: f64, hi: f64, margin: f64) -> (f64, f64) {
    let span = hi - lo;
    if span > 0.0 {
        (lo - margin * span, hi + margin * span)
    } else {
        let pad = 1e-6 * lo.abs().max(1.0);
        (lo - pad, hi + pad)
    }
}

/// Fits one composite polynomial per non-polynomial site of `model`, on
/// the recorded input range widened by `margin` times its width.
pub fn plan_conversion(model: &Model, recorder: &Recorder, margin: f64, degrees: &DegreeConfig) -> Result<ConversionPlan> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Config(format!("margin must be nonnegative, got {margin}")));
    }
    let eps = model.config().norm.epsilon;
    let grid = degrees.error_grid.max(2);
    let mut entries = Vec::new();
    for site in model.sites() {
        let (recorded, domain, approx, max_error) = match site.target {
            Target::InvSqrt => {
                let v = recorder.variance(&site.name).ok_or_else(|| Error::MissingRange(site.name.clone()))?;
                let recorded = (v.min + eps, v.max() + eps);
                if !(recorded.0 > 0.0) {
                    return Err(Error::InvalidDomain(format!(
                        "site {}: inverse square root domain starts at {}",
                        site.name, recorded.0
                    )));
                }
                let (lo, hi) = widen(recorded.0, recorded.1, margin);
                let domain = Interval::new(lo.max(eps).min(recorded.0), hi)?;
                let approx = fit_inverse_sqrt(domain, degrees.inv_sqrt_seed_degree, degrees.newton_steps)?;
                let err = approx_error(|x| approx.eval(x) * x.sqrt(), |_| 1.0, domain, grid).linf;
                (recorded, domain, approx, err)
            }
            Target::Relu => {
                let r = recorder.range(&site.name).ok_or_else(|| Error::MissingRange(site.name.clone()))?;
                let (lo, hi) = widen(r.min, r.max, margin);
                let bound = lo.abs().max(hi.abs()).max(1e-6);
                let domain = Interval::new(-bound, bound)?;
                let gaps: Vec<f64> = match degrees.relu_gap {
                    Some(g) => vec![g],
                    None => RELU_GAP_CANDIDATES.to_vec(),
                };
                let mut best: Option<(CompositePolynomial, f64)> = None;
                for gap in gaps {
                    let c = compose_relu_approx(&degrees.relu_sign_degrees, bound, gap)?;
                    let e = approx_error(|x| c.eval(x), |x| x.max(0.0), domain, grid).linf;
                    if best.as_ref().is_none_or(|b| e < b.1) {
                        best = Some((c, e));
                    }
                }
                let (approx, err) = best.expect("at least one gap candidate");
                ((r.min, r.max), domain, approx, err)
            }
            Target::Gelu => {
                let r = recorder.range(&site.name).ok_or_else(|| Error::MissingRange(site.name.clone()))?;
                let (lo, hi) = widen(r.min, r.max, margin);
                let domain = Interval::new(lo, hi)?;
                let fit = remez_fit(gelu, domain, degrees.gelu_degree, &RemezOptions::default())?;
                let approx = CompositePolynomial::from_poly(fit.poly);
                let err = approx_error(|x| approx.eval(x), gelu, domain, grid).linf;
                ((r.min, r.max), domain, approx, err)
            }
        };
        entries.push(PlanEntry {
            site: site.name,
            layer: site.layer,
            role: site.role,
            target: site.target,
            recorded,
            domain,
            approx,
            max_error,
        });
    }
    Ok(ConversionPlan {
        margin,
        epsilon: eps,
        degrees: degrees.clone(),
        entries,
    })
}

/// Replaces every non-polynomial site with its planned polynomial.
/// LayerNorm becomes [`NormKind::PolyLayerNorm`], BatchNorm is folded to
/// [`NormKind::AffineFrozen`], and polynomials run in strict domain mode.
/// A model that is already polynomial is returned unchanged.
pub fn convert(model: &Model, plan: &ConversionPlan) -> Result<Model> {
    if model.is_polynomial() {
        return Ok(model.clone());
    }
    let mut cfg = model.config().clone();
    if cfg.attention.kind == AttentionKind::Softmax {
        return Err(Error::Unsupported(
            "softmax attention has no polynomial form; train with sigma attention".into(),
        ));
    }
    if let Some(p) = model
        .params()
        .iter()
        .find(|p| p.name.ends_with(".tracked") && p.value.data()[0] == 0.0)
    {
        return Err(Error::MissingStats(p.name.trim_end_matches(".tracked").to_string()));
    }
    let mut out = model.clone();
    for site in model.sites() {
        let entry = plan.entry(&site.name).ok_or_else(|| Error::MissingRange(site.name.clone()))?;
        out.set_poly_site(&site.name, entry.approx.clone());
    }
    cfg.norm.kind = match cfg.norm.kind {
        NormKind::LayerNorm => NormKind::PolyLayerNorm,
        NormKind::BatchNorm => NormKind::AffineFrozen,
        k => k,
    };
    out.set_config(cfg);
    out.set_poly_mode(PolyMode::Strict);
    out.mark_stage("convert");
    Ok(out)
}
