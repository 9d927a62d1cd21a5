use serde::{Deserialize, Serialize};

use super::records::{RangeRecord, VarianceRecord};
use crate::error::{Error, Result};
use crate::tensor::{Act, Graph, ReduceKind, Tensor, Var};
use crate::transformer::{SiteRole, Tap};

/// Weights of the auxiliary terms: `α·range + β·variance + original`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { alpha: 0.01, beta: 0.01 }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config("objective weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Hard max, or `T·logsumexp(x/T)` when a temperature is given.
fn max_all(g: &mut Graph, x: Var, smooth: Option<f64>) -> Result<Var> {
    match smooth {
        Some(t) => Ok(g.logsumexp_all(x, t)),
        None => g.reduce(x, ReduceKind::Max, None),
    }
}

fn max_over(g: &mut Graph, parts: &[Var], smooth: Option<f64>) -> Result<Var> {
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let cols = parts
        .iter()
        .map(|&p| g.reshape(p, &[1, 1]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat_rows(&cols)?;
    max_all(g, stacked, smooth)
}

fn sum_or_zero(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// `Σ_layers max |x|` over the inputs of every activation site in the batch.
/// Gradients reach only the extremal elements.
pub fn loss_activation_range(g: &mut Graph, taps: &[Tap], smooth: Option<f64>) -> Result<Var> {
    let mut terms = Vec::new();
    for tap in taps.iter().filter(|t| t.role != SiteRole::LayerNorm) {
        let mut parts = Vec::with_capacity(tap.vars.len());
        for &v in &tap.vars {
            let a = g.activation(v, Act::Abs)?;
            parts.push(max_all(g, a, smooth)?);
        }
        terms.push(max_over(g, &parts, smooth)?);
    }
    sum_or_zero(g, terms)
}

/// `Σ_m max_{c, i} var^i_{m,c}` over the LayerNorm sites in the batch.
pub fn loss_variance(g: &mut Graph, taps: &[Tap], smooth: Option<f64>) -> Result<Var> {
    let mut terms = Vec::new();
    for tap in taps.iter().filter(|t| t.role == SiteRole::LayerNorm) {
        let mut parts = Vec::with_capacity(tap.vars.len());
        for &v in &tap.vars {
            parts.push(max_all(g, v, smooth)?);
        }
        terms.push(max_over(g, &parts, smooth)?);
    }
    sum_or_zero(g, terms)
}

/// `α·range + β·variance + original`. Zero weights leave `original`
/// untouched, so the result is bit-identical to it.
pub fn combined_objective(g: &mut Graph, original: Var, range: Var, variance: Var, w: ObjectiveWeights) -> Result<Var> {
    let mut total = original;
    if w.alpha != 0.0 {
        let r = g.scale(range, w.alpha);
        total = g.add(total, r)?;
    }
    if w.beta != 0.0 {
        let v = g.scale(variance, w.beta);
        total = g.add(total, v)?;
    }
    Ok(total)
}

/// Range loss evaluated on finished records.
pub fn range_loss_value(records: &[RangeRecord]) -> f64 {
    records.iter().map(RangeRecord::abs_max).sum()
}

/// Variance loss evaluated on finished records.
pub fn variance_loss_value(records: &[VarianceRecord]) -> f64 {
    records.iter().map(VarianceRecord::max).sum()
}
