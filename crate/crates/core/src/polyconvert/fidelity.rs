use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{tape_inputs, PolyGraph};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, PolyMode, Tensor};
use crate::training::{argmax, batch_loss, batch_targets, Batch};
use crate::transformer::{Mode, Model};

/// Lowers the eval-mode forward pass of `model` on `batch` (logits only).
/// Polynomials are traced in clamp mode so that lowering never fails on the
/// sample values; the emitted graph itself never clamps.
pub fn lower_model(model: &Model, batch: &Batch) -> Result<(PolyGraph, Vec<Tensor>)> {
    let mut m = model.clone();
    m.set_poly_mode(PolyMode::Clamp);
    let mut g = Graph::new();
    let (fwd, _) = batch_loss(&mut g, &m, batch, Mode::Eval)?;
    let pg = PolyGraph::from_tape(&g, &[fwd.logits])?;
    Ok((pg, tape_inputs(&g)))
}

/// Graph inputs for another batch of the same shape.
pub fn model_inputs(model: &Model, batch: &Batch) -> Result<Vec<Tensor>> {
    let mut m = model.clone();
    m.set_poly_mode(PolyMode::Clamp);
    let mut g = Graph::new();
    batch_loss(&mut g, &m, batch, Mode::Eval)?;
    Ok(tape_inputs(&g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub examples: usize,
    /// Examples whose every polynomial input stayed inside its domain.
    pub in_range_examples: usize,
    pub max_deviation: f64,
    pub mean_deviation: f64,
    /// Fraction of prediction rows where both models pick the same class,
    /// over in-range examples.
    pub agreement: f64,
    /// `perplexity` or `accuracy`.
    pub metric: String,
    pub metric_original: f64,
    pub metric_polynomial: f64,
    /// Polynomial minus original.
    pub metric_delta: f64,
    /// Out-of-domain evaluations per site (the polynomial model is clamped).
    pub out_of_range: BTreeMap<String, usize>,
}

impl FidelityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// Paired per-example evaluation of two frozen models.
pub fn fidelity_report(original: &Model, polynomial: &Model, examples: &[Batch]) -> Result<FidelityReport> {
    let examples: Vec<Batch> = examples.iter().flat_map(Batch::examples).collect();
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut poly = polynomial.clone();
    poly.set_poly_mode(PolyMode::Clamp);
    let lm = matches!(examples[0], Batch::Tokens(_));
    let mut out_of_range = BTreeMap::new();
    let (mut max_dev, mut sum_dev, mut count) = (0.0f64, 0.0, 0usize);
    let (mut loss_o, mut loss_p, mut correct_o, mut correct_p, mut rows) = (0.0, 0.0, 0usize, 0usize, 0usize);
    let (mut agree, mut agree_rows, mut in_range) = (0usize, 0usize, 0usize);
    for ex in &examples {
        let mut go = Graph::new();
        let (fo, lo) = batch_loss(&mut go, original, ex, Mode::Eval)?;
        let mut gp = Graph::new();
        let (fp, lp) = batch_loss(&mut gp, &poly, ex, Mode::Eval)?;
        let (a, b) = (go.value(fo.logits), gp.value(fp.logits));
        for (x, y) in a.data().iter().zip(b.data()) {
            let d = (x - y).abs();
            max_dev = max_dev.max(d);
            sum_dev += d;
            count += 1;
        }
        let targets = batch_targets(ex);
        let n = targets.len();
        rows += n;
        loss_o += go.value(lo).item() * n as f64;
        loss_p += gp.value(lp).item() * n as f64;
        for (i, &t) in targets.iter().enumerate() {
            correct_o += usize::from(argmax(a.row(i)) == t);
            correct_p += usize::from(argmax(b.row(i)) == t);
        }
        let hits = gp.domain_hits();
        if hits.is_empty() {
            in_range += 1;
            for i in 0..n {
                agree += usize::from(argmax(a.row(i)) == argmax(b.row(i)));
            }
            agree_rows += n;
        }
        for (site, c) in hits {
            *out_of_range.entry(site.clone()).or_insert(0) += c;
        }
    }
    let (mo, mp) = if lm {
        ((loss_o / rows as f64).exp(), (loss_p / rows as f64).exp())
    } else {
        (correct_o as f64 / rows as f64, correct_p as f64 / rows as f64)
    };
    Ok(FidelityReport {
        examples: examples.len(),
        in_range_examples: in_range,
        max_deviation: max_dev,
        mean_deviation: sum_dev / count.max(1) as f64,
        agreement: if agree_rows == 0 { 0.0 } else { agree as f64 / agree_rows as f64 },
        metric: if lm { "perplexity" } else { "accuracy" }.into(),
        metric_original: mo,
        metric_polynomial: mp,
        metric_delta: mp - mo,
        out_of_range,
    })
}

/// Bounded per-operation perturbation `|noise| ≤ epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub trials: usize,
    pub epsilon: f64,
    /// Largest absolute output deviation from the noiseless run.
    pub max_deviation: f64,
    pub per_trial_max: Vec<f64>,
    /// Fraction of output rows whose argmax matches the noiseless run.
    pub agreement: f64,
}

/// Evaluates `graph` `trials` times with independent noise streams.
pub fn noisy_eval(graph: &PolyGraph, inputs: &[Tensor], noise: NoiseModel, trials: usize, seed: u64) -> Result<NoiseSummary> {
    if !(noise.epsilon >= 0.0 && noise.epsilon.is_finite()) {
        return Err(Error::Config(format!("noise epsilon must be finite and nonnegative, got {}", noise.epsilon)));
    }
    let clean = graph.eval(inputs)?;
    let mut per_trial_max = Vec::with_capacity(trials);
    let (mut agree, mut rows) = (0usize, 0usize);
    for t in 0..trials {
        let mut r = rng::stream(seed, &format!("noise/trial{t}"));
        let noisy = graph.eval_noisy(inputs, noise.epsilon, &mut r)?;
        let mut m = 0.0f64;
        for (c, n) in clean.iter().zip(&noisy) {
            m = m.max(c.max_abs_diff(n));
            if c.rank() == 2 {
                for i in 0..c.shape()[0] {
                    agree += usize::from(argmax(c.row(i)) == argmax(n.row(i)));
                    rows += 1;
                }
            }
        }
        per_trial_max.push(m);
    }
    Ok(NoiseSummary {
        trials,
        epsilon: noise.epsilon,
        max_deviation: per_trial_max.iter().copied().fold(0.0, f64::max),
        per_trial_max,
        agreement: if rows == 0 { 1.0 } else { agree as f64 / rows as f64 },
    })
}
