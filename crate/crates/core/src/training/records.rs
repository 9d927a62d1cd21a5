use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::data::{batch_loss, Batch};
use crate::error::Result;
use crate::tensor::Graph;
use crate::transformer::{Forward, Mode, Model, SiteRole};

/// Observed extrema at the input of one activation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRecord {
    pub site: String,
    pub layer: usize,
    pub role: SiteRole,
    pub min: f64,
    pub max: f64,
}

impl RangeRecord {
    pub fn abs_max(&self) -> f64 {
        self.max.abs().max(self.min.abs())
    }
}

/// Per-channel variance statistics at one LayerNorm. A channel is a token
/// position; each example contributes one variance per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRecord {
    pub site: String,
    pub layer: usize,
    pub channel_max: Vec<f64>,
    pub channel_mean: Vec<f64>,
    /// Smallest variance seen anywhere, used for inverse-square-root domains.
    pub min: f64,
    counts: Vec<usize>,
}

impl VarianceRecord {
    pub fn max(&self) -> f64 {
        self.channel_max.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        let (s, n) = self
            .channel_mean
            .iter()
            .zip(&self.counts)
            .fold((0.0, 0usize), |(s, n), (m, &c)| (s + m * c as f64, n + c));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

/// Running range and variance records over a recording window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Recorder {
    ranges: BTreeMap<String, RangeRecord>,
    variances: BTreeMap<String, VarianceRecord>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts a new recording window.
    pub fn reset(&mut self) {
        self.ranges.clear();
        self.variances.clear();
    }

    pub fn ranges(&self) -> impl Iterator<Item = &RangeRecord> {
        self.ranges.values()
    }

    pub fn variances(&self) -> impl Iterator<Item = &VarianceRecord> {
        self.variances.values()
    }

    pub fn range(&self, site: &str) -> Option<&RangeRecord> {
        self.ranges.get(site)
    }

    pub fn variance(&self, site: &str) -> Option<&VarianceRecord> {
        self.variances.get(site)
    }

    /// Copy with every activation range shrunk toward its midpoint and every
    /// variance maximum pulled toward its minimum by `factor` in `(0, 1]`.
    pub fn narrowed(&self, factor: f64) -> Recorder {
        let mut out = self.clone();
        for r in out.ranges.values_mut() {
            let (mid, half) = ((r.min + r.max) / 2.0, (r.max - r.min) / 2.0);
            r.min = mid - half * factor;
            r.max = mid + half * factor;
        }
        for v in out.variances.values_mut() {
            for m in &mut v.channel_max {
                *m = v.min + (*m - v.min) * factor;
            }
        }
        out
    }

    /// Folds the taps of one forward pass into the records.
    pub fn observe(&mut self, g: &Graph, fwd: &Forward) {
        for tap in &fwd.taps {
            if tap.role == SiteRole::LayerNorm {
                let len = fwd.seq_len;
                let rec = self.variances.entry(tap.site.clone()).or_insert_with(|| VarianceRecord {
                    site: tap.site.clone(),
                    layer: tap.layer,
                    channel_max: vec![0.0; len],
                    channel_mean: vec![0.0; len],
                    min: f64::INFINITY,
                    counts: vec![0; len],
                });
                if rec.channel_max.len() < len {
                    rec.channel_max.resize(len, 0.0);
                    rec.channel_mean.resize(len, 0.0);
                    rec.counts.resize(len, 0);
                }
                for v in &tap.vars {
                    for (i, &x) in g.value(*v).data().iter().enumerate() {
                        let c = i % len;
                        rec.channel_max[c] = rec.channel_max[c].max(x);
                        rec.counts[c] += 1;
                        rec.channel_mean[c] += (x - rec.channel_mean[c]) / rec.counts[c] as f64;
                        rec.min = rec.min.min(x);
                    }
                }
            } else {
                let rec = self.ranges.entry(tap.site.clone()).or_insert_with(|| RangeRecord {
                    site: tap.site.clone(),
                    layer: tap.layer,
                    role: tap.role,
                    min: f64::INFINITY,
                    max: f64::NEG_INFINITY,
                });
                for v in &tap.vars {
                    for &x in g.value(*v).data() {
                        rec.min = rec.min.min(x);
                        rec.max = rec.max.max(x);
                    }
                }
            }
        }
    }

    /// One CSV row per site: `epoch,layer_id,role,min,max,var_mean,var_max`.
    pub fn history_rows(&self, epoch: usize) -> Vec<HistoryRow> {
        let mut rows: Vec<HistoryRow> = self
            .ranges
            .values()
            .map(|r| HistoryRow {
                epoch,
                layer_id: r.site.clone(),
                role: r.role,
                min: r.min,
                max: r.max,
                var_mean: f64::NAN,
                var_max: f64::NAN,
            })
            .collect();
        rows.extend(self.variances.values().map(|v| HistoryRow {
            epoch,
            layer_id: v.site.clone(),
            role: SiteRole::LayerNorm,
            min: v.min,
            max: v.max(),
            var_mean: v.mean(),
            var_max: v.max(),
        }));
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub layer_id: String,
    pub role: SiteRole,
    pub min: f64,
    pub max: f64,
    pub var_mean: f64,
    pub var_max: f64,
}

pub const HISTORY_HEADER: &str = "epoch,layer_id,role,min,max,var_mean,var_max";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        let opt = |x: f64| if x.is_nan() { String::new() } else { format!("{x}") };
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch,
            r.layer_id,
            r.role.as_str(),
            r.min,
            r.max,
            opt(r.var_mean),
            opt(r.var_max)
        ));
    }
    s
}

/// Eval-mode pass over `batch`, folding its statistics into `recorder`.
pub fn record_ranges(model: &Model, batch: &Batch, recorder: &mut Recorder) -> Result<()> {
    let mut g = Graph::new();
    let (fwd, _) = batch_loss(&mut g, model, batch, Mode::Eval)?;
    recorder.observe(&g, &fwd);
    Ok(())
}
