use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ExperimentConfig;
use super::data::TaskKind;
use super::pipeline::{run_pipeline, RunReport};
use crate::error::{Error, Result};

/// One architecture variant: a JSON merge patch applied to the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub overrides: Value,
}

impl Variant {
    pub fn new(name: &str, overrides: Value) -> Self {
        Self {
            name: name.into(),
            overrides,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub base: ExperimentConfig,
    pub variants: Vec<Variant>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses the available parallelism.
    #[serde(default)]
    pub threads: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// RFC 7386 merge patch.
pub fn merge_patch(target: &mut Value, patch: &Value) {
    match patch {
        Value::Object(p) => {
            if !target.is_object() {
                *target = Value::Object(Default::default());
            }
            let t = target.as_object_mut().expect("just made an object");
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        other => *target = other.clone(),
    }
}

impl AblationSpec {
    /// Vanilla softmax, unscaled σ and post-scaled σ attention.
    pub fn scaling(base: ExperimentConfig) -> Self {
        let att = |v: Value| serde_json::json!({ "model": { "attention": v } });
        Self {
            base,
            variants: vec![
                Variant::new("vanilla", att(serde_json::json!({ "kind": "softmax" }))),
                Variant::new("sigma", att(serde_json::json!({ "kind": "sigma", "scale_fn": "none" }))),
                Variant::new(
                    "scaled_sigma",
                    att(serde_json::json!({ "kind": "sigma", "scale_fn": "inv_sqrt_len", "scale_pos": "post" })),
                ),
            ],
            seeds: default_seeds(),
            threads: 0,
        }
    }

    /// Cumulative BatchNorm stabilizers for σ-attention: LayerNorm original
    /// (O), BatchNorm (B), per-head score BatchNorm (QK), extra MLP
    /// BatchNorm (A) and post length scaling (S).
    pub fn batchnorm(base: ExperimentConfig) -> Self {
        let v = |norm: &str, qk: bool, extra: bool, scaled: bool| {
            serde_json::json!({ "model": {
                "norm": { "kind": norm, "extra_mlp_bn": extra },
                "attention": {
                    "kind": "sigma",
                    "qk_batchnorm2d": qk,
                    "scale_fn": if scaled { "inv_sqrt_len" } else { "none" },
                    "scale_pos": "post",
                },
            }})
        };
        Self {
            base,
            variants: vec![
                Variant::new("O", v("layer_norm", false, false, false)),
                Variant::new("B", v("batch_norm", false, false, false)),
                Variant::new("B+QK", v("batch_norm", true, false, false)),
                Variant::new("B+QK+A", v("batch_norm", true, true, false)),
                Variant::new("B+QK+A+S", v("batch_norm", true, true, true)),
            ],
            seeds: default_seeds(),
            threads: 0,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid ablation spec: {e}")))?;
        for v in &spec.variants {
            spec.config_for(v, 0)?;
        }
        Ok(spec)
    }

    /// Base config with the variant patch applied and the given seed.
    pub fn config_for(&self, variant: &Variant, seed: u64) -> Result<ExperimentConfig> {
        let mut json = serde_json::to_value(&self.base)?;
        if !variant.overrides.is_null() {
            merge_patch(&mut json, &variant.overrides);
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(json)
            .map_err(|e| Error::Config(format!("variant {}: {e}", variant.name)))?;
        cfg.seed = seed;
        cfg.name = format!("{}/{}", self.base.name, variant.name);
        cfg.out_dir = self
            .base
            .out_dir
            .as_ref()
            .map(|d| d.join(format!("{}/seed{seed}", sanitize(&variant.name))));
        cfg.validate()?;
        Ok(cfg)
    }
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// `perplexity` (lower is better) or `accuracy` (higher is better).
    pub metric: String,
    /// Final metric per seed; `None` when the run diverged or failed.
    pub values: Vec<Option<f64>>,
    pub diverged: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

impl AblationRow {
    /// Whether this row is at least as good as `other`: fewer divergences,
    /// then the better mean.
    pub fn at_least(&self, other: &AblationRow) -> bool {
        if self.diverged != other.diverged {
            return self.diverged < other.diverged;
        }
        match (self.mean, other.mean) {
            (Some(a), Some(b)) if self.metric == "perplexity" => a <= b,
            (Some(a), Some(b)) => a >= b,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// `variant,metric,mean,sd,diverged,seed<k>...`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,metric,mean,sd,diverged");
        for seed in &self.seeds {
            s.push_str(&format!(",seed{seed}"));
        }
        s.push('\n');
        let cell = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}", r.variant, r.metric, cell(r.mean), cell(r.sd), r.diverged));
            for v in &r.values {
                s.push(',');
                s.push_str(&cell(*v));
            }
            s.push('\n');
        }
        s
    }
}

/// Final metric of the last completed training stage.
pub fn run_metric(report: &RunReport) -> Option<(String, f64)> {
    if !report.complete {
        return None;
    }
    let last = report.stages.iter().rev().find(|s| s.steps > 0)?;
    match (last.metrics.perplexity, last.metrics.accuracy) {
        (Some(p), _) if p.is_finite() => Some(("perplexity".into(), p)),
        (_, Some(a)) => Some(("accuracy".into(), a)),
        _ => None,
    }
}

/// Runs every variant under every seed and tabulates mean ± sd.
pub fn run_ablation(spec: &AblationSpec) -> Result<(AblationTable, Vec<Vec<RunReport>>)> {
    if spec.variants.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one variant and one seed".into()));
    }
    let mut jobs = Vec::new();
    for (vi, v) in spec.variants.iter().enumerate() {
        for (si, &seed) in spec.seeds.iter().enumerate() {
            jobs.push((vi, si, spec.config_for(v, seed)?));
        }
    }
    let threads = if spec.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        spec.threads
    }
    .min(jobs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunReport>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                if j >= jobs.len() {
                    break;
                }
                let r = run_pipeline(&jobs[j].2);
                results.lock().expect("no worker panics while holding the lock")[j] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("workers finished");
    let mut reports: Vec<Vec<RunReport>> = vec![Vec::new(); spec.variants.len()];
    for ((vi, _, _), r) in jobs.iter().zip(results) {
        reports[*vi].push(r.expect("every job ran")?);
    }
    let rows = spec
        .variants
        .iter()
        .zip(&reports)
        .map(|(v, runs)| {
            let metrics: Vec<Option<(String, f64)>> = runs.iter().map(run_metric).collect();
            let metric = metrics
                .iter()
                .flatten()
                .map(|m| m.0.clone())
                .next()
                .unwrap_or_else(|| {
                    match spec.base.task {
                        TaskKind::CharLm => "perplexity",
                        TaskKind::SynthImage => "accuracy",
                    }
                    .into()
                });
            let values: Vec<Option<f64>> = metrics.iter().map(|m| m.as_ref().map(|m| m.1)).collect();
            let ok: Vec<f64> = values.iter().flatten().copied().collect();
            let mean = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
            let sd = mean.map(|m| {
                if ok.len() < 2 {
                    0.0
                } else {
                    (ok.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (ok.len() - 1) as f64).sqrt()
                }
            });
            AblationRow {
                variant: v.name.clone(),
                metric,
                diverged: values.iter().filter(|x| x.is_none()).count(),
                values,
                mean,
                sd,
            }
        })
        .collect();
    let table = AblationTable {
        seeds: spec.seeds.clone(),
        rows,
    };
    if let Some(dir) = &spec.base.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), table.to_csv())?;
    }
    Ok((table, reports))
}
