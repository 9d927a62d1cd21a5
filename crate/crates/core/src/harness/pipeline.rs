use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PipelineStage};
use super::data::make_dataset;
use crate::error::{Error, Result};
use crate::polyconvert::{
    convert, depth_report, fidelity_report, lower_model, model_inputs, noisy_eval, plan_conversion, verify_polynomial,
    DepthReport, FidelityReport, NoiseModel, NoiseSummary,
};
use crate::polyfit::approx_error;
use crate::tensor::gelu;
use crate::training::{
    evaluate, history_csv, record_split, train, Dataset, Metrics, Recorder, Split, TrainStage,
};
use crate::transformer::{load_checkpoint, save_checkpoint, Model, Target};

/// Largest recorded activation magnitude and LayerNorm variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSummary {
    pub max_abs_activation: f64,
    pub max_variance: f64,
}

impl RangeSummary {
    pub fn of(rec: &Recorder) -> Self {
        Self {
            max_abs_activation: rec.ranges().map(|r| r.abs_max()).fold(0.0, f64::max),
            max_variance: rec.variances().map(|v| v.max()).fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: PipelineStage,
    pub metrics: Metrics,
    pub steps: usize,
    pub final_objective: Option<f64>,
    /// Ranges recorded on the test split before the stage.
    pub ranges_before: RangeSummary,
    /// Ranges recorded on the test split after the stage.
    pub ranges_after: RangeSummary,
    /// Artifact files relative to the output directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub sites: usize,
    pub verification_pass: bool,
    pub violations: usize,
    /// Worst fitted-polynomial error per site.
    pub fit_errors: BTreeMap<String, f64>,
    pub depth: DepthReport,
    pub fidelity: FidelityReport,
    pub noise: NoiseSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub dataset_digest: String,
    pub complete: bool,
    pub failure: Option<String>,
    pub stages: Vec<StageReport>,
    pub conversion: Option<ConversionReport>,
    pub config: ExperimentConfig,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn stage(&self, stage: PipelineStage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// The report without timing and output locations, for run comparisons.
    pub fn metrics_view(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serialization cannot fail");
        let obj = v.as_object_mut().expect("report is an object");
        obj.remove("wall_time_s");
        if let Some(cfg) = obj.get_mut("config").and_then(|c| c.as_object_mut()) {
            cfg.remove("out_dir");
            cfg.remove("resume_from");
        }
        v
    }
}

struct Artifacts {
    dir: Option<PathBuf>,
}

impl Artifacts {
    fn write(&self, rel: &str, contents: &str) -> Result<Option<String>> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        Ok(Some(rel.to_string()))
    }

    fn checkpoint(&self, model: &Model, stage: PipelineStage) -> Result<Option<String>> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let rel = format!("checkpoints/{}.json", stage.as_str());
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().expect("checkpoint path has a parent"))?;
        save_checkpoint(model, &path)?;
        Ok(Some(rel))
    }
}

/// Path of the checkpoint a stage writes under `out_dir`.
pub fn checkpoint_path(out_dir: &Path, stage: PipelineStage) -> PathBuf {
    out_dir.join(format!("checkpoints/{}.json", stage.as_str()))
}

fn initial_model(cfg: &ExperimentConfig) -> Result<Model> {
    let first = cfg.stages[0];
    let Some(prev) = first.previous() else {
        let mut mc = cfg.model.clone();
        mc.seed = cfg.seed;
        return Model::new(mc);
    };
    let path = match (&cfg.resume_from, &cfg.out_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => checkpoint_path(dir, prev),
        (None, None) => {
            return Err(Error::Config(format!(
                "stage {} needs resume_from or an output directory holding the {} checkpoint",
                first.as_str(),
                prev.as_str()
            )))
        }
    };
    load_checkpoint(&path).map_err(|e| Error::Config(format!("cannot resume from {}: {e}", path.display())))
}

/// Runs the configured stages in order. A failing stage ends the run with
/// a partial report (`complete = false`); configuration problems are errors.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let art = Artifacts { dir: cfg.out_dir.clone() };
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        art.write("config.json", &cfg.to_json())?;
    }
    let data = make_dataset(cfg.task, &cfg.data, cfg.model.context_len, cfg.seed)?;
    let mut model = initial_model(cfg)?;
    let mut report = RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        dataset_digest: data.digest(),
        complete: false,
        failure: None,
        stages: Vec::new(),
        conversion: None,
        config: cfg.clone(),
        wall_time_s: 0.0,
    };
    for &stage in &cfg.stages {
        let result = match stage {
            PipelineStage::Baseline | PipelineStage::RangeMin => training_stage(cfg, &data, &mut model, stage, &art),
            PipelineStage::Convert => conversion_stage(cfg, &data, &mut model, &art).map(|(s, c)| {
                report.conversion = Some(c);
                s
            }),
        };
        match result {
            Ok(s) => report.stages.push(s),
            Err(e) => {
                report.failure = Some(format!("{}: {e}", stage.as_str()));
                break;
            }
        }
    }
    report.complete = report.failure.is_none();
    report.wall_time_s = start.elapsed().as_secs_f64();
    art.write("report.json", &report.to_json())?;
    Ok(report)
}

fn training_stage(
    cfg: &ExperimentConfig,
    data: &Dataset,
    model: &mut Model,
    stage: PipelineStage,
    art: &Artifacts,
) -> Result<StageReport> {
    let (ts, tc) = match stage {
        PipelineStage::Baseline => (TrainStage::Baseline, &cfg.baseline),
        _ => (TrainStage::RangeMin, &cfg.range_min),
    };
    let out = train(model, data, ts, tc, cfg.seed)?;
    let name = stage.as_str();
    let first = out.history.first().map_or(0, |r| r.epoch);
    let before_rows: Vec<_> = out.history.iter().filter(|r| r.epoch == first).collect();
    let ranges_before = RangeSummary {
        max_abs_activation: before_rows
            .iter()
            .filter(|r| r.var_max.is_nan())
            .map(|r| r.min.abs().max(r.max.abs()))
            .fold(0.0, f64::max),
        max_variance: before_rows.iter().filter(|r| !r.var_max.is_nan()).map(|r| r.var_max).fold(0.0, f64::max),
    };
    let mut artifacts = Vec::new();
    artifacts.extend(art.write(&format!("range_history_{name}.csv"), &history_csv(&out.history))?);
    let losses: String = std::iter::once("step,objective\n".to_string())
        .chain(out.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
        .collect();
    artifacts.extend(art.write(&format!("losses_{name}.csv"), &losses)?);
    artifacts.extend(art.checkpoint(model, stage)?);
    Ok(StageReport {
        stage,
        metrics: out.metrics,
        steps: out.losses.len(),
        final_objective: out.losses.last().copied(),
        ranges_before,
        ranges_after: RangeSummary::of(&out.recorder),
        artifacts,
    })
}

fn conversion_stage(
    cfg: &ExperimentConfig,
    data: &Dataset,
    model: &mut Model,
    art: &Artifacts,
) -> Result<(StageReport, ConversionReport)> {
    let cc = &cfg.conversion;
    let batch = cfg.range_min.batch_size.max(8);
    let rec = record_split(model, data, Split::Test, cc.range_examples, batch)?;
    let plan = plan_conversion(model, &rec, cc.margin, &cc.degrees)?;
    let poly = convert(model, &plan)?;
    let mut artifacts = Vec::new();
    artifacts.extend(art.write("plan.json", &plan.to_json())?);
    let mut fit_errors = BTreeMap::new();
    for e in &plan.entries {
        artifacts.extend(art.write(&format!("polys/{}.json", e.site), &e.approx.to_json())?);
        let curve = match e.target {
            Target::Relu => approx_error(|x| e.approx.eval(x), |x| x.max(0.0), e.domain, 1001),
            Target::Gelu => approx_error(|x| e.approx.eval(x), gelu, e.domain, 1001),
            Target::InvSqrt => approx_error(|x| e.approx.eval(x), |x| 1.0 / x.sqrt(), e.domain, 1001),
        };
        let mut csv = Vec::new();
        curve.write_csv(&mut csv)?;
        artifacts.extend(art.write(
            &format!("polys/{}_error.csv", e.site),
            &String::from_utf8(csv).expect("csv is utf-8"),
        )?);
        fit_errors.insert(e.site.clone(), e.max_error);
    }

    let test = data.batches(Split::Test, 1, cc.fidelity_examples.max(cc.noise_examples).max(1))?;
    let (graph, first_inputs) = lower_model(&poly, &test[0])?;
    let verification = verify_polynomial(&graph);
    artifacts.extend(art.write("polygraph.json", &graph.to_json())?);
    artifacts.extend(art.write("violations.txt", &verification.to_text())?);
    let depth = depth_report(&graph, cc.budget)?;
    artifacts.extend(art.write("depth.json", &depth.to_json())?);

    let fidelity = fidelity_report(model, &poly, &test[..cc.fidelity_examples.min(test.len()).max(1)])?;
    artifacts.extend(art.write("fidelity.json", &fidelity.to_json())?);

    let noise = noise_over_examples(&graph, &poly, &test, first_inputs, cc.noise_examples, cc, cfg.seed)?;
    artifacts.extend(art.write("noise.json", &serde_json::to_string_pretty(&noise)?)?);

    let mut clamped = poly.clone();
    clamped.set_poly_mode(crate::tensor::PolyMode::Clamp);
    let metrics = evaluate(&clamped, &data.batches(Split::Test, batch, cc.fidelity_examples)?)?;
    *model = poly;
    artifacts.extend(art.checkpoint(model, PipelineStage::Convert)?);
    let stage = StageReport {
        stage: PipelineStage::Convert,
        metrics,
        steps: 0,
        final_objective: None,
        ranges_before: RangeSummary::of(&rec),
        ranges_after: RangeSummary::of(&rec),
        artifacts,
    };
    let conv = ConversionReport {
        sites: plan.entries.len(),
        verification_pass: verification.pass,
        violations: verification.violations.len(),
        fit_errors,
        depth,
        fidelity,
        noise,
    };
    Ok((stage, conv))
}

/// Noise trials on several test examples, pooled into one summary.
fn noise_over_examples(
    graph: &crate::polyconvert::PolyGraph,
    model: &Model,
    test: &[crate::training::Batch],
    first_inputs: Vec<crate::tensor::Tensor>,
    examples: usize,
    cc: &super::config::ConversionConfig,
    seed: u64,
) -> Result<NoiseSummary> {
    let noise = NoiseModel { epsilon: cc.noise_epsilon };
    let mut pooled: Option<NoiseSummary> = None;
    let n = examples.clamp(1, test.len());
    for (k, ex) in test[..n].iter().enumerate() {
        let inputs = if k == 0 { first_inputs.clone() } else { model_inputs(model, ex)? };
        let s = noisy_eval(graph, &inputs, noise, cc.noise_trials, crate::rng::derive_seed(seed, &format!("noise/{k}")))?;
        pooled = Some(match pooled {
            None => s,
            Some(mut p) => {
                let w = k as f64;
                p.agreement = (p.agreement * w + s.agreement) / (w + 1.0);
                p.max_deviation = p.max_deviation.max(s.max_deviation);
                for (a, b) in p.per_trial_max.iter_mut().zip(&s.per_trial_max) {
                    *a = a.max(*b);
                }
                p
            }
        });
    }
    Ok(pooled.expect("at least one example"))
}

/// Loads the checkpoint a stage left under the configured output directory,
/// or `resume_from` when set.
pub fn stage_model(cfg: &ExperimentConfig, stage: PipelineStage) -> Result<Model> {
    let path = match (&cfg.resume_from, &cfg.out_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => checkpoint_path(dir, stage),
        (None, None) => return Err(Error::Config("an output directory or resume_from is required".into())),
    };
    load_checkpoint(&path).map_err(|e| Error::Config(format!("cannot load {}: {e}", path.display())))
}

/// Lowers `model` on the first test example and checks it.
pub fn inspect_model(
    cfg: &ExperimentConfig,
    model: &Model,
) -> Result<(crate::polyconvert::PolyGraph, crate::polyconvert::Verification, DepthReport)> {
    let data = make_dataset(cfg.task, &cfg.data, cfg.model.context_len, cfg.seed)?;
    let test = data.batches(Split::Test, 1, 1)?;
    let (graph, _) = lower_model(model, &test[0])?;
    let verification = verify_polynomial(&graph);
    let depth = depth_report(&graph, cfg.conversion.budget)?;
    Ok((graph, verification, depth))
}

/// Test-split metrics of `model` over `examples` examples.
pub fn evaluate_model(cfg: &ExperimentConfig, model: &Model, examples: usize) -> Result<Metrics> {
    let data = make_dataset(cfg.task, &cfg.data, cfg.model.context_len, cfg.seed)?;
    let mut m = model.clone();
    m.set_poly_mode(crate::tensor::PolyMode::Clamp);
    evaluate(&m, &data.batches(Split::Test, cfg.baseline.batch_size.max(8), examples)?)
}
