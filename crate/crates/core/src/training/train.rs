use serde::{Deserialize, Serialize};

use super::data::{batch_loss, evaluate, Dataset, Metrics, Split};
use super::losses::{combined_objective, loss_activation_range, loss_variance, ObjectiveWeights};
use super::optim::{AdamW, Schedule};
use super::records::{record_ranges, HistoryRow, Recorder};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Graph;
use crate::transformer::{Mode, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Baseline,
    RangeMin,
}

impl TrainStage {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainStage::Baseline => "baseline",
            TrainStage::RangeMin => "range_min",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    /// Recording windows; ranges are recorded before training and after
    /// each epoch.
    pub epochs: usize,
    pub weights: ObjectiveWeights,
    /// Temperature of the log-sum-exp smooth maximum; hard max when absent.
    pub smooth_max: Option<f64>,
    /// Test examples used for range recording and evaluation.
    pub eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 3e-3,
            warmup_steps: 20,
            min_lr_ratio: 0.1,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            epochs: 4,
            weights: ObjectiveWeights::default(),
            smooth_max: None,
            eval_examples: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub stage: TrainStage,
    /// Objective value at every step.
    pub losses: Vec<f64>,
    pub history: Vec<HistoryRow>,
    /// Records from the last window.
    pub recorder: Recorder,
    pub metrics: Metrics,
}

/// Records ranges over up to `max_examples` examples of a split.
pub fn record_split(model: &Model, data: &Dataset, split: Split, max_examples: usize, batch: usize) -> Result<Recorder> {
    let mut rec = Recorder::new();
    for b in data.batches(split, batch, max_examples)? {
        record_ranges(model, &b, &mut rec)?;
    }
    Ok(rec)
}

/// Trains `model` in place. `RangeMin` adds the weighted auxiliary losses
/// and requires a model that already went through `Baseline`.
pub fn train(model: &mut Model, data: &Dataset, stage: TrainStage, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.weights.validate()?;
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::Config("batch_size and epochs must be positive, lr nonnegative".into()));
    }
    if stage == TrainStage::RangeMin && !model.stages().iter().any(|s| s == "baseline") {
        return Err(Error::Stage {
            stage: stage.as_str().into(),
            detail: "range minimization needs a baseline-trained model".into(),
        });
    }
    let mut batches = rng::stream(seed, &format!("batches/{}", stage.as_str()));
    let schedule = Schedule {
        peak: cfg.lr,
        warmup: cfg.warmup_steps,
        total: cfg.steps,
        floor: cfg.min_lr_ratio,
    };
    let mut opt = AdamW::new(model.params().len(), cfg.weight_decay);
    let decay: Vec<bool> = model.params().iter().map(|p| p.value.rank() == 2).collect();
    let trainable: Vec<bool> = model.params().iter().map(|p| p.trainable).collect();
    let eval_batch = cfg.batch_size.max(8);
    let mut history = Vec::new();
    if model.params().iter().any(|p| p.name.ends_with(".tracked") && p.value.data()[0] == 0.0) {
        // Batch statistics have never been observed: seed them from one
        // training-mode pass so the epoch-0 recording can run in eval mode.
        let mut prime = rng::stream(seed, &format!("bn_prime/{}", stage.as_str()));
        let batch = data.sample(&mut prime, cfg.batch_size)?;
        let mut g = Graph::new();
        let (fwd, _) = batch_loss(&mut g, model, &batch, Mode::Train)?;
        model.apply_bn_updates(&fwd.bn_updates);
    }
    let mut rec = record_split(model, data, Split::Test, cfg.eval_examples, eval_batch)?;
    history.extend(rec.history_rows(0));
    let per_epoch = cfg.steps.div_ceil(cfg.epochs).max(1);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = data.sample(&mut batches, cfg.batch_size)?;
        let mut g = Graph::new();
        let (fwd, task_loss) = batch_loss(&mut g, model, &batch, Mode::Train)?;
        let objective = match stage {
            TrainStage::Baseline => task_loss,
            TrainStage::RangeMin => {
                let r = loss_activation_range(&mut g, &fwd.taps, cfg.smooth_max)?;
                let v = loss_variance(&mut g, &fwd.taps, cfg.smooth_max)?;
                combined_objective(&mut g, task_loss, r, v, cfg.weights)?
            }
        };
        let value = g.value(objective).item();
        let lr = schedule.lr(step);
        let snapshot = |detail: &str| {
            serde_json::json!({
                "stage": stage.as_str(),
                "step": step,
                "lr": lr,
                "objective": value,
                "last_finite": losses.iter().rev().find(|l: &&f64| l.is_finite()),
                "reason": detail,
            })
            .to_string()
        };
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: snapshot("non-finite objective"),
            });
        }
        let grads = g.backward(objective)?;
        let updates: Vec<(usize, crate::tensor::Tensor)> = g
            .param_vars()
            .filter(|(p, _)| trainable[*p])
            .filter_map(|(p, v)| grads.get(v).map(|t| (p, t.clone())))
            .collect();
        let norm = updates.iter().map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: snapshot("non-finite gradient"),
            });
        }
        let clip = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (p, mut grad) in updates {
            if clip != 1.0 {
                grad = grad.map(|x| x * clip);
            }
            opt.step(p, model.param_value_mut(p), &grad, lr, decay[p]);
        }
        model.apply_bn_updates(&fwd.bn_updates);
        losses.push(value);
        if (step + 1) % per_epoch == 0 || step + 1 == cfg.steps {
            let epoch = (step + 1).div_ceil(per_epoch);
            rec = record_split(model, data, Split::Test, cfg.eval_examples, eval_batch)?;
            history.extend(rec.history_rows(epoch));
        }
    }
    model.mark_stage(stage.as_str());
    let metrics = evaluate(model, &data.batches(Split::Test, eval_batch, cfg.eval_examples)?)?;
    Ok(TrainOutcome {
        stage,
        losses,
        history,
        recorder: rec,
        metrics,
    })
}
