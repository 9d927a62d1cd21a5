//! Baseline training followed by range minimization on the character-LM
//! fixture, compared with a control that drops the variance penalty.

use polyformer::harness::{run_pipeline, ExperimentConfig, PipelineStage};
use polyformer::Result;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::char_lm_fixture();
    cfg.stages = vec![PipelineStage::Baseline, PipelineStage::RangeMin];
    let treated = run_pipeline(&cfg)?;
    cfg.range_min.weights.beta = 0.0;
    let control = run_pipeline(&cfg)?;

    let b = &treated.stages[0];
    println!(
        "baseline: perplexity {:.3}, max |activation| {:.3}, max variance {:.3}",
        b.metrics.perplexity.unwrap_or(f64::NAN),
        b.ranges_after.max_abs_activation,
        b.ranges_after.max_variance
    );
    for (name, r) in [("range-min", &treated), ("control (beta=0)", &control)] {
        let s = &r.stages[1];
        println!(
            "{name}: perplexity {:.3}, max |activation| {:.3}, max variance {:.3}",
            s.metrics.perplexity.unwrap_or(f64::NAN),
            s.ranges_after.max_abs_activation,
            s.ranges_after.max_variance
        );
    }
    Ok(())
}
