//! Approximate-arithmetic noise: every arithmetic node of the converted
//! graph is perturbed by uniform noise of magnitude epsilon.

use polyformer::harness::{make_dataset, run_pipeline, stage_model, ExperimentConfig, PipelineStage};
use polyformer::polyconvert::{lower_model, noisy_eval, NoiseModel};
use polyformer::training::Split;
use polyformer::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("polyformer-noise-example");
    let mut cfg = ExperimentConfig::synth_image_fixture();
    cfg.out_dir = Some(dir.clone());
    run_pipeline(&cfg)?;
    let poly = stage_model(&cfg, PipelineStage::Convert)?;

    let data = make_dataset(cfg.task, &cfg.data, cfg.model.context_len, cfg.seed)?;
    let test = data.batches(Split::Test, 1, 1)?;
    let (graph, inputs) = lower_model(&poly, &test[0])?;
    for epsilon in [1e-9, 1e-6, 1e-3, 1e-1] {
        let s = noisy_eval(&graph, &inputs, NoiseModel { epsilon }, 50, 7)?;
        println!("epsilon {epsilon:.0e}: max output deviation {:.3e}, prediction agreement {:.2}", s.max_deviation, s.agreement);
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}
