//! Attention-scaling sweep over three seeds: vanilla softmax, unscaled σ and
//! σ scaled by 1/√L. Pass `batchnorm` for the BatchNorm stabilizer sweep.

use polyformer::harness::{run_ablation, AblationSpec, ExperimentConfig, PipelineStage};
use polyformer::Result;

fn main() -> Result<()> {
    let batchnorm = std::env::args().nth(1).as_deref() == Some("batchnorm");
    let mut base = ExperimentConfig::synth_image_fixture();
    base.stages = vec![PipelineStage::Baseline];
    let spec = if batchnorm { AblationSpec::batchnorm(base) } else { AblationSpec::scaling(base) };
    let (table, _) = run_ablation(&spec)?;
    print!("{}", table.to_csv());
    Ok(())
}
