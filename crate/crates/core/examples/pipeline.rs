//! The full three-stage run on a fixture, writing every artifact to disk.
//! Pass `image` to use the synthetic image task.

use polyformer::harness::{run_pipeline, ExperimentConfig};
use polyformer::Result;

fn main() -> Result<()> {
    let mut cfg = match std::env::args().nth(1).as_deref() {
        Some("image") => ExperimentConfig::synth_image_fixture(),
        _ => ExperimentConfig::char_lm_fixture(),
    };
    let dir = std::env::temp_dir().join(format!("polyformer-{}", cfg.name));
    cfg.out_dir = Some(dir.clone());
    let report = run_pipeline(&cfg)?;
    for s in &report.stages {
        println!("{:<10} {:?}", s.stage.as_str(), s.metrics);
    }
    if let Some(c) = &report.conversion {
        println!(
            "verified {}, depth {}, bootstraps {}, agreement {:.3}, metric delta {:+.5}, noisy agreement {:.3}",
            c.verification_pass, c.depth.max_depth, c.depth.bootstraps, c.fidelity.agreement, c.fidelity.metric_delta, c.noise.agreement
        );
    }
    println!("report and artifacts in {}", dir.display());
    Ok(())
}
