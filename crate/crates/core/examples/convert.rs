//! Converts a trained model to its polynomial form, then verifies the
//! lowered graph and reports multiplicative depth and fidelity.

use polyformer::harness::{make_dataset, ExperimentConfig};
use polyformer::polyconvert::{
    convert, depth_report, fidelity_report, lower_model, plan_conversion, verify_polynomial, Budget,
};
use polyformer::training::{record_split, train, Split, TrainStage};
use polyformer::transformer::Model;
use polyformer::Result;

fn main() -> Result<()> {
    let cfg = ExperimentConfig::synth_image_fixture();
    let data = make_dataset(cfg.task, &cfg.data, cfg.model.context_len, cfg.seed)?;
    let mut model = Model::new(cfg.model.clone())?;
    train(&mut model, &data, TrainStage::Baseline, &cfg.baseline, cfg.seed)?;
    train(&mut model, &data, TrainStage::RangeMin, &cfg.range_min, cfg.seed)?;

    let rec = record_split(&model, &data, Split::Test, 64, 16)?;
    let plan = plan_conversion(&model, &rec, 0.1, &cfg.conversion.degrees)?;
    for e in &plan.entries {
        println!("{:<24} {:?} on [{:.3}, {:.3}] max error {:.2e}", e.site, e.target, e.domain.lo(), e.domain.hi(), e.max_error);
    }
    let poly = convert(&model, &plan)?;

    let test = data.batches(Split::Test, 1, 32)?;
    let (before, _) = lower_model(&model, &test[0])?;
    let (after, _) = lower_model(&poly, &test[0])?;
    println!("{} non-polynomial nodes before conversion", verify_polynomial(&before).violations.len());
    println!("after conversion: pass = {}", verify_polynomial(&after).pass);
    let depth = depth_report(&after, Budget::default())?;
    println!("depth {} with {} bootstraps, {} scalar multiplications", depth.max_depth, depth.bootstraps, depth.total_mults);

    let fid = fidelity_report(&model, &poly, &test)?;
    println!(
        "agreement {:.3} on {} in-range examples, max logit deviation {:.2e}, accuracy delta {:+.4}",
        fid.agreement, fid.in_range_examples, fid.max_deviation, fid.metric_delta
    );
    Ok(())
}
