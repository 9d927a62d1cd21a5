//! Conversion of a range-trained model into a polynomial-only model, and the
//! audits of the result: whitelist verification, multiplicative depth and
//! bootstrap accounting, paired fidelity, and bounded-noise evaluation.

mod depth;
mod fidelity;
mod graph;
mod plan;
mod verify;

pub use depth::{depth_report, scalar_mults, Budget, DepthReport};
pub use fidelity::{fidelity_report, lower_model, model_inputs, noisy_eval, FidelityReport, NoiseModel, NoiseSummary};
pub use graph::{emit_composite, emit_polynomial, tape_inputs, NodeKind, PolyGraph, PolyNode};
pub use plan::{convert, plan_conversion, ConversionPlan, DegreeConfig, PlanEntry, RELU_GAP_CANDIDATES};
pub use verify::{verify_polynomial, Verification, Violation};

#[cfg(test)]
mod tests;
