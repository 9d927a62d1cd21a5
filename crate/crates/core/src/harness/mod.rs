//! Experiment driver: datasets, the three-stage pipeline, ablation sweeps
//! and polynomial fitting jobs, each emitting JSON/CSV artifacts.

mod ablation;
mod config;
mod data;
mod fitpoly;
mod pipeline;

pub use ablation::{merge_patch, run_ablation, run_metric, AblationRow, AblationSpec, AblationTable, Variant};
pub use config::{ConversionConfig, ExperimentConfig, PipelineStage};
pub use data::{corpus, decode, encode, make_dataset, oriented_bar, DataConfig, TaskKind, CHAR_VOCAB};
pub use fitpoly::{composite_depth, fit_poly, FitConfig, FitTarget};
pub use pipeline::{
    checkpoint_path, evaluate_model, inspect_model, run_pipeline, stage_model, ConversionReport, RangeSummary, RunReport,
    StageReport,
};
