//! Range-minimization training.
//!
//! Every forward pass exposes taps at the inputs of non-polynomial sites.
//! [`Recorder`] folds them into per-site ranges and per-position LayerNorm
//! variances; [`loss_activation_range`] and [`loss_variance`] turn the same
//! taps into differentiable penalties that [`train`] adds to the task loss.

mod data;
mod losses;
mod optim;
mod records;
mod train;

pub use data::{argmax, batch_loss, batch_targets, evaluate, Batch, Dataset, Metrics, Split};
pub use losses::{
    combined_objective, loss_activation_range, loss_variance, range_loss_value, variance_loss_value, ObjectiveWeights,
};
pub use optim::{AdamW, Schedule};
pub use records::{history_csv, record_ranges, HistoryRow, RangeRecord, Recorder, VarianceRecord, HISTORY_HEADER};
pub use train::{record_split, train, TrainConfig, TrainOutcome, TrainStage};

#[cfg(test)]
mod tests;
