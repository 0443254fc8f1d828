//! Curriculum fine-tuning: stages, renormalization, split-horizon training,
//! validation tracking and the learning-rate search.

mod curriculum;
mod metrics;
mod split_sweep;
mod stage;

pub use curriculum::{table2_curriculum, CurriculumSpec, StageSpec, ValidationSpec, TABLE2};
pub use metrics::{MetricsLog, MetricsRecord};
pub use split_sweep::{split_horizon_sweep, SplitSummary, SplitSweepReport, SplitSweepRow};
pub use stage::{
    batch_scaling_report, loss_on_dates, lr_search, renormalization_stage, run_stage, split_horizon_backprop,
    stage_seed, validation_dates, validation_loss, write_scaling_csv, LrProbe, LrSearchResult, ScalingRow,
    TrainOptions, TrainingData, VALIDATION_MAX_STEPS,
};

pub(crate) use stage::thread_pool;
