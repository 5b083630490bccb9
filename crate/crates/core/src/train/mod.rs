//! Optimisation loop, schedules, evaluation, checkpoints.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use ablation::{comparison_table, median, run_ablation, run_variant, AblationRun};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{AblationSpec, PriorMode, TrainConfig, VARIANT_NAMES};
pub use metrics::{evaluate, Metrics};
pub use optim::{lr_on_plateau, Adam, PlateauState};
pub use trainer::{write_trace_csv, EpochRecord, Trainer, TrainOutcome};
