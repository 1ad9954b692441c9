//! Optimization loop, learning-rate schedule, checkpoints and ablation
//! layouts.

mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use checkpoint::{
    latest_checkpoint, list_checkpoints, Checkpoint, TrainingState, CHECKPOINT_DIR, MODEL_CONFIG_FILE, MODEL_FILE,
    OPTIMIZER_FILE, STATE_FILE,
};
pub use config::{lr_at, make_ablation_config, AblationVariant, LrSchedule, TrainConfig};
pub use optim::Sgd;
pub use trainer::{read_metrics, train, StepRecord, TrainOutcome, Trainer, METRICS_FILE, TRAIN_CONFIG_FILE};
