//! Optimization, checkpoints, evaluation and cross-validated comparison.

mod ablation;
mod checkpoint;
mod evaluate;
mod optim;
mod trainer;

pub use ablation::{run_ablation, AblationEntry, AblationResult, ModelResult};
pub use checkpoint::{load_pretrained, Checkpoint, LoadMode, LoadReport};
pub use evaluate::{evaluate, evaluate_checkpoint, evaluate_masks, mean_dsc, predict, segment};
pub use optim::{rmsprop_step, OptimizerState, RmsPropConfig};
pub use trainer::{
    select, train, train_on, Control, History, HistoryRow, TrainConfig, TrainOutcome,
    HISTORY_HEADER,
};
