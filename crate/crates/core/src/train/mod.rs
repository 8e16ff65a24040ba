//! Optimisation: AdamW, the warm-restart schedule, checkpoints and the
//! pretraining / finetuning loops.

pub mod checkpoint;
pub mod finetune;
pub mod optim;
pub mod pretrain;
pub mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, BestRecord, Checkpoint, EpochAccum, Progress};
pub use finetune::{
    classifier_model, compare_strategies, cross_entropy, evaluate_oa, finetune, FinetuneConfig, FinetuneData, FinetuneEpoch,
    FINETUNE_HEADER,
    FinetuneOutcome, Finetuner, StrategyComparison,
};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use pretrain::{
    pretrain, EpochMetrics, PretrainConfig, PretrainData, PretrainOutcome, Pretrainer, StepReport,
    METRICS_HEADER, STEPS_HEADER,
};
pub use schedule::SchedulerState;
