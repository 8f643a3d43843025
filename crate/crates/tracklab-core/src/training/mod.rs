//! Pretraining and evaluation: the optimizer, the step, the data
//! pipeline feeding it, the pretraining loop with checkpoint/resume,
//! linear probing, finetuning, and the finite-difference harness that
//! certifies the whole step's gradients.

pub mod data;
pub mod fd;
pub mod optim;
pub mod pretrain;
pub mod probe;
pub mod step;

pub use data::{ClipBundle, DataConfig, TrackNoise, TrackingPlan, assemble_batch, epoch_order};
pub use fd::{FdReport, fd_suite};
pub use optim::{AdamW, learning_rate};
pub use pretrain::{
    PretrainOutcome, PretrainPlan, ResolvedPlan, TrainConfig, load_pretrained,
    overfit_single_batch, pretrain,
};
pub use probe::{ProbeConfig, ProbeOutcome, ProbeTask, finetune, linear_probe};
pub use step::{StepBatch, step_forward_backward, step_loss};
