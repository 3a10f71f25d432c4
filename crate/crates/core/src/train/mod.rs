//! Training harness: configuration, AdamW with a one-cycle schedule,
//! checkpoints, the training loop, evaluation and the ablation driver.

pub mod ablate;
pub mod checkpoint;
mod config;
pub mod data;
pub mod eval;
pub mod optim;
pub mod run;

pub use checkpoint::Checkpoint;
pub use config::{apply_override, Config, TrainConfig};
pub use data::{ClipSource, ManifestCorpus, SyntheticCorpus};
pub use eval::{evaluate, evaluate_oracle};
pub use optim::{clip_grad_norm, lr_at, AdamW, Moments};
pub use run::{init_params, read_log, train, LogLine, TrainOptions, TrainOutcome};
