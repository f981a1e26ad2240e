//! Training, enhancement and evaluation over files on disk.

mod config;
mod enhance;
mod evaluate;
mod train;

pub use config::{RunConfig, KEYS as CONFIG_KEYS};
pub use enhance::{enhance_file, enhance_path, EnhanceReport, DEFAULT_SUFFIX};
pub use evaluate::{evaluate, Enhancer, EvalGroup, EvalReport, EvalRow};
pub use train::{
    dataset_loss, epoch_batches, load_pairs, sha256_hex, split_pairs, train, Pair, StepRecord, TrainOutcome,
    Trainer, LOSS_LOG_HEADER, VALID_LOG_HEADER,
};
