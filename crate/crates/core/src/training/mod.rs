//! Teacher-forced training with AdamW, deterministic batching and
//! resumable checkpoints.

mod data;
mod optim;
mod trainer;

pub use data::{batch_of, epoch_rng, make_batches, make_sequences, tokenize_docs, Sequence, Stream};
pub use optim::{clip_grad_norm, AdamState, AdamW, AdamWConfig};
pub use trainer::{train, MetricsRecord, RunDir, TrainConfig, Trainer, ValMetrics};
