//! Shared helpers for unit tests.

use crate::model::{Batch, ModelConfig};
use crate::numerics::ParamVector;
use crate::rng::{self, StreamPurpose};
use rand::Rng;

pub fn tiny_cfg() -> ModelConfig {
    ModelConfig { vocab_size: 7, context_len: 3, embed_dim: 4, hidden_dim: 5 }
}

/// Fill every parameter (including the normally-zero output layer) so
/// gradients flow through all blocks.
pub fn randomized_params(cfg: &ModelConfig, seed: u64) -> ParamVector {
    let mut r = rng::stream(seed, StreamPurpose::Init, 1, 0);
    ParamVector((0..cfg.param_count()).map(|_| r.gen_range(-0.5..0.5)).collect())
}

pub fn random_batch(cfg: &ModelConfig, rows: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, StreamPurpose::WorkerData, 0, 0);
    let contexts = (0..rows * cfg.context_len)
        .map(|_| r.gen_range(0..cfg.vocab_size) as u8)
        .collect();
    let targets = (0..rows).map(|_| r.gen_range(0..cfg.vocab_size) as u8).collect();
    Batch::new(contexts, targets, cfg.context_len).unwrap()
}
