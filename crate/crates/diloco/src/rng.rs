//! Deterministic RNG streams.
//!
//! Every random decision in a run draws from a ChaCha stream derived from the
//! master seed plus a `(purpose, worker_id, outer_step)` key. Streams for
//! different keys are independent, so e.g. changing the worker count never
//! perturbs another worker's data order, and a worker's batches for round `t`
//! can be reproduced in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for. The discriminant is part of the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    /// Model parameter initialization.
    Init = 1,
    /// Batch sampling during the single-worker pretraining stage.
    Pretrain = 2,
    /// Shard construction (permutation / k-means seeding).
    Shard = 3,
    /// Per-worker, per-round batch sampling during the outer loop.
    WorkerData = 4,
    /// Evaluation position sampling (fixed once per run).
    Eval = 5,
    /// Per-round communication drop mask.
    Drop = 6,
    /// Synthetic corpus generation.
    Synth = 7,
    /// The fixed train-corpus probe batch used for the train-loss column.
    Probe = 8,
}

/// Derive an independent ChaCha8 stream from `(master, purpose, worker, step)`.
pub fn stream(master_seed: u64, purpose: StreamPurpose, worker_id: u32, outer_step: u32) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    seed[16..20].copy_from_slice(&worker_id.to_le_bytes());
    seed[20..24].copy_from_slice(&outer_step.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Derive a plain `u64` (used for nested seeds, e.g. model init).
pub fn derive_seed(master_seed: u64, purpose: StreamPurpose) -> u64 {
    use rand::Rng;
    stream(master_seed, purpose, 0, 0).gen()
}
