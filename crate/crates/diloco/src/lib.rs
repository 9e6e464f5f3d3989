//! Desk-scale distributed low-communication training.
//!
//! `k` workers each run `H` local AdamW steps on their own data shard, then
//! exchange *outer gradients* (parameter deltas) with a coordinator that
//! applies an outer optimizer (Nesterov momentum by default) and re-dispatches
//! the updated parameters. Communication happens once per round instead of
//! once per step, so a run with `T` rounds of `H` inner steps communicates
//! `H` times less than step-synchronous data parallelism.
//!
//! The crate ships two interchangeable transports: a deterministic in-process
//! one (`transport = "sim"`) and a TCP coordinator/worker pair with a framed
//! binary protocol (`transport = "tcp"`). With matched seeds the two produce
//! the same final parameters.
//!
//! The model being trained is a small byte-level context-MLP language model
//! with an analytic backward pass, so every training quantity can be checked
//! against finite differences and closed-form oracles without an ML
//! framework.

pub mod compression;
pub mod config;
pub mod data;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod par;
pub mod rng;
pub mod transport;

#[cfg(test)]
pub(crate) mod testutil;

pub use engine::{run_diloco, RunResult};
pub use numerics::ParamVector;
