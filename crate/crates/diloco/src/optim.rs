//! Inner and outer optimizers.
//!
//! The inner optimizer (run by each worker between communication rounds) is
//! AdamW with decoupled weight decay, or plain SGD for the degenerate-case
//! equivalence checks. The outer optimizer (run by the coordinator on the
//! averaged parameter delta) is one of SGD, SGD-momentum, Nesterov momentum
//! (the default) or Adam with a large epsilon. The inner learning rate
//! follows linear warmup into cosine decay, with an optional warmup restart
//! when a pretraining stage hands over to the multi-worker stage.

use crate::numerics::ParamVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

fn check_len(a: usize, b: usize) -> Result<(), OptimError> {
    if a != b {
        return Err(OptimError::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerKind {
    AdamW,
    Sgd,
}

/// Inner-optimizer hyperparameters, shared by all workers.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerHyper {
    pub kind: InnerKind,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Re-run the warmup ramp when the multi-worker stage starts after
    /// pretraining (avoids a loss spike at the handover).
    pub warmup_restart: bool,
}

impl Default for InnerHyper {
    fn default() -> Self {
        InnerHyper {
            kind: InnerKind::AdamW,
            base_lr: 4e-4,
            warmup_steps: 1000,
            total_steps: 0,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            warmup_restart: true,
        }
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`. Steps beyond `total_steps` clamp to 0.
pub fn lr_schedule(step: usize, h: &InnerHyper) -> f64 {
    if step > h.total_steps {
        return 0.0;
    }
    if step < h.warmup_steps {
        return h.base_lr * step as f64 / h.warmup_steps as f64;
    }
    if h.total_steps == h.warmup_steps {
        return h.base_lr;
    }
    let f = (step - h.warmup_steps) as f64 / (h.total_steps - h.warmup_steps) as f64;
    h.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * f).cos())
}

/// Learning rate actually applied at global inner step `step` (1-indexed).
///
/// Equal to [`lr_schedule`] except when a warmup restart is active: for the
/// first `warmup_steps` steps after a nonzero pretraining stage the schedule
/// is additionally scaled by a fresh linear ramp.
pub fn effective_lr(step: usize, pretrain_steps: usize, h: &InnerHyper) -> f64 {
    let base = lr_schedule(step, h);
    if h.warmup_restart && pretrain_steps > 0 && step > pretrain_steps && h.warmup_steps > 0 {
        let since = step - pretrain_steps;
        if since < h.warmup_steps {
            return base * since as f64 / h.warmup_steps as f64;
        }
    }
    base
}

/// AdamW first/second moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub step: u64,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        AdamWState { m: ParamVector::zeros(n), v: ParamVector::zeros(n), step: 0 }
    }
}

/// One AdamW step with decoupled weight decay:
/// θ ← θ − lr·(m̂/(√v̂+ε) + weight_decay·θ).
pub fn adamw_step(
    state: &mut AdamWState,
    params: &mut ParamVector,
    grad: &ParamVector,
    h: &InnerHyper,
    lr: f64,
) -> Result<(), OptimError> {
    check_len(params.len(), grad.len())?;
    check_len(params.len(), state.m.len())?;
    state.step += 1;
    let bc1 = 1.0 - h.beta1.powi(state.step as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad.0[i];
        let m = h.beta1 * state.m.0[i] + (1.0 - h.beta1) * g;
        let v = h.beta2 * state.v.0[i] + (1.0 - h.beta2) * g * g;
        state.m.0[i] = m;
        state.v.0[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params.0[i] -= lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * params.0[i]);
    }
    Ok(())
}

/// Plain SGD step: θ ← θ − lr·(g + weight_decay·θ).
pub fn sgd_step(
    params: &mut ParamVector,
    grad: &ParamVector,
    weight_decay: f64,
    lr: f64,
) -> Result<(), OptimError> {
    check_len(params.len(), grad.len())?;
    for i in 0..params.len() {
        params.0[i] -= lr * (grad.0[i] + weight_decay * params.0[i]);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterKind {
    Sgd,
    Sgdm,
    Nesterov,
    Adam,
}

impl OuterKind {
    pub const ALL: [OuterKind; 4] = [OuterKind::Sgd, OuterKind::Sgdm, OuterKind::Nesterov, OuterKind::Adam];

    pub fn name(&self) -> &'static str {
        match self {
            OuterKind::Sgd => "sgd",
            OuterKind::Sgdm => "sgdm",
            OuterKind::Nesterov => "nesterov",
            OuterKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OuterKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(OuterKind::Sgd),
            "sgdm" => Ok(OuterKind::Sgdm),
            "nesterov" => Ok(OuterKind::Nesterov),
            "adam" => Ok(OuterKind::Adam),
            other => Err(format!("unknown outer optimizer '{other}' (expected sgd|sgdm|nesterov|adam)")),
        }
    }
}

/// First-moment coefficient for the outer Adam variant.
const OUTER_ADAM_BETA1: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct OuterHyper {
    pub kind: OuterKind,
    pub lr: f64,
    pub momentum: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl OuterHyper {
    /// Per-kind tuned learning rate with all other fields at their defaults.
    pub fn tuned(kind: OuterKind) -> Self {
        let lr = match kind {
            OuterKind::Sgd => 0.5,
            OuterKind::Sgdm => 0.3,
            OuterKind::Nesterov => 0.7,
            OuterKind::Adam => 0.3,
        };
        OuterHyper { kind, lr, momentum: 0.9, adam_beta2: 0.95, adam_eps: 0.1 }
    }
}

impl Default for OuterHyper {
    fn default() -> Self {
        OuterHyper::tuned(OuterKind::Nesterov)
    }
}

/// Momentum velocity for sgdm/nesterov outer optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub velocity: ParamVector,
}

/// Mutable state of the outer optimizer, matching its kind.
#[derive(Debug, Clone, PartialEq)]
pub enum OuterState {
    Sgd,
    Momentum(MomentumState),
    Adam(AdamWState),
}

impl OuterState {
    pub fn new(kind: OuterKind, n: usize) -> Self {
        match kind {
            OuterKind::Sgd => OuterState::Sgd,
            OuterKind::Sgdm | OuterKind::Nesterov => {
                OuterState::Momentum(MomentumState { velocity: ParamVector::zeros(n) })
            }
            OuterKind::Adam => OuterState::Adam(AdamWState::new(n)),
        }
    }
}

/// Apply one outer update. `delta` is treated as a gradient: the descent
/// direction is −delta, which moves θ toward the averaged worker parameters.
pub fn outer_step(
    state: &mut OuterState,
    theta: &mut ParamVector,
    delta: &ParamVector,
    h: &OuterHyper,
) -> Result<(), OptimError> {
    check_len(theta.len(), delta.len())?;
    match (h.kind, state) {
        (OuterKind::Sgd, OuterState::Sgd) => {
            for i in 0..theta.len() {
                theta.0[i] -= h.lr * delta.0[i];
            }
        }
        (OuterKind::Sgdm, OuterState::Momentum(ms)) => {
            check_len(theta.len(), ms.velocity.len())?;
            for i in 0..theta.len() {
                let v = h.momentum * ms.velocity.0[i] + delta.0[i];
                ms.velocity.0[i] = v;
                theta.0[i] -= h.lr * v;
            }
        }
        (OuterKind::Nesterov, OuterState::Momentum(ms)) => {
            // Look-ahead applied to the update: step along Δ + μ·v_new.
            check_len(theta.len(), ms.velocity.len())?;
            for i in 0..theta.len() {
                let v = h.momentum * ms.velocity.0[i] + delta.0[i];
                ms.velocity.0[i] = v;
                theta.0[i] -= h.lr * (delta.0[i] + h.momentum * v);
            }
        }
        (OuterKind::Adam, OuterState::Adam(st)) => {
            check_len(theta.len(), st.m.len())?;
            st.step += 1;
            let bc1 = 1.0 - OUTER_ADAM_BETA1.powi(st.step as i32);
            let bc2 = 1.0 - h.adam_beta2.powi(st.step as i32);
            for i in 0..theta.len() {
                let g = delta.0[i];
                let m = OUTER_ADAM_BETA1 * st.m.0[i] + (1.0 - OUTER_ADAM_BETA1) * g;
                let v = h.adam_beta2 * st.v.0[i] + (1.0 - h.adam_beta2) * g * g;
                st.m.0[i] = m;
                st.v.0[i] = v;
                theta.0[i] -= h.lr * (m / bc1) / ((v / bc2).sqrt() + h.adam_eps);
            }
        }
        (kind, st) => panic!("outer state {st:?} does not match kind {kind:?}"),
    }
    Ok(())
}
