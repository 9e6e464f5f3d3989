//! Byte-level context-MLP language model.
//!
//! The model predicts the next byte from the previous `context_len` bytes:
//! each context byte is embedded, the embeddings are concatenated, pushed
//! through one tanh hidden layer, and projected to `vocab_size` logits. The
//! loss is mean cross-entropy in nats. Forward and backward are fully
//! analytic, so the trainer needs no autodiff framework and the gradient can
//! be checked against finite differences.
//!
//! Parameters live in one flat [`ParamVector`] with a fixed layout
//! (embedding table, hidden weights, hidden biases, output weights, output
//! biases). Weight matrices are stored neuron-major: row `i` of a matrix is
//! the full incoming weight vector of neuron `i`, which is also the unit of
//! structured pruning downstream.
//!
//! Batch rows are processed in the fixed chunk layout from [`crate::par`],
//! and per-chunk partial losses/gradients are combined in ascending chunk
//! order, so results are bit-identical between the parallel and sequential
//! code paths.

use crate::numerics::ParamVector;
use crate::par::{self, chunk_ranges};
use crate::rng::{self, StreamPurpose};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("parameter vector has length {got}, model needs {want}")]
    ParamLength { got: usize, want: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("batch shape mismatch: {0}")]
    BadBatch(String),
    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u8, vocab: usize },
}

fn default_vocab() -> usize {
    256
}
fn default_context() -> usize {
    16
}
fn default_embed() -> usize {
    32
}
fn default_hidden() -> usize {
    128
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_context")]
    pub context_len: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            context_len: 16,
            embed_dim: 32,
            hidden_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0 || self.vocab_size > 256 {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size must be in 1..=256, got {}",
                self.vocab_size
            )));
        }
        if self.context_len == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(ModelError::InvalidConfig("all dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layout().param_count
    }

    pub fn layout(&self) -> Layout {
        let v = self.vocab_size;
        let c = self.context_len;
        let e = self.embed_dim;
        let h = self.hidden_dim;
        let embed = 0..v * e;
        let w1 = embed.end..embed.end + h * c * e;
        let b1 = w1.end..w1.end + h;
        let w2 = b1.end..b1.end + v * h;
        let b2 = w2.end..w2.end + v;
        Layout {
            vocab: v,
            context: c,
            embed_dim: e,
            hidden: h,
            embed,
            w1,
            b1,
            w2,
            b2: b2.clone(),
            param_count: b2.end,
        }
    }
}

/// One pruning unit: a contiguous weight row plus an optional bias index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuronGroup {
    pub weights: Range<usize>,
    pub bias: Option<usize>,
}

impl NeuronGroup {
    /// Parameter indices of the group, weights first, bias last.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights.clone().chain(self.bias.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.weights.len() + usize::from(self.bias.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub vocab: usize,
    pub context: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub embed: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub param_count: usize,
}

impl Layout {
    /// Embedding row for token `t`.
    pub fn embed_row(&self, t: usize) -> Range<usize> {
        let start = self.embed.start + t * self.embed_dim;
        start..start + self.embed_dim
    }

    /// Incoming weights of hidden neuron `i`.
    pub fn w1_row(&self, i: usize) -> Range<usize> {
        let w = self.context * self.embed_dim;
        let start = self.w1.start + i * w;
        start..start + w
    }

    pub fn b1_idx(&self, i: usize) -> usize {
        self.b1.start + i
    }

    /// Incoming weights of output neuron `o`.
    pub fn w2_row(&self, o: usize) -> Range<usize> {
        let start = self.w2.start + o * self.hidden;
        start..start + self.hidden
    }

    pub fn b2_idx(&self, o: usize) -> usize {
        self.b2.start + o
    }

    /// All neuron groups: each hidden/output neuron's incoming weight row
    /// plus its bias index, and each embedding row (no bias). These are the
    /// units structured pruning operates on.
    pub fn neuron_groups(&self) -> Vec<NeuronGroup> {
        let mut groups = Vec::with_capacity(self.vocab + self.hidden + self.vocab);
        for t in 0..self.vocab {
            groups.push(NeuronGroup { weights: self.embed_row(t), bias: None });
        }
        for i in 0..self.hidden {
            groups.push(NeuronGroup { weights: self.w1_row(i), bias: Some(self.b1_idx(i)) });
        }
        for o in 0..self.vocab {
            groups.push(NeuronGroup { weights: self.w2_row(o), bias: Some(self.b2_idx(o)) });
        }
        groups
    }
}

/// A training batch: `rows` contexts of `context_len` token ids, flattened,
/// plus one target id per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub contexts: Vec<u8>,
    pub targets: Vec<u8>,
    pub context_len: usize,
}

impl Batch {
    pub fn new(contexts: Vec<u8>, targets: Vec<u8>, context_len: usize) -> Result<Self, ModelError> {
        if targets.is_empty() {
            return Err(ModelError::BadBatch("batch must have at least one row".into()));
        }
        if contexts.len() != targets.len() * context_len {
            return Err(ModelError::BadBatch(format!(
                "{} context tokens for {} rows of length {}",
                contexts.len(),
                targets.len(),
                context_len
            )));
        }
        Ok(Batch { contexts, targets, context_len })
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn context(&self, r: usize) -> &[u8] {
        &self.contexts[r * self.context_len..(r + 1) * self.context_len]
    }
}

/// Initialize parameters from a seeded stream: embedding and hidden weights
/// uniform in ±1/√fan_in, output weights and all biases exactly zero. The
/// zero output layer makes the initial logits uniform, so the initial loss
/// is exactly ln(vocab_size).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamVector {
    let l = cfg.layout();
    let mut p = vec![0.0; l.param_count];
    let mut r = rng::stream(seed, StreamPurpose::Init, 0, 0);
    let se = 1.0 / (cfg.embed_dim as f64).sqrt();
    for x in &mut p[l.embed.clone()] {
        *x = r.gen_range(-se..se);
    }
    let sw = 1.0 / ((cfg.context_len * cfg.embed_dim) as f64).sqrt();
    for x in &mut p[l.w1.clone()] {
        *x = r.gen_range(-sw..sw);
    }
    ParamVector(p)
}

fn check(params: &ParamVector, cfg: &ModelConfig, batch: &Batch) -> Result<Layout, ModelError> {
    cfg.validate()?;
    let l = cfg.layout();
    if params.len() != l.param_count {
        return Err(ModelError::ParamLength { got: params.len(), want: l.param_count });
    }
    if batch.context_len != cfg.context_len {
        return Err(ModelError::BadBatch(format!(
            "batch context length {} vs model {}",
            batch.context_len, cfg.context_len
        )));
    }
    for &t in batch.contexts.iter().chain(&batch.targets) {
        if (t as usize) >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
        }
    }
    Ok(l)
}

/// Forward pass over one chunk of batch rows; returns the summed (not yet
/// averaged) loss.
fn chunk_loss(p: &[f64], l: &Layout, batch: &Batch, rows: Range<usize>) -> f64 {
    let ce = l.context * l.embed_dim;
    let mut x = vec![0.0; ce];
    let mut h = vec![0.0; l.hidden];
    let mut logits = vec![0.0; l.vocab];
    let mut sum = 0.0;
    for r in rows {
        embed_context(p, l, batch.context(r), &mut x);
        hidden_forward(p, l, &x, &mut h);
        logits_forward(p, l, &h, &mut logits);
        let (lse, _max) = log_sum_exp(&logits);
        sum += lse - logits[batch.targets[r] as usize];
    }
    sum
}

/// Forward + backward over one chunk; returns (summed loss, summed gradient).
fn chunk_loss_grad(p: &[f64], l: &Layout, batch: &Batch, rows: Range<usize>) -> (f64, Vec<f64>) {
    let ce = l.context * l.embed_dim;
    let mut grad = vec![0.0; l.param_count];
    let mut x = vec![0.0; ce];
    let mut h = vec![0.0; l.hidden];
    let mut logits = vec![0.0; l.vocab];
    let mut dlogits = vec![0.0; l.vocab];
    let mut dh = vec![0.0; l.hidden];
    let mut dx = vec![0.0; ce];
    let mut sum = 0.0;
    for r in rows {
        let ctx = batch.context(r);
        embed_context(p, l, ctx, &mut x);
        hidden_forward(p, l, &x, &mut h);
        logits_forward(p, l, &h, &mut logits);

        let (lse, max) = log_sum_exp(&logits);
        let t = batch.targets[r] as usize;
        sum += lse - logits[t];

        // d(loss_row)/d(logits) = softmax − onehot(target)
        let z = (lse - max).exp();
        for (dl, &lg) in dlogits.iter_mut().zip(&logits) {
            *dl = (lg - max).exp() / z;
        }
        dlogits[t] -= 1.0;

        // Output layer: accumulate dW2/db2 and back-propagate into dh.
        dh.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..l.vocab {
            let g = dlogits[o];
            let row = l.w2_row(o);
            let w = &p[row.clone()];
            let gw = &mut grad[row];
            for i in 0..l.hidden {
                gw[i] += g * h[i];
                dh[i] += g * w[i];
            }
            grad[l.b2_idx(o)] += g;
        }

        // Hidden layer: tanh' = 1 − h², then dW1/db1 and dx.
        dx.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..l.hidden {
            let da = dh[i] * (1.0 - h[i] * h[i]);
            if da == 0.0 {
                continue;
            }
            let row = l.w1_row(i);
            let w = &p[row.clone()];
            let gw = &mut grad[row];
            for j in 0..ce {
                gw[j] += da * x[j];
                dx[j] += da * w[j];
            }
            grad[l.b1_idx(i)] += da;
        }

        // Embedding rows used by this context.
        for (j, &t) in ctx.iter().enumerate() {
            let row = l.embed_row(t as usize);
            let ge = &mut grad[row];
            for (gi, dxi) in ge.iter_mut().zip(&dx[j * l.embed_dim..(j + 1) * l.embed_dim]) {
                *gi += dxi;
            }
        }
    }
    (sum, grad)
}

fn embed_context(p: &[f64], l: &Layout, ctx: &[u8], x: &mut [f64]) {
    for (j, &t) in ctx.iter().enumerate() {
        let row = l.embed_row(t as usize);
        x[j * l.embed_dim..(j + 1) * l.embed_dim].copy_from_slice(&p[row]);
    }
}

fn hidden_forward(p: &[f64], l: &Layout, x: &[f64], h: &mut [f64]) {
    for i in 0..l.hidden {
        let w = &p[l.w1_row(i)];
        let mut s = p[l.b1_idx(i)];
        for (wj, xj) in w.iter().zip(x) {
            s += wj * xj;
        }
        h[i] = s.tanh();
    }
}

fn logits_forward(p: &[f64], l: &Layout, h: &[f64], logits: &mut [f64]) {
    for o in 0..l.vocab {
        let w = &p[l.w2_row(o)];
        let mut s = p[l.b2_idx(o)];
        for (wi, hi) in w.iter().zip(h) {
            s += wi * hi;
        }
        logits[o] = s;
    }
}

/// Numerically stable log(Σ exp(logits)); also returns the max logit.
fn log_sum_exp(logits: &[f64]) -> (f64, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &l in logits {
        z += (l - max).exp();
    }
    (max + z.ln(), max)
}

fn combine_losses(chunks: Vec<f64>, rows: usize) -> f64 {
    chunks.into_iter().sum::<f64>() / rows as f64
}

fn combine_grads(chunks: Vec<(f64, Vec<f64>)>, rows: usize, n: usize) -> (f64, ParamVector) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for (l, g) in chunks {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv = 1.0 / rows as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    (loss * inv, ParamVector(grad))
}

/// Mean cross-entropy (nats) of next-token prediction over the batch.
pub fn forward_loss(params: &ParamVector, cfg: &ModelConfig, batch: &Batch) -> Result<f64, ModelError> {
    let l = check(params, cfg, batch)?;
    let ranges = chunk_ranges(batch.rows());
    let parts = par::map_indexed(ranges.len(), |c| chunk_loss(&params.0, &l, batch, ranges[c].clone()));
    Ok(combine_losses(parts, batch.rows()))
}

/// Loss plus its analytic gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &ParamVector,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<(f64, ParamVector), ModelError> {
    let l = check(params, cfg, batch)?;
    let ranges = chunk_ranges(batch.rows());
    let parts = par::map_indexed(ranges.len(), |c| chunk_loss_grad(&params.0, &l, batch, ranges[c].clone()));
    Ok(combine_grads(parts, batch.rows(), l.param_count))
}

/// Sequential-only variant of [`loss_and_grad`], arithmetic-identical to the
/// parallel path (same chunking, same combine order). Exists so benchmarks
/// can compare the two code paths within one build.
pub fn loss_and_grad_serial(
    params: &ParamVector,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<(f64, ParamVector), ModelError> {
    let l = check(params, cfg, batch)?;
    let ranges = chunk_ranges(batch.rows());
    let parts =
        par::map_indexed_serial(ranges.len(), |c| chunk_loss_grad(&params.0, &l, batch, ranges[c].clone()));
    Ok(combine_grads(parts, batch.rows(), l.param_count))
}

/// Gradient alone; see [`loss_and_grad`].
pub fn backward(params: &ParamVector, cfg: &ModelConfig, batch: &Batch) -> Result<ParamVector, ModelError> {
    Ok(loss_and_grad(params, cfg, batch)?.1)
}
