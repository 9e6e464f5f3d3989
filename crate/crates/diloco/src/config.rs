//! Run configuration: a flat key-value file (TOML) with CLI overrides,
//! named presets, validation, and a stable hash used for run ids and the
//! coordinator/worker handshake.

use crate::data::Corpus;
use crate::model::ModelConfig;
use crate::optim::{InnerHyper, InnerKind, OuterHyper, OuterKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid value for {key}: {why}")]
    BadValue { key: &'static str, why: String },
    #[error("unknown preset '{0}' (expected baseline|8x-batch|8x-updates|diloco-default)")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataRegime {
    Iid,
    NonIid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Sim,
    Tcp,
}

/// The full, flat run configuration. Field names are the config-file keys;
/// unknown keys in a file are rejected by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    // Protocol shape.
    pub k: usize,
    pub h: usize,
    pub t: usize,
    pub pretrain_steps: usize,
    pub data_regime: DataRegime,
    pub drop_prob: f64,
    pub prune_frac: f64,
    /// "step:k" pairs, e.g. "1:4,20:8"; empty = constant k. Sim only.
    pub replica_schedule: String,
    pub master_seed: u64,
    pub transport: Transport,

    // Model.
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,

    // Data.
    pub corpus_path: String,
    pub batch_size: usize,
    pub val_frac: f64,
    pub eval_batches: usize,
    pub kmeans_iters: usize,

    // Inner optimizer.
    pub inner_kind: InnerKind,
    pub inner_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub inner_beta1: f64,
    pub inner_beta2: f64,
    pub inner_eps: f64,
    pub warmup_restart: bool,

    // Outer optimizer. A missing learning rate resolves to the tuned
    // default for the chosen kind.
    pub outer_kind: OuterKind,
    pub outer_lr: Option<f64>,
    pub outer_momentum: f64,
    pub outer_adam_beta2: f64,
    pub outer_adam_eps: f64,

    // Transport details.
    pub tcp_timeout_ms: u64,
    pub payload_f32: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            k: 4,
            h: 50,
            t: 40,
            pretrain_steps: 500,
            data_regime: DataRegime::NonIid,
            drop_prob: 0.0,
            prune_frac: 0.0,
            replica_schedule: String::new(),
            master_seed: 42,
            transport: Transport::Sim,
            vocab_size: 256,
            context_len: 16,
            embed_dim: 32,
            hidden_dim: 128,
            corpus_path: String::new(),
            batch_size: 32,
            val_frac: 0.1,
            eval_batches: 50,
            kmeans_iters: 50,
            inner_kind: InnerKind::AdamW,
            inner_lr: 4e-4,
            warmup_steps: 100,
            weight_decay: 0.1,
            inner_beta1: 0.9,
            inner_beta2: 0.99,
            inner_eps: 1e-8,
            warmup_restart: true,
            outer_kind: OuterKind::Nesterov,
            outer_lr: None,
            outer_momentum: 0.9,
            outer_adam_beta2: 0.95,
            outer_adam_eps: 0.1,
            tcp_timeout_ms: 0,
            payload_f32: false,
        }
    }
}

impl Config {
    /// Named starting points for the standard comparison runs. All of them
    /// share the same sequential step budget.
    pub fn preset(name: &str) -> Result<Config, ConfigError> {
        let mut c = Config::default();
        match name {
            // Plain single-worker training, no outer loop.
            "baseline" => {
                c.k = 1;
                c.t = 1;
                c.h = 2500;
                c.pretrain_steps = 0;
                c.data_regime = DataRegime::Iid;
                c.outer_kind = OuterKind::Sgd;
                c.outer_lr = Some(1.0);
            }
            "8x-batch" => {
                c = Config::preset("baseline")?;
                c.batch_size = 256;
            }
            "8x-updates" => {
                c = Config::preset("baseline")?;
                c.h = 20_000;
            }
            "diloco-default" => {
                c.k = 8;
                c.h = 50;
                c.t = 40;
                c.pretrain_steps = 500;
                c.data_regime = DataRegime::NonIid;
                c.outer_kind = OuterKind::Nesterov;
            }
            other => return Err(ConfigError::UnknownPreset(other.into())),
        }
        Ok(c)
    }

    /// Parse a TOML config file, starting from `base` (a preset or the
    /// defaults). Unknown keys are rejected by name.
    pub fn from_toml(base: &Config, text: &str) -> Result<Config, ConfigError> {
        let mut table: toml::Table =
            toml::from_str(&toml::to_string(base).expect("config serializes"))
                .expect("config round-trips");
        let overlay: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (k, v) in overlay {
            table.insert(k, v);
        }
        table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    /// Apply `key=value` overrides on top of this config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Config, ConfigError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut text = String::new();
        for o in overrides {
            let Some((key, value)) = o.split_once('=') else {
                return Err(ConfigError::Parse(format!("override '{o}' is not key=value")));
            };
            // Values that are not valid bare TOML (e.g. paths) are quoted.
            let line = if toml::from_str::<toml::Table>(&format!("x = {value}")).is_ok() {
                format!("{key} = {value}\n")
            } else {
                format!("{key} = {value:?}\n")
            };
            text.push_str(&line);
        }
        Config::from_toml(self, &text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(key: &'static str, why: impl Into<String>) -> ConfigError {
            ConfigError::BadValue { key, why: why.into() }
        }
        if self.k < 1 {
            return Err(bad("k", "must be >= 1"));
        }
        if self.h < 1 {
            return Err(bad("h", "must be >= 1"));
        }
        if self.t < 1 {
            return Err(bad("t", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(bad("drop_prob", "must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.prune_frac) {
            return Err(bad("prune_frac", "must be in [0, 1)"));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(bad("val_frac", "must be in (0, 1)"));
        }
        if self.batch_size < 1 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if self.eval_batches < 1 {
            return Err(bad("eval_batches", "must be >= 1"));
        }
        if self.kmeans_iters < 1 {
            return Err(bad("kmeans_iters", "must be >= 1"));
        }
        if self.inner_lr <= 0.0 {
            return Err(bad("inner_lr", "must be > 0"));
        }
        if let Some(lr) = self.outer_lr {
            if lr <= 0.0 {
                return Err(bad("outer_lr", "must be > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.outer_momentum) {
            return Err(bad("outer_momentum", "must be in [0, 1)"));
        }
        let model = self.model_cfg();
        model.validate().map_err(|e| bad("vocab_size", e.to_string()))?;
        if self.warmup_steps > self.total_steps() {
            return Err(bad("warmup_steps", format!("exceeds total steps {}", self.total_steps())));
        }
        let schedule = self.parsed_schedule()?;
        if !schedule.is_empty() && self.transport == Transport::Tcp {
            return Err(bad("replica_schedule", "adaptive schedules are sim-transport only"));
        }
        Ok(())
    }

    /// Pretraining plus every worker's sequential outer-loop steps.
    pub fn total_steps(&self) -> usize {
        self.pretrain_steps + self.t * self.h
    }

    pub fn model_cfg(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            context_len: self.context_len,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn inner_hyper(&self) -> InnerHyper {
        InnerHyper {
            kind: self.inner_kind,
            base_lr: self.inner_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps(),
            weight_decay: self.weight_decay,
            beta1: self.inner_beta1,
            beta2: self.inner_beta2,
            eps: self.inner_eps,
            warmup_restart: self.warmup_restart,
        }
    }

    pub fn resolved_outer_lr(&self) -> f64 {
        self.outer_lr.unwrap_or_else(|| OuterHyper::tuned(self.outer_kind).lr)
    }

    pub fn outer_hyper(&self) -> OuterHyper {
        OuterHyper {
            kind: self.outer_kind,
            lr: self.resolved_outer_lr(),
            momentum: self.outer_momentum,
            adam_beta2: self.outer_adam_beta2,
            adam_eps: self.outer_adam_eps,
        }
    }

    /// Parsed replica schedule: (first outer step, worker count) pairs,
    /// strictly ascending in step.
    pub fn parsed_schedule(&self) -> Result<Vec<(u32, u32)>, ConfigError> {
        let s = self.replica_schedule.trim();
        if s.is_empty() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        let mut prev = 0u32;
        for part in s.split(',') {
            let err = || ConfigError::BadValue {
                key: "replica_schedule",
                why: format!("'{part}' is not step:count"),
            };
            let (step, count) = part.trim().split_once(':').ok_or_else(err)?;
            let step: u32 = step.trim().parse().map_err(|_| err())?;
            let count: u32 = count.trim().parse().map_err(|_| err())?;
            if step <= prev || count < 1 {
                return Err(ConfigError::BadValue {
                    key: "replica_schedule",
                    why: format!("steps must be ascending and counts >= 1, got {step}:{count}"),
                });
            }
            prev = step;
            out.push((step, count));
        }
        Ok(out)
    }

    /// Worker count in effect at outer step `t` (1-based).
    pub fn k_at(&self, t: u32) -> u32 {
        let mut k = self.k as u32;
        for &(step, count) in self.parsed_schedule().unwrap_or_default().iter() {
            if step <= t {
                k = count;
            }
        }
        k
    }

    /// Largest worker count the run will ever use (fixes the shard count).
    pub fn max_k(&self) -> u32 {
        (1..=self.t as u32).map(|t| self.k_at(t)).max().unwrap_or(self.k as u32)
    }

    /// The config with every optional value made concrete; this is what the
    /// JSON sidecar contains and what the run hash covers.
    pub fn resolved(&self) -> Config {
        let mut c = self.clone();
        c.outer_lr = Some(self.resolved_outer_lr());
        c
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(&self.resolved()).expect("config serializes")
    }
}

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Stable hash over the resolved config and the corpus contents; identical
/// on coordinator and workers iff they will compute identical runs.
pub fn config_hash(cfg: &Config, corpus: &Corpus) -> u64 {
    let mut h = fnv1a(cfg.canonical_json().as_bytes(), 0xcbf29ce484222325);
    for doc in &corpus.documents {
        h = fnv1a(&[0xff], h);
        h = fnv1a(doc, h);
    }
    h
}

/// Deterministic run identifier: same config + corpus → same id.
pub fn run_id(cfg: &Config, corpus: &Corpus) -> String {
    format!("run-{:016x}", config_hash(cfg, corpus))
}
