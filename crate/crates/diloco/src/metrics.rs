//! Evaluation and experiment logging.
//!
//! Perplexity is measured on a fixed, seeded set of validation positions so
//! every round (and every run with the same seed) evaluates the exact same
//! predictions. Per-round statistics over the workers' parameter deltas
//! (pairwise cosine similarity, norms) feed the analysis columns of the CSV
//! log. One CSV file and one JSON sidecar (the fully resolved config) are
//! written per run.

use crate::data::{sample_batch, Corpus, DataError, Shard};
use crate::model::{forward_loss, Batch, ModelConfig, ModelError};
use crate::numerics::{cosine_similarity, l2_norm, ParamVector};
use crate::rng::{self, StreamPurpose};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A frozen set of evaluation positions drawn once per run from the
/// validation corpus.
pub struct EvalSet {
    batch: Batch,
}

impl EvalSet {
    /// Draw `positions` (context, target) pairs from the validation corpus
    /// using the dedicated evaluation stream.
    pub fn build(
        val: &Corpus,
        model_cfg: &ModelConfig,
        positions: usize,
        master_seed: u64,
    ) -> Result<Self, DataError> {
        let shard = Shard::whole(val);
        let mut r = rng::stream(master_seed, StreamPurpose::Eval, 0, 0);
        let batch = sample_batch(val, &shard, positions, model_cfg.context_len, &mut r)?;
        Ok(EvalSet { batch })
    }

    pub fn positions(&self) -> usize {
        self.batch.rows()
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }
}

/// exp(mean next-token negative log-likelihood) over the evaluation set.
pub fn evaluate_perplexity(
    params: &ParamVector,
    cfg: &ModelConfig,
    eval: &EvalSet,
) -> Result<f64, ModelError> {
    Ok(forward_loss(params, cfg, &eval.batch)?.exp())
}

/// Per-round statistics over worker deltas.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradStats {
    pub mean_cos_sim: Option<f64>,
    pub std_cos_sim: Option<f64>,
    pub mean_delta_norm: Option<f64>,
    pub agg_delta_norm: Option<f64>,
}

/// Mean/std of all pairwise cosine similarities among `deltas`, the mean
/// per-delta norm, and the norm of the aggregated delta. Similarity fields
/// are absent with fewer than two deltas (zero-norm pairs are skipped).
pub fn outer_grad_stats(deltas: &[&ParamVector], aggregated: Option<&ParamVector>) -> GradStats {
    let mut stats = GradStats {
        agg_delta_norm: aggregated.map(l2_norm),
        ..GradStats::default()
    };
    if deltas.is_empty() {
        return stats;
    }
    let norms: Vec<f64> = deltas.iter().map(|d| l2_norm(d)).collect();
    stats.mean_delta_norm = Some(norms.iter().sum::<f64>() / norms.len() as f64);

    let mut sims = Vec::new();
    for i in 0..deltas.len() {
        for j in i + 1..deltas.len() {
            if let Ok(c) = cosine_similarity(deltas[i], deltas[j]) {
                sims.push(c);
            }
        }
    }
    if !sims.is_empty() {
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        let var = sims.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / sims.len() as f64;
        stats.mean_cos_sim = Some(mean);
        stats.std_cos_sim = Some(var.max(0.0).sqrt());
    }
    stats
}

/// One CSV row. `outer_step` 0 is the pretraining stage; `inner_step` is the
/// per-worker sequential step count so far; `bytes_communicated` is the
/// cumulative byte total across all workers (parameter-bearing messages
/// only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub outer_step: u32,
    pub inner_step: u64,
    pub k_t: u32,
    pub val_ppl: f64,
    pub train_loss: f64,
    pub mean_cos_sim: Option<f64>,
    pub std_cos_sim: Option<f64>,
    pub mean_delta_norm: Option<f64>,
    pub agg_delta_norm: Option<f64>,
    pub dropped_count: u32,
    pub bytes_communicated: u64,
}

/// Write all records to `path` as CSV, header first.
pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a file written by [`write_csv`] back into records.
pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;
    use crate::model::init_params;
    use crate::testutil::tiny_cfg;

    fn small_eval(seed: u64) -> (ModelConfig, EvalSet) {
        let cfg = tiny_cfg();
        // Tokens must stay below the tiny vocab of 7; build documents by hand.
        let docs = vec![vec![0u8, 1, 2, 3, 4, 5, 6, 0, 1, 2, 3, 4]; 6];
        let corpus = Corpus::from_documents(docs).unwrap();
        let eval = EvalSet::build(&corpus, &cfg, 40, seed).unwrap();
        (cfg, eval)
    }

    #[test]
    fn untrained_model_scores_vocab_size() {
        let (cfg, eval) = small_eval(3);
        let p = init_params(&cfg, 9);
        let ppl = evaluate_perplexity(&p, &cfg, &eval).unwrap();
        assert!((ppl - cfg.vocab_size as f64).abs() < 1e-9, "ppl = {ppl}");
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let cfg = ModelConfig { vocab_size: 2, context_len: 2, embed_dim: 2, hidden_dim: 2 };
        let corpus = Corpus::from_documents(vec![vec![0u8; 32]]).unwrap();
        let eval = EvalSet::build(&corpus, &cfg, 16, 0).unwrap();
        // Force a huge logit for token 0 via its output bias.
        let mut p = init_params(&cfg, 0);
        let l = cfg.layout();
        p[l.b2_idx(0)] = 40.0;
        let ppl = evaluate_perplexity(&p, &cfg, &eval).unwrap();
        assert!((ppl - 1.0).abs() < 1e-9, "ppl = {ppl}");
    }

    #[test]
    fn matches_two_pass_nll_oracle() {
        let (cfg, eval) = small_eval(5);
        let p = crate::testutil::randomized_params(&cfg, 17);
        let ppl = evaluate_perplexity(&p, &cfg, &eval).unwrap();

        let l = cfg.layout();
        let b = eval.batch();
        let mut nll = 0.0;
        for r in 0..b.rows() {
            let mut logits = vec![0.0; l.vocab];
            // Direct forward: embed, tanh layer, output layer.
            let mut x = vec![0.0; l.context * l.embed_dim];
            for (j, &t) in b.context(r).iter().enumerate() {
                x[j * l.embed_dim..(j + 1) * l.embed_dim]
                    .copy_from_slice(&p.0[l.embed_row(t as usize)]);
            }
            let mut h = vec![0.0; l.hidden];
            for (i, hi) in h.iter_mut().enumerate() {
                let w = &p.0[l.w1_row(i)];
                *hi = (p[l.b1_idx(i)] + w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()).tanh();
            }
            for (o, lg) in logits.iter_mut().enumerate() {
                let w = &p.0[l.w2_row(o)];
                *lg = p[l.b2_idx(o)] + w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            }
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            nll += -(logits[b.targets[r] as usize].exp() / z).ln();
        }
        let oracle = (nll / b.rows() as f64).exp();
        assert!((ppl - oracle).abs() < 1e-10, "{ppl} vs {oracle}");
    }

    #[test]
    fn eval_set_is_fixed_across_rebuilds() {
        let corpus = synth::generate(12, 2, 120, 4);
        let cfg = ModelConfig::default();
        let a = EvalSet::build(&corpus, &cfg, 64, 7).unwrap();
        let b = EvalSet::build(&corpus, &cfg, 64, 7).unwrap();
        assert_eq!(a.batch(), b.batch());
        assert_eq!(a.positions(), 64);
    }

    #[test]
    fn stats_of_identical_deltas() {
        let d = ParamVector(vec![1.0, 2.0, -1.0]);
        let s = outer_grad_stats(&[&d, &d], Some(&d));
        assert!((s.mean_cos_sim.unwrap() - 1.0).abs() < 1e-12);
        assert!(s.std_cos_sim.unwrap().abs() < 1e-12);
        assert!((s.mean_delta_norm.unwrap() - l2_norm(&d)).abs() < 1e-15);
        assert!((s.agg_delta_norm.unwrap() - l2_norm(&d)).abs() < 1e-15);
    }

    #[test]
    fn stats_of_orthogonal_deltas() {
        let a = ParamVector(vec![1.0, 0.0]);
        let b = ParamVector(vec![0.0, 1.0]);
        let s = outer_grad_stats(&[&a, &b], None);
        assert_eq!(s.mean_cos_sim.unwrap(), 0.0);
        assert_eq!(s.agg_delta_norm, None);
    }

    #[test]
    fn stats_match_bruteforce_pairs() {
        let a = ParamVector(vec![1.0, 2.0, 3.0]);
        let b = ParamVector(vec![-1.0, 0.5, 2.0]);
        let c = ParamVector(vec![0.3, -0.7, 1.1]);
        let s = outer_grad_stats(&[&a, &b, &c], None);
        let naive = |x: &ParamVector, y: &ParamVector| {
            let dot: f64 = x.0.iter().zip(&y.0).map(|(p, q)| p * q).sum();
            let nx: f64 = x.0.iter().map(|p| p * p).sum::<f64>().sqrt();
            let ny: f64 = y.0.iter().map(|p| p * p).sum::<f64>().sqrt();
            dot / (nx * ny)
        };
        let pairs = [naive(&a, &b), naive(&a, &c), naive(&b, &c)];
        let mean = pairs.iter().sum::<f64>() / 3.0;
        let var = pairs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / 3.0;
        assert!((s.mean_cos_sim.unwrap() - mean).abs() < 1e-12);
        assert!((s.std_cos_sim.unwrap() - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_delta_has_no_similarity_fields() {
        let d = ParamVector(vec![1.0]);
        let s = outer_grad_stats(&[&d], None);
        assert_eq!(s.mean_cos_sim, None);
        assert_eq!(s.std_cos_sim, None);
        assert!(s.mean_delta_norm.is_some());
    }

    #[test]
    fn csv_round_trips_all_values() {
        let records = vec![
            MetricsRecord {
                run_id: "t1".into(),
                outer_step: 0,
                inner_step: 500,
                k_t: 1,
                val_ppl: 181.80808507937334,
                train_loss: 5.198601234567891,
                mean_cos_sim: None,
                std_cos_sim: None,
                mean_delta_norm: None,
                agg_delta_norm: None,
                dropped_count: 0,
                bytes_communicated: 0,
            },
            MetricsRecord {
                run_id: "t1".into(),
                outer_step: 1,
                inner_step: 550,
                k_t: 4,
                val_ppl: 0.1 + 0.2,
                train_loss: f64::MIN_POSITIVE,
                mean_cos_sim: Some(0.30000000000000004),
                std_cos_sim: Some(1e-300),
                mean_delta_norm: Some(2.2250738585072014e-308),
                agg_delta_norm: Some(9007199254740993.0),
                dropped_count: 2,
                bytes_communicated: 17_100_800,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("run_id").count(), 1, "header exactly once");
        assert!(text.starts_with(
            "run_id,outer_step,inner_step,k_t,val_ppl,train_loss,mean_cos_sim,std_cos_sim,\
             mean_delta_norm,agg_delta_norm,dropped_count,bytes_communicated"
        ));
        let back = read_csv(&path).unwrap();
        assert_eq!(back, records);
    }
}
