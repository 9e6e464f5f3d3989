//! Corpus loading, train/validation splitting, sharding and batch sampling.
//!
//! A corpus is a list of byte documents (blank-line delimited in files).
//! Training documents are partitioned into k shards either randomly ("iid")
//! or by clustering byte-histogram features ("noniid"), so shards can be
//! made distributionally distinct on purpose. Batches are sampled with
//! replacement: pick a document weighted by its number of eligible context
//! positions, then a start offset uniformly within it.

pub mod kmeans;
pub mod synth;

use crate::model::Batch;
use crate::rng::{self, StreamPurpose};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("need at least {k} documents to build {k} shards, corpus has {docs}")]
    TooFewDocuments { k: usize, docs: usize },
    #[error("validation fraction {frac} leaves no training documents")]
    BadSplit { frac: f64 },
    #[error("no document long enough to sample a context of {context_len}+1 bytes")]
    NoEligibleDocument { context_len: usize },
}

/// An in-memory corpus of byte documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Vec<u8>>,
    pub total_tokens: usize,
}

impl Corpus {
    pub fn from_documents(documents: Vec<Vec<u8>>) -> Result<Self, DataError> {
        if documents.is_empty() || documents.iter().any(|d| d.is_empty()) {
            return Err(DataError::EmptyCorpus);
        }
        let total_tokens = documents.iter().map(|d| d.len()).sum();
        Ok(Corpus { documents, total_tokens })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

/// Parse a blank-line delimited corpus from raw file bytes. Document-internal
/// newlines are preserved; delimiter lines are excluded.
pub fn parse_corpus(raw: &[u8]) -> Result<Corpus, DataError> {
    let mut documents = Vec::new();
    let mut current: Vec<u8> = Vec::new();
    for line in raw.split(|&b| b == b'\n') {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line.is_empty() {
            if !current.is_empty() {
                documents.push(std::mem::take(&mut current));
            }
        } else {
            if !current.is_empty() {
                current.push(b'\n');
            }
            current.extend_from_slice(line);
        }
    }
    if !current.is_empty() {
        documents.push(current);
    }
    Corpus::from_documents(documents)
}

pub fn load_corpus(path: &Path) -> Result<Corpus, DataError> {
    let raw = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&raw)
}

/// Split off the last `val_frac` of documents as a validation corpus.
pub fn split_validation(corpus: &Corpus, val_frac: f64) -> Result<(Corpus, Corpus), DataError> {
    let n = corpus.len();
    let val = ((n as f64 * val_frac) as usize).max(1);
    if val >= n {
        return Err(DataError::BadSplit { frac: val_frac });
    }
    let train = Corpus::from_documents(corpus.documents[..n - val].to_vec())?;
    let valid = Corpus::from_documents(corpus.documents[n - val..].to_vec())?;
    Ok((train, valid))
}

/// One worker's slice of the training documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub doc_indices: Vec<usize>,
    pub num_tokens: usize,
}

impl Shard {
    fn from_indices(corpus: &Corpus, mut doc_indices: Vec<usize>) -> Shard {
        doc_indices.sort_unstable();
        let num_tokens = doc_indices.iter().map(|&d| corpus.documents[d].len()).sum();
        Shard { doc_indices, num_tokens }
    }

    /// A shard covering the whole corpus (used by single-worker stages).
    pub fn whole(corpus: &Corpus) -> Shard {
        Shard::from_indices(corpus, (0..corpus.len()).collect())
    }
}

/// Random partition: a seeded permutation of documents dealt round-robin.
pub fn shard_iid(corpus: &Corpus, k: usize, seed: u64) -> Result<Vec<Shard>, DataError> {
    if corpus.len() < k {
        return Err(DataError::TooFewDocuments { k, docs: corpus.len() });
    }
    let mut perm: Vec<usize> = (0..corpus.len()).collect();
    perm.shuffle(&mut rng::stream(seed, StreamPurpose::Shard, 0, 0));
    let mut buckets = vec![Vec::new(); k];
    for (i, doc) in perm.into_iter().enumerate() {
        buckets[i % k].push(doc);
    }
    Ok(buckets.into_iter().map(|b| Shard::from_indices(corpus, b)).collect())
}

/// L2-normalized 256-bin byte histogram of a document.
fn byte_histogram(doc: &[u8]) -> Vec<f64> {
    let mut h = vec![0.0; 256];
    for &b in doc {
        h[b as usize] += 1.0;
    }
    let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        h.iter_mut().for_each(|x| *x /= norm);
    }
    h
}

/// Distribution-based partition: cluster byte-histogram features with
/// k-means; each cluster becomes one shard.
pub fn shard_noniid(corpus: &Corpus, k: usize, seed: u64, iters: usize) -> Result<Vec<Shard>, DataError> {
    if corpus.len() < k {
        return Err(DataError::TooFewDocuments { k, docs: corpus.len() });
    }
    let features: Vec<Vec<f64>> = corpus.documents.iter().map(|d| byte_histogram(d)).collect();
    let assignments = kmeans::kmeans(&features, k, iters, &mut rng::stream(seed, StreamPurpose::Shard, 0, 0));
    let mut buckets = vec![Vec::new(); k];
    for (doc, &c) in assignments.iter().enumerate() {
        buckets[c].push(doc);
    }
    Ok(buckets.into_iter().map(|b| Shard::from_indices(corpus, b)).collect())
}

/// Number of (context, target) positions document `d` can produce.
fn eligible(doc: &[u8], context_len: usize) -> usize {
    doc.len().saturating_sub(context_len)
}

/// Sample `batch_size` (context, next-byte) pairs with replacement from the
/// shard: document weighted by eligible positions, offset uniform.
pub fn sample_batch(
    corpus: &Corpus,
    shard: &Shard,
    batch_size: usize,
    context_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, DataError> {
    let counts: Vec<usize> = shard
        .doc_indices
        .iter()
        .map(|&d| eligible(&corpus.documents[d], context_len))
        .collect();
    let mut cumulative = Vec::with_capacity(counts.len());
    let mut total = 0usize;
    for &c in &counts {
        total += c;
        cumulative.push(total);
    }
    if total == 0 {
        return Err(DataError::NoEligibleDocument { context_len });
    }
    let mut contexts = Vec::with_capacity(batch_size * context_len);
    let mut targets = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let r = rng.gen_range(0..total);
        let which = cumulative.partition_point(|&c| c <= r);
        let doc = &corpus.documents[shard.doc_indices[which]];
        let start = rng.gen_range(0..eligible(doc, context_len));
        contexts.extend_from_slice(&doc[start..start + context_len]);
        targets.push(doc[start + context_len]);
    }
    Ok(Batch::new(contexts, targets, context_len).expect("shapes are consistent by construction"))
}
