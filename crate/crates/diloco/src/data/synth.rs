//! Deterministic synthetic corpus generator.
//!
//! Produces multi-topic pseudo-text: each topic owns a small, mostly
//! disjoint letter pool and a Zipf-weighted dictionary of made-up words, so
//! documents from different topics have clearly distinct byte histograms
//! (which distribution-based sharding can separate) while still sharing
//! global structure (spaces, periods, word shapes) that a byte-level model
//! can learn.

use super::Corpus;
use crate::rng::{self, StreamPurpose};
use rand::Rng;

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const WORDS_PER_TOPIC: usize = 64;

fn topic_pool(topic: usize, num_topics: usize) -> Vec<u8> {
    let len = (ALPHABET.len() / num_topics).max(3);
    (0..len).map(|j| ALPHABET[(topic * len + j) % ALPHABET.len()]).collect()
}

fn topic_dictionary(topic: usize, num_topics: usize, seed: u64) -> Vec<Vec<u8>> {
    let pool = topic_pool(topic, num_topics);
    let mut r = rng::stream(seed, StreamPurpose::Synth, topic as u32, 0);
    (0..WORDS_PER_TOPIC)
        .map(|_| {
            let len = r.gen_range(2..=7);
            (0..len).map(|_| pool[r.gen_range(0..pool.len())]).collect()
        })
        .collect()
}

/// Generate `num_docs` documents of roughly `doc_bytes` bytes each, cycling
/// through `num_topics` topics. Same arguments → identical corpus.
pub fn generate(num_docs: usize, num_topics: usize, doc_bytes: usize, seed: u64) -> Corpus {
    assert!(num_docs >= 1 && num_topics >= 1 && doc_bytes >= 8);
    let dictionaries: Vec<Vec<Vec<u8>>> =
        (0..num_topics).map(|t| topic_dictionary(t, num_topics, seed)).collect();
    // Zipf-ish word weights 1/(rank+1), as a cumulative table.
    let mut cumulative = Vec::with_capacity(WORDS_PER_TOPIC);
    let mut total = 0.0;
    for rank in 0..WORDS_PER_TOPIC {
        total += 1.0 / (rank + 1) as f64;
        cumulative.push(total);
    }

    let documents = (0..num_docs)
        .map(|d| {
            let topic = d % num_topics;
            let dict = &dictionaries[topic];
            let mut r = rng::stream(seed, StreamPurpose::Synth, topic as u32, 1 + d as u32);
            let mut doc = Vec::with_capacity(doc_bytes + 8);
            let mut words_in_sentence = 0;
            while doc.len() < doc_bytes {
                if !doc.is_empty() {
                    words_in_sentence += 1;
                    if words_in_sentence >= 8 && r.gen_range(0..4) == 0 {
                        doc.extend_from_slice(b". ");
                        words_in_sentence = 0;
                    } else {
                        doc.push(b' ');
                    }
                }
                let u = r.gen_range(0.0..total);
                let rank = cumulative.partition_point(|&c| c <= u);
                doc.extend_from_slice(&dict[rank]);
            }
            doc.push(b'.');
            doc
        })
        .collect();
    Corpus::from_documents(documents).expect("generated documents are non-empty")
}
