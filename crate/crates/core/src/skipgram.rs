//! Skip-gram with negative sampling for task-specific word vectors.
//!
//! Single-threaded on purpose: update order is part of the result, and a
//! fixed seed must reproduce the exact same vectors. Defaults follow the
//! classic recipe: initial learning rate 0.025 with linear decay, dynamic
//! window, unigram^0.75 negative-sampling table, no subsampling.

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, PAD_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

const INITIAL_LR: f64 = 0.025;
const MIN_LR_FACTOR: f64 = 1e-4;
const NEGATIVE_TABLE_SIZE: usize = 100_000;
const UNIGRAM_POWER: f64 = 0.75;

#[derive(Clone, Copy, Debug)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub seed: u64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Train vectors for every vocabulary token except padding. Tokens that never
/// occur in the corpus keep their random initialization.
pub fn train_task_embeddings(
    corpus: &[Vec<String>],
    vocab: &Vocabulary,
    config: SkipGramConfig,
) -> Result<HashMap<String, Vec<f32>>> {
    if config.dim == 0 || config.window == 0 || config.negatives == 0 {
        return Err(Error::Config(
            "skip-gram dim, window and negatives must all be at least 1".to_string(),
        ));
    }
    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| {
            vocab
                .ids(s)
                .into_iter()
                .filter(|&id| id != PAD_ID)
                .collect()
        })
        .collect();
    let total_tokens: usize = sentences.iter().map(Vec::len).sum();
    if total_tokens < config.window + 1 {
        return Err(Error::DegenerateInput(format!(
            "corpus has {total_tokens} tokens, need at least window+1 = {}",
            config.window + 1
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dim;
    let vocab_size = vocab.len();

    // input vectors: small uniform init; output vectors: zeros (classic)
    let span = 0.5 / dim as f64;
    let mut input: Vec<f64> = (0..vocab_size * dim)
        .map(|_| rng.gen_range(-span..span))
        .collect();
    let mut output = vec![0.0f64; vocab_size * dim];

    let mut counts = vec![0usize; vocab_size];
    for sentence in &sentences {
        for &id in sentence {
            counts[id] += 1;
        }
    }
    let table = build_negative_table(&counts);

    let total_updates = (config.epochs * total_tokens).max(1) as f64;
    let mut processed = 0usize;
    let mut grad_center = vec![0.0f64; dim];

    for _ in 0..config.epochs {
        for sentence in &sentences {
            for (t, &center) in sentence.iter().enumerate() {
                let lr = (INITIAL_LR * (1.0 - processed as f64 / (total_updates + 1.0)))
                    .max(INITIAL_LR * MIN_LR_FACTOR);
                processed += 1;
                let reach = rng.gen_range(1..=config.window);
                let lo = t.saturating_sub(reach);
                let hi = (t + reach + 1).min(sentence.len());
                for (pos, &context) in sentence.iter().enumerate().take(hi).skip(lo) {
                    if pos == t {
                        continue;
                    }
                    grad_center.iter_mut().for_each(|g| *g = 0.0);
                    for k in 0..=config.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let sampled = table[rng.gen_range(0..table.len())];
                            if sampled == context {
                                continue;
                            }
                            (sampled, 0.0)
                        };
                        let u = &input[center * dim..(center + 1) * dim];
                        let v = &output[target * dim..(target + 1) * dim];
                        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                        let g = (label - sigmoid(dot)) * lr;
                        for d in 0..dim {
                            grad_center[d] += g * output[target * dim + d];
                        }
                        for d in 0..dim {
                            output[target * dim + d] += g * input[center * dim + d];
                        }
                    }
                    for d in 0..dim {
                        input[center * dim + d] += grad_center[d];
                    }
                }
            }
        }
    }

    let mut map = HashMap::new();
    for id in 1..vocab_size {
        let token = vocab.token(id)?.to_string();
        let vector = input[id * dim..(id + 1) * dim]
            .iter()
            .map(|&v| v as f32)
            .collect();
        map.insert(token, vector);
    }
    Ok(map)
}

fn build_negative_table(counts: &[usize]) -> Vec<usize> {
    let weights: Vec<f64> = counts
        .iter()
        .enumerate()
        .map(|(id, &c)| {
            if id == PAD_ID || c == 0 {
                0.0
            } else {
                (c as f64).powf(UNIGRAM_POWER)
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "corpus emptiness checked by caller");
    let mut table = Vec::with_capacity(NEGATIVE_TABLE_SIZE);
    let mut id = 0;
    let mut cumulative = weights[0] / total;
    // start on the first id that carries probability mass
    while cumulative <= 0.0 && id + 1 < counts.len() {
        id += 1;
        cumulative += weights[id] / total;
    }
    for i in 0..NEGATIVE_TABLE_SIZE {
        table.push(id);
        let frontier = (i + 1) as f64 / NEGATIVE_TABLE_SIZE as f64;
        // stepping only stops right after a mass-carrying id, so zero-weight
        // ids in the middle are passed over
        while frontier > cumulative && id + 1 < counts.len() {
            id += 1;
            cumulative += weights[id] / total;
        }
    }
    table
}
