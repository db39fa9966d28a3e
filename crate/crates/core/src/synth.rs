//! Synthetic models and corpora for tests, benches and the `synth` command.
//!
//! The toy corpus is sampled from the dense model itself, so the dense model
//! is the true generator of its own calibration data and any pruning can only
//! raise the expected cross-entropy.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::corpus::TokenCorpus;
use crate::error::Result;
use crate::exec::Exec;
use crate::model::{
    forward_logits, AttentionWeights, BlockWeights, FfnWeights, ModelConfig, ModelWeights,
};
use crate::tensor::{softmax_in_place, Tensor};

/// Standard deviation of LM-head entries relative to `1/sqrt(d_model)`.
/// Picked so the toy model's next-token distributions are clearly peaked.
const LOGIT_GAIN: f32 = 3.0;

fn gaussian(shape: Vec<usize>, std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let normal = Normal::new(0.0f32, std).expect("std is positive");
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("sized to shape")
}

/// Dense model with Gaussian weights scaled by fan-in and unit norm vectors.
pub fn random_model(config: &ModelConfig, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let kv = config.kv_dim();
    let fan = |n: usize| 1.0 / (n.max(1) as f32).sqrt();
    let token_embedding = gaussian(vec![config.vocab_size, d], 1.0, &mut rng);
    let blocks = config
        .d_int_per_block
        .iter()
        .map(|&width| BlockWeights {
            attention: Some(AttentionWeights {
                norm: vec![1.0; d],
                wq: gaussian(vec![d, d], fan(d), &mut rng),
                wk: gaussian(vec![d, kv], fan(d), &mut rng),
                wv: gaussian(vec![d, kv], fan(d), &mut rng),
                wo: gaussian(vec![d, d], fan(d), &mut rng),
            }),
            ffn: FfnWeights {
                norm: vec![1.0; d],
                w_gate: gaussian(vec![width, d], fan(d), &mut rng),
                w_up: gaussian(vec![width, d], fan(d), &mut rng),
                w_down: gaussian(vec![d, width], fan(width), &mut rng),
                original_width: width,
                kept_neurons: None,
                hidden_dims: None,
            },
        })
        .collect();
    let lm_head = gaussian(vec![config.vocab_size, d], LOGIT_GAIN * fan(d), &mut rng);
    ModelWeights {
        config: config.clone(),
        token_embedding,
        final_norm: vec![1.0; d],
        lm_head,
        blocks,
    }
}

/// Samples `n_sequences` sequences of `seq_len` tokens autoregressively from
/// `model`. Sequence `i` uses its own generator seeded from `(seed, i)`.
pub fn sample_corpus(
    model: &ModelWeights,
    n_sequences: usize,
    seq_len: usize,
    seed: u64,
    exec: Exec,
) -> Result<TokenCorpus> {
    let vocab = model.config.vocab_size;
    let ids: Vec<u64> = (0..n_sequences as u64).collect();
    let sequences = exec.try_map(&ids, |&i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i + 1);
        let mut seq = vec![rng.random_range(0..vocab as u32)];
        while seq.len() < seq_len {
            let logits = forward_logits(model, &seq)?;
            let mut probs = logits.row(seq.len() - 1).to_vec();
            softmax_in_place(&mut probs);
            let dist = WeightedIndex::new(&probs).expect("softmax output is a distribution");
            seq.push(dist.sample(&mut rng) as u32);
        }
        Ok(seq)
    })?;
    TokenCorpus::new(seq_len, vocab, sequences)
}

/// Single-block model with a zero LM head: logits are identically zero, so
/// every next token has probability `1/vocab`.
pub fn uniform_model(vocab_size: usize) -> ModelWeights {
    let config = ModelConfig {
        num_blocks: 1,
        d_model: 8,
        d_int_per_block: vec![4],
        n_heads: 2,
        n_kv_heads: 2,
        head_dim: 4,
        vocab_size,
        max_seq_len: 512,
        rope_theta: 10000.0,
        norm_eps: 1e-5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = random_model(&config, 0);
    model.token_embedding = gaussian(vec![vocab_size, 8], 1.0, &mut rng);
    model.lm_head = Tensor::zeros(vec![vocab_size, 8]);
    model
}

/// Model that predicts `(id + 1) % vocab` with a logit margin of 160: the
/// embedding is one-hot, the only block is attention-free with a zero FFN,
/// and the LM head maps each one-hot to its successor.
pub fn successor_model(vocab_size: usize) -> ModelWeights {
    let d = vocab_size + vocab_size % 2;
    let config = ModelConfig {
        num_blocks: 1,
        d_model: d,
        d_int_per_block: vec![1],
        n_heads: 1,
        n_kv_heads: 1,
        head_dim: d,
        vocab_size,
        max_seq_len: 512,
        rope_theta: 10000.0,
        norm_eps: 0.0,
    };
    let mut embedding = Tensor::zeros(vec![vocab_size, d]);
    let mut lm_head = Tensor::zeros(vec![vocab_size, d]);
    // After the RMS norm a one-hot row has value sqrt(d) at its index.
    let gain = 160.0 / (d as f32).sqrt();
    for id in 0..vocab_size {
        embedding.row_mut(id)[id] = 1.0;
        lm_head.row_mut((id + 1) % vocab_size)[id] = gain;
    }
    ModelWeights {
        config,
        token_embedding: embedding,
        final_norm: vec![1.0; d],
        lm_head,
        blocks: vec![BlockWeights {
            attention: None,
            ffn: FfnWeights {
                norm: vec![1.0; d],
                w_gate: Tensor::zeros(vec![1, d]),
                w_up: Tensor::zeros(vec![1, d]),
                w_down: Tensor::zeros(vec![d, 1]),
                original_width: 1,
                kept_neurons: None,
                hidden_dims: None,
            },
        }],
    }
}

/// Corpus whose every token is followed by its successor.
pub fn successor_corpus(vocab_size: usize, n_sequences: usize, seq_len: usize) -> TokenCorpus {
    let stream: Vec<u32> = (0..n_sequences * seq_len)
        .map(|i| (i % vocab_size) as u32)
        .collect();
    TokenCorpus::from_stream(&stream, seq_len, vocab_size).expect("ids below vocab")
}

/// Uniformly random token windows.
pub fn random_corpus(
    vocab_size: usize,
    n_sequences: usize,
    seq_len: usize,
    seed: u64,
) -> TokenCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream: Vec<u32> = (0..n_sequences * seq_len)
        .map(|_| rng.random_range(0..vocab_size as u32))
        .collect();
    TokenCorpus::from_stream(&stream, seq_len, vocab_size).expect("ids below vocab")
}
