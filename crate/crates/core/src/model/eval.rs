use super::{forward_logits_with, AttentionOverlay, ModelWeights, NoHook};
use crate::corpus::TokenCorpus;
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub perplexity: f64,
    /// Mean next-token negative log-likelihood, in nats.
    pub mean_nll: f64,
    pub tokens_scored: usize,
    pub sequences: usize,
}

/// Summed next-token NLL over positions `1..T` of one sequence.
pub fn sequence_nll(
    model: &ModelWeights,
    tokens: &[u32],
    overlay: &AttentionOverlay,
) -> Result<f64> {
    let logits = forward_logits_with(model, tokens, overlay, &mut NoHook)?;
    let mut total = 0.0f64;
    for (t, &next) in tokens.iter().enumerate().skip(1) {
        let row = logits.row(t - 1);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max
            + row
                .iter()
                .fold(0.0f64, |s, &v| s + (v as f64 - max).exp())
                .ln();
        total += lse - row[next as usize] as f64;
    }
    Ok(total)
}

pub fn evaluate_perplexity(model: &ModelWeights, corpus: &TokenCorpus) -> Result<EvalReport> {
    evaluate_perplexity_with(model, corpus, &AttentionOverlay::none(), Exec::default())
}

/// Perplexity over every predicted position of every sequence.
///
/// Per-sequence sums are reduced in ascending value order, so the result does
/// not depend on sequence order or on the execution mode.
pub fn evaluate_perplexity_with(
    model: &ModelWeights,
    corpus: &TokenCorpus,
    overlay: &AttentionOverlay,
    exec: Exec,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if corpus.seq_len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "perplexity needs sequences of at least 2 tokens, got {}",
            corpus.seq_len()
        )));
    }
    let mut sums = exec.try_map(corpus.sequences(), |seq| sequence_nll(model, seq, overlay))?;
    sums.sort_by(f64::total_cmp);
    let total: f64 = sums.iter().sum();
    let tokens_scored = corpus.len() * (corpus.seq_len() - 1);
    let mean_nll = total / tokens_scored as f64;
    let perplexity = mean_nll.exp();
    if !perplexity.is_finite() {
        return Err(Error::NonFinite("perplexity"));
    }
    Ok(EvalReport {
        perplexity,
        mean_nll,
        tokens_scored,
        sequences: corpus.len(),
    })
}
