//! Stage two: greedy removal of whole attention submodules.
//!
//! At every step each remaining attention is switched off in turn and the
//! calibration perplexity measured; the one whose absence hurts least is
//! removed for good. Ties go to the lowest block index.

use crate::corpus::TokenCorpus;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{evaluate_perplexity_with, AttentionOverlay, ModelWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct Removal {
    pub block: usize,
    /// Calibration perplexity once this attention is gone.
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthPruneState {
    pub remaining: Vec<usize>,
    pub removed_order: Vec<Removal>,
}

impl DepthPruneState {
    pub fn step(&self) -> usize {
        self.removed_order.len()
    }
}

/// Calibration perplexity with one attention temporarily switched off.
pub fn evaluate_candidate(
    model: &ModelWeights,
    calib: &TokenCorpus,
    block: usize,
    exec: Exec,
) -> Result<f64> {
    let present = model
        .blocks
        .get(block)
        .ok_or_else(|| Error::InvalidArgument(format!("no block {block}")))?
        .attention_present();
    if !present {
        return Err(Error::AttentionAlreadyRemoved(block));
    }
    Ok(evaluate_perplexity_with(model, calib, &AttentionOverlay::disable(block), exec)?.perplexity)
}

/// Picks the candidate with the smallest perplexity, lowest index on ties.
fn argmin(candidates: &[usize], perplexities: &[f64]) -> (usize, f64) {
    candidates
        .iter()
        .zip(perplexities)
        .fold(None, |best: Option<(usize, f64)>, (&b, &p)| match best {
            Some((bb, bp)) if bp < p || (bp == p && bb < b) => Some((bb, bp)),
            _ => Some((b, p)),
        })
        .expect("at least one candidate")
}

pub fn greedy_remove_attentions(
    model: &ModelWeights,
    calib: &TokenCorpus,
    n_remove: usize,
    exec: Exec,
) -> Result<(ModelWeights, DepthPruneState)> {
    if calib.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut current = model.clone();
    let mut state = DepthPruneState {
        remaining: (0..model.blocks.len())
            .filter(|&b| model.blocks[b].attention_present())
            .collect(),
        removed_order: Vec::with_capacity(n_remove),
    };
    if n_remove > state.remaining.len() {
        return Err(Error::TooManyRemovals {
            requested: n_remove,
            available: state.remaining.len(),
        });
    }
    for _ in 0..n_remove {
        let perplexities = exec.try_map(&state.remaining, |&b| {
            evaluate_candidate(&current, calib, b, exec)
        })?;
        let (block, perplexity) = argmin(&state.remaining, &perplexities);
        current.blocks[block].attention = None;
        state.remaining.retain(|&b| b != block);
        state.removed_order.push(Removal { block, perplexity });
    }
    Ok((current, state))
}
