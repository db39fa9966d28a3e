//! Decoder-only transformer: configuration, weights, forward pass and
//! perplexity evaluation.
//!
//! Every block is pre-norm: `x += Attn(attn_norm(x))` when the block still has
//! its attention submodule, then `x += FFN(ffn_norm(x))`. Attention is causal
//! with RoPE and grouped-query sharing; the FFN is SwiGLU. No biases.

mod eval;
mod forward;

pub use eval::{evaluate_perplexity, evaluate_perplexity_with, sequence_nll, EvalReport};
pub use forward::{
    forward_logits, forward_logits_with, AttentionOverlay, ForwardHook, NeuronMaskHook, NoHook,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub d_int_per_block: Vec<usize>,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
}

impl ModelConfig {
    /// The desk-scale configuration used throughout the tests: 4 blocks,
    /// `d_model` 64, FFN width 172, 4 heads, vocabulary 256.
    pub fn toy() -> Self {
        Self {
            num_blocks: 4,
            d_model: 64,
            d_int_per_block: vec![172; 4],
            n_heads: 4,
            n_kv_heads: 4,
            head_dim: 16,
            vocab_size: 256,
            max_seq_len: 256,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
        }
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Parameters of one full attention submodule (wq, wk, wv, wo).
    pub fn attention_params(&self) -> usize {
        2 * self.d_model * self.d_model + 2 * self.d_model * self.kv_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.num_blocks == 0 {
            return fail("num_blocks must be at least 1".into());
        }
        if self.d_int_per_block.len() != self.num_blocks {
            return fail(format!(
                "d_int_per_block has {} entries for {} blocks",
                self.d_int_per_block.len(),
                self.num_blocks
            ));
        }
        if self.n_heads == 0
            || self.n_kv_heads == 0
            || !self.n_heads.is_multiple_of(self.n_kv_heads)
        {
            return fail(format!(
                "n_kv_heads {} must divide n_heads {}",
                self.n_kv_heads, self.n_heads
            ));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return fail(format!(
                "n_heads·head_dim = {} differs from d_model {}",
                self.n_heads * self.head_dim,
                self.d_model
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return fail(format!("head_dim {} must be even for RoPE", self.head_dim));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail("vocab_size and max_seq_len must be positive".into());
        }
        if self.rope_theta.is_nan()
            || self.rope_theta <= 0.0
            || self.norm_eps.is_nan()
            || self.norm_eps < 0.0
        {
            return fail("rope_theta must be positive and norm_eps nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub norm: Vec<f32>,
    /// `d_model × d_model`, applied as `x · wq`.
    pub wq: Tensor,
    /// `d_model × kv_dim`.
    pub wk: Tensor,
    /// `d_model × kv_dim`.
    pub wv: Tensor,
    /// `d_model × d_model`.
    pub wo: Tensor,
}

/// Hidden-dimension selection left behind by the inverted (columns–rows)
/// width pruning ablation. The FFN reads only `input` coordinates of the
/// normalized residual and writes only `output` coordinates back; every other
/// coordinate is zero on entry and exit.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenDims {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub norm: Vec<f32>,
    /// `d_int × d_in`, one row per intermediate neuron.
    pub w_gate: Tensor,
    /// Same shape as `w_gate`.
    pub w_up: Tensor,
    /// `d_out × d_int`, one column per intermediate neuron.
    pub w_down: Tensor,
    /// Intermediate width before any neuron pruning.
    pub original_width: usize,
    /// Surviving neuron indices into the original width, once neuron-pruned.
    pub kept_neurons: Option<Vec<usize>>,
    pub hidden_dims: Option<HiddenDims>,
}

impl FfnWeights {
    pub fn width(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w_gate.len() + self.w_up.len() + self.w_down.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    /// `None` once the attention submodule has been removed; the block then
    /// computes only its FFN branch.
    pub attention: Option<AttentionWeights>,
    pub ffn: FfnWeights,
}

impl BlockWeights {
    pub fn attention_present(&self) -> bool {
        self.attention.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `vocab × d_model`.
    pub token_embedding: Tensor,
    pub final_norm: Vec<f32>,
    /// `vocab × d_model`.
    pub lm_head: Tensor,
    pub blocks: Vec<BlockWeights>,
}

/// Per-block parameter counts over the prunable weight matrices only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    pub attention: Vec<usize>,
    pub ffn: Vec<usize>,
    pub total: usize,
}

/// Counts attention (wq+wk+wv+wo) and FFN (w_gate+w_up+w_down) parameters per
/// block. Norm vectors, embeddings and the LM head are not counted.
pub fn count_block_parameters(model: &ModelWeights) -> ParamCounts {
    let attention: Vec<usize> = model
        .blocks
        .iter()
        .map(|b| {
            b.attention
                .as_ref()
                .map_or(0, |a| a.wq.len() + a.wk.len() + a.wv.len() + a.wo.len())
        })
        .collect();
    let ffn: Vec<usize> = model.blocks.iter().map(|b| b.ffn.param_count()).collect();
    let total = attention.iter().sum::<usize>() + ffn.iter().sum::<usize>();
    ParamCounts {
        attention,
        ffn,
        total,
    }
}

impl ModelWeights {
    pub fn removed_attention_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.attention_present())
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks every tensor shape and pruning record against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let shape_err = |what: String| Err(Error::Shape(what));
        let expect = |t: &Tensor, shape: [usize; 2], what: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "{what}: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            t.ensure_finite("checkpoint weights")
        };
        let expect_row = |r: &[f32], what: &str| -> Result<()> {
            if r.len() != c.d_model {
                return Err(Error::Shape(format!(
                    "{what}: expected {} values, found {}",
                    c.d_model,
                    r.len()
                )));
            }
            Ok(())
        };
        expect(
            &self.token_embedding,
            [c.vocab_size, c.d_model],
            "token_embedding",
        )?;
        expect(&self.lm_head, [c.vocab_size, c.d_model], "lm_head")?;
        expect_row(&self.final_norm, "final_norm")?;
        if self.blocks.len() != c.num_blocks {
            return shape_err(format!(
                "{} blocks for num_blocks {}",
                self.blocks.len(),
                c.num_blocks
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(a) = &b.attention {
                expect_row(&a.norm, &format!("block {i} attn_norm"))?;
                expect(&a.wq, [c.d_model, c.d_model], &format!("block {i} wq"))?;
                expect(&a.wk, [c.d_model, c.kv_dim()], &format!("block {i} wk"))?;
                expect(&a.wv, [c.d_model, c.kv_dim()], &format!("block {i} wv"))?;
                expect(&a.wo, [c.d_model, c.d_model], &format!("block {i} wo"))?;
            }
            let f = &b.ffn;
            let width = c.d_int_per_block[i];
            expect_row(&f.norm, &format!("block {i} ffn_norm"))?;
            let (d_in, d_out) = match &f.hidden_dims {
                Some(h) => {
                    check_indices(&h.input, c.d_model, &format!("block {i} input dims"))?;
                    check_indices(&h.output, c.d_model, &format!("block {i} output dims"))?;
                    (h.input.len(), h.output.len())
                }
                None => (c.d_model, c.d_model),
            };
            expect(&f.w_gate, [width, d_in], &format!("block {i} w_gate"))?;
            expect(&f.w_up, [width, d_in], &format!("block {i} w_up"))?;
            expect(&f.w_down, [d_out, width], &format!("block {i} w_down"))?;
            match &f.kept_neurons {
                Some(kept) => {
                    check_indices(kept, f.original_width, &format!("block {i} kept neurons"))?;
                    if kept.len() != width {
                        return shape_err(format!(
                            "block {i}: {} kept neurons for width {width}",
                            kept.len()
                        ));
                    }
                }
                None if f.original_width != width => {
                    return shape_err(format!(
                        "block {i}: width {width} differs from original {} without kept neurons",
                        f.original_width
                    ));
                }
                None => {}
            }
        }
        Ok(())
    }
}

/// Indices must be strictly increasing and below `bound`.
pub(crate) fn check_indices(idx: &[usize], bound: usize, what: &str) -> Result<()> {
    if idx.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidMask(format!(
            "{what} are not strictly increasing"
        )));
    }
    if let Some(&last) = idx.last() {
        if last >= bound {
            return Err(Error::InvalidMask(format!(
                "{what}: index {last} out of range for {bound}"
            )));
        }
    }
    Ok(())
}
