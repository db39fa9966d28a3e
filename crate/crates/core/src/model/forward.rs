use super::{AttentionWeights, FfnWeights, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::{
    dot, matmul, matmul_transposed, rms_norm_rows, rope_apply, silu_scalar, softmax_in_place,
    Tensor,
};

/// Observation points inside the forward pass.
pub trait ForwardHook {
    /// The gated intermediate activations `silu(x·W_gateᵀ) ⊙ (x·W_upᵀ)` of a
    /// block, `T × d_int`, before they enter `W_down`. Mutations propagate.
    fn on_ffn_hidden(&mut self, _block: usize, _hidden: &mut Tensor) {}

    /// Full-width FFN input (after `ffn_norm`) and output (before the residual
    /// add), both `T × d_model`.
    fn on_ffn_io(&mut self, _block: usize, _input: &Tensor, _output: &Tensor) {}
}

pub struct NoHook;

impl ForwardHook for NoHook {}

/// Zeroes every intermediate neuron not listed as kept for its block.
pub struct NeuronMaskHook<'a> {
    pub kept: &'a [Vec<usize>],
}

impl ForwardHook for NeuronMaskHook<'_> {
    fn on_ffn_hidden(&mut self, block: usize, hidden: &mut Tensor) {
        let Some(kept) = self.kept.get(block) else {
            return;
        };
        let width = hidden.cols();
        let mut keep = vec![false; width];
        for &j in kept {
            if j < width {
                keep[j] = true;
            }
        }
        for t in 0..hidden.rows() {
            for (v, &k) in hidden.row_mut(t).iter_mut().zip(&keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Attention submodules to skip for one forward pass without touching the
/// weights. Skipping is identical to removal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttentionOverlay {
    disabled: Vec<usize>,
}

impl AttentionOverlay {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn disable(block: usize) -> Self {
        Self {
            disabled: vec![block],
        }
    }

    pub fn is_disabled(&self, block: usize) -> bool {
        self.disabled.contains(&block)
    }
}

pub fn forward_logits(model: &ModelWeights, tokens: &[u32]) -> Result<Tensor> {
    forward_logits_with(model, tokens, &AttentionOverlay::none(), &mut NoHook)
}

/// Full-sequence causal forward pass returning `T × vocab` logits.
pub fn forward_logits_with(
    model: &ModelWeights,
    tokens: &[u32],
    overlay: &AttentionOverlay,
    hook: &mut dyn ForwardHook,
) -> Result<Tensor> {
    let c = &model.config;
    if tokens.len() > c.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: c.max_seq_len,
        });
    }
    let mut rows = Vec::with_capacity(tokens.len() * c.d_model);
    for (position, &id) in tokens.iter().enumerate() {
        if id as usize >= c.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                position,
                vocab_size: c.vocab_size,
            });
        }
        rows.extend_from_slice(model.token_embedding.row(id as usize));
    }
    let mut x = Tensor::new(vec![tokens.len(), c.d_model], rows)?;

    for (b, block) in model.blocks.iter().enumerate() {
        if let Some(attn) = &block.attention {
            if !overlay.is_disabled(b) {
                let out = attention(model, attn, &x)?;
                add_in_place(&mut x, &out);
            }
        }
        let out = feed_forward(model, b, &block.ffn, &x, hook)?;
        add_in_place(&mut x, &out);
    }

    let h = rms_norm_rows(&x, &model.final_norm, c.norm_eps)?;
    matmul_transposed(&h, &model.lm_head)
}

fn add_in_place(x: &mut Tensor, delta: &Tensor) {
    for (a, b) in x.data_mut().iter_mut().zip(delta.data()) {
        *a += *b;
    }
}

fn head_slice(m: &Tensor, head: usize, head_dim: usize) -> Tensor {
    let cols: Vec<usize> = (head * head_dim..(head + 1) * head_dim).collect();
    m.select_cols(&cols)
}

fn attention(model: &ModelWeights, attn: &AttentionWeights, x: &Tensor) -> Result<Tensor> {
    let c = &model.config;
    let t = x.rows();
    let hd = c.head_dim;
    let xn = rms_norm_rows(x, &attn.norm, c.norm_eps)?;
    let q = matmul(&xn, &attn.wq)?;
    let k = matmul(&xn, &attn.wk)?;
    let v = matmul(&xn, &attn.wv)?;
    let positions: Vec<usize> = (0..t).collect();
    let group = c.n_heads / c.n_kv_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let keys = (0..c.n_kv_heads)
        .map(|h| rope_apply(&head_slice(&k, h, hd), c.rope_theta, &positions))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<Tensor> = (0..c.n_kv_heads).map(|h| head_slice(&v, h, hd)).collect();

    let mut concat = Tensor::zeros(vec![t, c.d_model]);
    let mut scores = Vec::with_capacity(t);
    let mut acc = vec![0.0f64; hd];
    for h in 0..c.n_heads {
        let qh = rope_apply(&head_slice(&q, h, hd), c.rope_theta, &positions)?;
        let kh = &keys[h / group];
        let vh = &values[h / group];
        for i in 0..t {
            scores.clear();
            scores.extend((0..=i).map(|j| (dot(qh.row(i), kh.row(j)) * scale) as f32));
            softmax_in_place(&mut scores);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (j, &p) in scores.iter().enumerate() {
                for (a, &vv) in acc.iter_mut().zip(vh.row(j)) {
                    *a += p as f64 * vv as f64;
                }
            }
            let out = &mut concat.row_mut(i)[h * hd..(h + 1) * hd];
            for (o, a) in out.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    matmul(&concat, &attn.wo)
}

fn feed_forward(
    model: &ModelWeights,
    block: usize,
    ffn: &FfnWeights,
    x: &Tensor,
    hook: &mut dyn ForwardHook,
) -> Result<Tensor> {
    let c = &model.config;
    let xn = rms_norm_rows(x, &ffn.norm, c.norm_eps)?;
    let input = match &ffn.hidden_dims {
        Some(dims) => xn.select_cols(&dims.input),
        None => xn.clone(),
    };
    let gate = matmul_transposed(&input, &ffn.w_gate)?;
    let up = matmul_transposed(&input, &ffn.w_up)?;
    let data = gate
        .data()
        .iter()
        .zip(up.data())
        .map(|(&g, &u)| silu_scalar(g) * u)
        .collect();
    let mut hidden = Tensor::new(gate.shape().to_vec(), data)?;
    hidden.ensure_finite("ffn activation")?;
    hook.on_ffn_hidden(block, &mut hidden);
    let out = matmul_transposed(&hidden, &ffn.w_down)?;
    let out = match &ffn.hidden_dims {
        Some(dims) => {
            let mut full = Tensor::zeros(vec![x.rows(), c.d_model]);
            for t in 0..x.rows() {
                let src = out.row(t);
                let dst = full.row_mut(t);
                for (&d, &v) in dims.output.iter().zip(src) {
                    dst[d] = v;
                }
            }
            full
        }
        None => out,
    };
    hook.on_ffn_io(block, &xn, &out);
    Ok(out)
}
