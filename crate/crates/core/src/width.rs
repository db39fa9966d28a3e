//! Stage one: FFN width pruning.
//!
//! Each intermediate neuron is scored by the norm, over the tokens of a
//! calibration sequence, of its gated activation `silu(x·w_gate_j)·(x·w_up_j)`,
//! averaged over sequences. The top-K neurons of every block survive. A
//! removed neuron takes its `w_gate` and `w_up` rows first and then the
//! matching `w_down` column, so every surviving weight stays on a live path.
//!
//! The inverted ablation instead keeps every neuron and drops hidden
//! dimensions: columns of `w_gate`/`w_up` selected by input-dimension scores
//! and rows of `w_down` selected by output-dimension scores.

use std::fmt;
use std::str::FromStr;

use crate::corpus::TokenCorpus;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{
    check_indices, forward_logits_with, AttentionOverlay, BlockWeights, FfnWeights, ForwardHook,
    HiddenDims, ModelWeights,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormKind {
    #[default]
    L2,
    L1,
}

impl NormKind {
    /// Norm of one activation trace over the tokens of a sequence.
    pub fn norm(self, values: impl Iterator<Item = f32>) -> f64 {
        match self {
            NormKind::L2 => values.fold(0.0f64, |s, v| s + v as f64 * v as f64).sqrt(),
            NormKind::L1 => values.fold(0.0f64, |s, v| s + (v as f64).abs()),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::L2 => "l2",
            NormKind::L1 => "l1",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(NormKind::L2),
            "l1" => Ok(NormKind::L1),
            other => Err(Error::InvalidArgument(format!(
                "unknown norm kind `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub per_block: Vec<Vec<f64>>,
    pub norm_kind: NormKind,
}

/// Kept neuron indices per block, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuronMask {
    pub kept: Vec<Vec<usize>>,
}

impl NeuronMask {
    pub fn k_per_block(&self) -> Vec<usize> {
        self.kept.iter().map(Vec::len).collect()
    }
}

/// Hidden-dimension scores of the inverted ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenDimScores {
    pub input: Vec<Vec<f64>>,
    pub output: Vec<Vec<f64>>,
    pub norm_kind: NormKind,
}

/// Kept hidden dimensions per block for the FFN input and output sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvertedMasks {
    pub input: Vec<Vec<usize>>,
    pub output: Vec<Vec<usize>>,
}

/// Column-wise norms of every hooked activation, per block.
struct ColumnNorms {
    kind: NormKind,
    hidden: Vec<Vec<f64>>,
    input: Vec<Vec<f64>>,
    output: Vec<Vec<f64>>,
    io: bool,
}

fn column_norms(t: &Tensor, kind: NormKind) -> Vec<f64> {
    (0..t.cols())
        .map(|j| kind.norm((0..t.rows()).map(|i| t.get(i, j))))
        .collect()
}

impl ForwardHook for ColumnNorms {
    fn on_ffn_hidden(&mut self, block: usize, hidden: &mut Tensor) {
        self.hidden[block] = column_norms(hidden, self.kind);
    }

    fn on_ffn_io(&mut self, block: usize, input: &Tensor, output: &Tensor) {
        if self.io {
            self.input[block] = column_norms(input, self.kind);
            self.output[block] = column_norms(output, self.kind);
        }
    }
}

fn per_sequence_norms(
    model: &ModelWeights,
    calib: &TokenCorpus,
    kind: NormKind,
    io: bool,
    exec: Exec,
) -> Result<Vec<ColumnNorms>> {
    if calib.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let blocks = model.blocks.len();
    exec.try_map(calib.sequences(), |seq| {
        let mut hook = ColumnNorms {
            kind,
            hidden: vec![Vec::new(); blocks],
            input: vec![Vec::new(); blocks],
            output: vec![Vec::new(); blocks],
            io,
        };
        forward_logits_with(model, seq, &AttentionOverlay::none(), &mut hook)?;
        Ok(hook)
    })
}

/// Mean over sequences, accumulated in sequence order.
fn mean_over_sequences(per_seq: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = per_seq.len() as f64;
    let mut acc: Vec<Vec<f64>> = per_seq[0].iter().map(|b| vec![0.0; b.len()]).collect();
    for seq in per_seq {
        for (a, s) in acc.iter_mut().zip(seq) {
            for (x, y) in a.iter_mut().zip(s) {
                *x += y;
            }
        }
    }
    acc.iter_mut().flatten().for_each(|x| *x /= n);
    acc
}

/// Importance of every FFN intermediate neuron on the calibration set.
pub fn score_neurons(
    model: &ModelWeights,
    calib: &TokenCorpus,
    norm_kind: NormKind,
    exec: Exec,
) -> Result<ImportanceScores> {
    let per_seq = per_sequence_norms(model, calib, norm_kind, false, exec)?;
    let hidden: Vec<_> = per_seq.into_iter().map(|h| h.hidden).collect();
    Ok(ImportanceScores {
        per_block: mean_over_sequences(&hidden),
        norm_kind,
    })
}

/// Input and output hidden-dimension importance of every FFN.
pub fn score_hidden_dims(
    model: &ModelWeights,
    calib: &TokenCorpus,
    norm_kind: NormKind,
    exec: Exec,
) -> Result<HiddenDimScores> {
    let per_seq = per_sequence_norms(model, calib, norm_kind, true, exec)?;
    let (input, output): (Vec<_>, Vec<_>) =
        per_seq.into_iter().map(|h| (h.input, h.output)).unzip();
    Ok(HiddenDimScores {
        input: mean_over_sequences(&input),
        output: mean_over_sequences(&output),
        norm_kind,
    })
}

/// Indices of the `k` largest scores, ties to the lower index, ascending.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::InvalidMask(format!(
            "cannot keep {k} of {} entries",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

pub fn select_top_k(scores: &ImportanceScores, k_per_block: &[usize]) -> Result<NeuronMask> {
    if k_per_block.len() != scores.per_block.len() {
        return Err(Error::InvalidMask(format!(
            "{} K values for {} blocks",
            k_per_block.len(),
            scores.per_block.len()
        )));
    }
    let kept = scores
        .per_block
        .iter()
        .zip(k_per_block)
        .map(|(s, &k)| top_k_indices(s, k))
        .collect::<Result<_>>()?;
    Ok(NeuronMask { kept })
}

pub fn select_inverted(scores: &HiddenDimScores, k_dims: usize) -> Result<InvertedMasks> {
    let pick = |per_block: &[Vec<f64>]| {
        per_block
            .iter()
            .map(|s| top_k_indices(s, k_dims))
            .collect::<Result<Vec<_>>>()
    };
    Ok(InvertedMasks {
        input: pick(&scores.input)?,
        output: pick(&scores.output)?,
    })
}

/// Keeps the listed neurons: rows of `w_gate` and `w_up`, then the matching
/// columns of `w_down`.
pub fn slice_ffn(block: &BlockWeights, kept: &[usize]) -> Result<BlockWeights> {
    let f = &block.ffn;
    check_indices(kept, f.width(), "kept neurons")?;
    let w_gate = f.w_gate.select_rows(kept);
    let w_up = f.w_up.select_rows(kept);
    let w_down = f.w_down.select_cols(kept);
    let kept_neurons = match &f.kept_neurons {
        Some(prev) => kept.iter().map(|&j| prev[j]).collect(),
        None => kept.to_vec(),
    };
    Ok(BlockWeights {
        attention: block.attention.clone(),
        ffn: FfnWeights {
            norm: f.norm.clone(),
            w_gate,
            w_up,
            w_down,
            original_width: f.original_width,
            kept_neurons: Some(kept_neurons),
            hidden_dims: f.hidden_dims.clone(),
        },
    })
}

/// Keeps the listed hidden dimensions: `input` columns of `w_gate`/`w_up` and
/// `output` rows of `w_down`. All neurons survive.
pub fn slice_ffn_inverted(
    block: &BlockWeights,
    input: &[usize],
    output: &[usize],
    d_model: usize,
) -> Result<BlockWeights> {
    let f = &block.ffn;
    if f.hidden_dims.is_some() {
        return Err(Error::InvalidMask(
            "block is already dimension-pruned".into(),
        ));
    }
    check_indices(input, d_model, "input dims")?;
    check_indices(output, d_model, "output dims")?;
    Ok(BlockWeights {
        attention: block.attention.clone(),
        ffn: FfnWeights {
            norm: f.norm.clone(),
            w_gate: f.w_gate.select_cols(input),
            w_up: f.w_up.select_cols(input),
            w_down: f.w_down.select_rows(output),
            original_width: f.original_width,
            kept_neurons: f.kept_neurons.clone(),
            hidden_dims: Some(HiddenDims {
                input: input.to_vec(),
                output: output.to_vec(),
            }),
        },
    })
}

/// Applies a neuron mask to every block and updates the config widths.
pub fn slice_model(model: &ModelWeights, mask: &NeuronMask) -> Result<ModelWeights> {
    if mask.kept.len() != model.blocks.len() {
        return Err(Error::InvalidMask(format!(
            "mask covers {} blocks, model has {}",
            mask.kept.len(),
            model.blocks.len()
        )));
    }
    let blocks = model
        .blocks
        .iter()
        .zip(&mask.kept)
        .map(|(b, kept)| slice_ffn(b, kept))
        .collect::<Result<Vec<_>>>()?;
    let mut out = model.clone();
    out.config.d_int_per_block = mask.k_per_block();
    out.blocks = blocks;
    Ok(out)
}

/// Score, select and slice: keeps `k` neurons in every block.
pub fn apply_stage1(
    model: &ModelWeights,
    calib: &TokenCorpus,
    k: usize,
    norm_kind: NormKind,
    exec: Exec,
) -> Result<(ModelWeights, NeuronMask)> {
    let scores = score_neurons(model, calib, norm_kind, exec)?;
    let mask = select_top_k(&scores, &vec![k; model.blocks.len()])?;
    Ok((slice_model(model, &mask)?, mask))
}

/// Inverted ablation: keeps `k_dims` input and `k_dims` output hidden
/// dimensions in every FFN.
pub fn apply_stage1_inverted(
    model: &ModelWeights,
    calib: &TokenCorpus,
    k_dims: usize,
    norm_kind: NormKind,
    exec: Exec,
) -> Result<(ModelWeights, InvertedMasks)> {
    let scores = score_hidden_dims(model, calib, norm_kind, exec)?;
    let masks = select_inverted(&scores, k_dims)?;
    let d_model = model.config.d_model;
    let mut out = model.clone();
    out.blocks = model
        .blocks
        .iter()
        .enumerate()
        .map(|(b, block)| slice_ffn_inverted(block, &masks.input[b], &masks.output[b], d_model))
        .collect::<Result<_>>()?;
    Ok((out, masks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_block_parameters, forward_logits, ModelConfig, NeuronMaskHook};
    use crate::synth::{random_corpus, random_model};
    use proptest::prelude::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            d_model: 16,
            d_int_per_block: vec![24, 24],
            n_heads: 2,
            n_kv_heads: 1,
            head_dim: 8,
            vocab_size: 40,
            max_seq_len: 64,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn hand_norms() {
        assert_eq!(NormKind::L2.norm([3.0f32, 4.0].into_iter()), 5.0);
        assert_eq!(NormKind::L1.norm([3.0f32, -4.0].into_iter()), 7.0);
    }

    #[test]
    fn top_k_examples() {
        let s = ImportanceScores {
            per_block: vec![vec![0.1, 5.0, 2.0, 2.0]],
            norm_kind: NormKind::L2,
        };
        assert_eq!(select_top_k(&s, &[2]).unwrap().kept, vec![vec![1, 2]]);
        assert_eq!(select_top_k(&s, &[4]).unwrap().kept, vec![vec![0, 1, 2, 3]]);
        assert_eq!(
            select_top_k(&s, &[0]).unwrap().kept,
            vec![Vec::<usize>::new()]
        );
        assert!(select_top_k(&s, &[5]).is_err());
        assert!(select_top_k(&s, &[1, 1]).is_err());
    }

    #[test]
    fn slice_keeps_rows_then_columns() {
        let model = random_model(&small_config(), 1);
        let block = &model.blocks[0];
        let sliced = slice_ffn(block, &[1, 2]).unwrap();
        assert_eq!(sliced.ffn.w_gate.shape(), &[2, 16]);
        assert_eq!(sliced.ffn.w_gate.row(0), block.ffn.w_gate.row(1));
        assert_eq!(sliced.ffn.w_up.row(1), block.ffn.w_up.row(2));
        assert_eq!(sliced.ffn.w_down.shape(), &[16, 2]);
        assert_eq!(sliced.ffn.w_down.get(5, 0), block.ffn.w_down.get(5, 1));
        assert_eq!(sliced.ffn.kept_neurons, Some(vec![1, 2]));

        let all: Vec<usize> = (0..24).collect();
        let full = slice_ffn(block, &all).unwrap();
        assert_eq!(full.ffn.w_gate, block.ffn.w_gate);
        assert_eq!(full.ffn.w_down, block.ffn.w_down);

        assert!(slice_ffn(block, &[3, 24]).is_err());
        assert!(slice_ffn(block, &[2, 2]).is_err());
    }

    #[test]
    fn nested_slicing_composes_indices() {
        let model = random_model(&small_config(), 1);
        let once = slice_ffn(&model.blocks[0], &[2, 5, 9, 11]).unwrap();
        let twice = slice_ffn(&once, &[1, 3]).unwrap();
        assert_eq!(twice.ffn.kept_neurons, Some(vec![5, 11]));
        assert_eq!(twice.ffn.w_gate.row(1), model.blocks[0].ffn.w_gate.row(11));
    }

    #[test]
    fn inverted_slicing() {
        let mut c = small_config();
        c.d_model = 2;
        c.n_heads = 1;
        c.n_kv_heads = 1;
        c.head_dim = 2;
        let model = random_model(&c, 0);
        let b = slice_ffn_inverted(&model.blocks[0], &[0], &[0, 1], 2).unwrap();
        assert_eq!(b.ffn.w_gate.shape(), &[24, 1]);
        assert_eq!(b.ffn.w_down.shape(), &[2, 24]);
        assert!(slice_ffn_inverted(&b, &[0], &[0], 2).is_err());
        assert!(slice_ffn_inverted(&model.blocks[0], &[2], &[0], 2).is_err());

        let full = slice_ffn_inverted(&model.blocks[1], &[0, 1], &[0, 1], 2).unwrap();
        let mut as_model = model.clone();
        as_model.blocks[1] = full;
        let tokens = [1, 2, 3, 4];
        assert_eq!(
            forward_logits(&as_model, &tokens).unwrap(),
            forward_logits(&model, &tokens).unwrap()
        );
    }

    #[test]
    fn single_sequence_score_is_the_sequence_norm() {
        let model = random_model(&small_config(), 2);
        let calib = random_corpus(40, 1, 12, 3);
        let scores = score_neurons(&model, &calib, NormKind::L2, Exec::Sequential).unwrap();
        let mut hook = ColumnNorms {
            kind: NormKind::L2,
            hidden: vec![Vec::new(); 2],
            input: vec![],
            output: vec![],
            io: false,
        };
        forward_logits_with(
            &model,
            &calib.sequences()[0],
            &AttentionOverlay::none(),
            &mut hook,
        )
        .unwrap();
        assert_eq!(scores.per_block, hook.hidden);
    }

    #[test]
    fn scoring_is_exec_independent() {
        let model = random_model(&small_config(), 2);
        let calib = random_corpus(40, 5, 10, 3);
        let a = score_neurons(&model, &calib, NormKind::L1, Exec::Sequential).unwrap();
        let b = score_neurons(&model, &calib, NormKind::L1, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a
            .per_block
            .iter()
            .flatten()
            .all(|s| s.is_finite() && *s >= 0.0));
    }

    #[test]
    fn empty_calibration_is_an_error() {
        let model = random_model(&small_config(), 2);
        let empty = TokenCorpus::new(8, 40, vec![]).unwrap();
        assert!(matches!(
            score_neurons(&model, &empty, NormKind::L2, Exec::Sequential),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn stage1_identity_and_degenerate() {
        let model = random_model(&small_config(), 4);
        let calib = random_corpus(40, 2, 10, 5);
        let (same, mask) =
            apply_stage1(&model, &calib, 24, NormKind::L2, Exec::Sequential).unwrap();
        assert_eq!(mask.k_per_block(), vec![24, 24]);
        let tokens = &calib.sequences()[0];
        assert_eq!(
            forward_logits(&same, tokens).unwrap(),
            forward_logits(&model, tokens).unwrap()
        );

        let (empty, _) = apply_stage1(&model, &calib, 0, NormKind::L2, Exec::Sequential).unwrap();
        assert_eq!(count_block_parameters(&empty).ffn, vec![0, 0]);
        assert!(forward_logits(&empty, tokens)
            .unwrap()
            .ensure_finite("x")
            .is_ok());
    }

    #[test]
    fn stage1_leaves_input_untouched() {
        let model = random_model(&small_config(), 4);
        let before = model.clone();
        let calib = random_corpus(40, 2, 10, 5);
        apply_stage1(&model, &calib, 10, NormKind::L2, Exec::Sequential).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn proportional_patterns_order_l1_and_l2_alike() {
        // Each neuron's trace is c_j · p for a shared pattern p, so both norms
        // are |c_j| times a constant.
        let pattern = [0.5f32, -1.5, 2.0, 0.25];
        let coeffs = [0.3f32, -2.0, 1.1, 0.0, 4.0];
        let l1: Vec<f64> = coeffs
            .iter()
            .map(|&c| NormKind::L1.norm(pattern.iter().map(|&p| c * p)))
            .collect();
        let l2: Vec<f64> = coeffs
            .iter()
            .map(|&c| NormKind::L2.norm(pattern.iter().map(|&p| c * p)))
            .collect();
        for k in 0..=coeffs.len() {
            assert_eq!(
                top_k_indices(&l1, k).unwrap(),
                top_k_indices(&l2, k).unwrap()
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn sliced_matches_masked(seed in any::<u64>(), k in 0usize..=24) {
            let model = random_model(&small_config(), seed);
            let calib = random_corpus(40, 1, 9, seed ^ 1);
            let scores = score_neurons(&model, &calib, NormKind::L2, Exec::Sequential).unwrap();
            let mask = select_top_k(&scores, &[k, 24 - k]).unwrap();
            let sliced = slice_model(&model, &mask).unwrap();
            let tokens = &calib.sequences()[0];
            let a = forward_logits(&sliced, tokens).unwrap();
            let b = forward_logits_with(
                &model,
                tokens,
                &AttentionOverlay::none(),
                &mut NeuronMaskHook { kept: &mask.kept },
            )
            .unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }

        #[test]
        fn permuting_neurons_permutes_scores(seed in any::<u64>(), shift in 1usize..24) {
            let model = random_model(&small_config(), seed);
            let calib = random_corpus(40, 2, 8, seed ^ 7);
            // new neuron j is old neuron perm[j]
            let perm: Vec<usize> = (0..24).map(|j| (j + shift) % 24).collect();
            let mut permuted = model.clone();
            let f = &mut permuted.blocks[0].ffn;
            f.w_gate = f.w_gate.select_rows(&perm);
            f.w_up = f.w_up.select_rows(&perm);
            f.w_down = f.w_down.select_cols(&perm);

            let a = score_neurons(&model, &calib, NormKind::L2, Exec::Sequential).unwrap();
            let b = score_neurons(&permuted, &calib, NormKind::L2, Exec::Sequential).unwrap();
            for (j, &old) in perm.iter().enumerate() {
                prop_assert!((b.per_block[0][j] - a.per_block[0][old]).abs() <= 1e-9 * a.per_block[0][old].max(1.0));
            }
            let ka = top_k_indices(&a.per_block[0], 10).unwrap();
            let mut kb: Vec<usize> = top_k_indices(&b.per_block[0], 10).unwrap().iter().map(|&j| perm[j]).collect();
            kb.sort_unstable();
            prop_assert_eq!(ka, kb);
        }
    }
}
