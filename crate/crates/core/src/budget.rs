//! Splitting a global sparsity target between attention removal and FFN
//! neuron pruning.
//!
//! Sparsity is measured over the prunable block parameters only: the four
//! attention projections and the three FFN projections of every block.
//! The number of attentions to drop is
//!
//! ```text
//! N_attn = round(B · s^(|W_ffn| / (alpha · |W_attn|)))
//! ```
//!
//! and whatever the attention removals leave of the target goes to the FFNs,
//! spread evenly as whole neurons (each worth `3 · d_model` parameters).

use crate::error::{Error, Result};
use crate::model::{count_block_parameters, ModelWeights};
use crate::report::{join, Report};

pub const DEFAULT_ALPHA: f64 = 1.5;

/// Dense per-block sizes a plan is computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub num_blocks: usize,
    pub d_model: usize,
    pub d_int: usize,
    pub attention_params: usize,
    pub ffn_params: usize,
}

impl BlockShape {
    /// Shape of the dense model `model` was derived from. Pruned models
    /// remember their original FFN width, so this is stable across stages.
    pub fn of_model(model: &ModelWeights) -> Result<Self> {
        let c = &model.config;
        let d_int = model.blocks[0].ffn.original_width;
        if model.blocks.iter().any(|b| b.ffn.original_width != d_int) {
            return Err(Error::InvalidArgument(
                "planning needs the same FFN width in every block".into(),
            ));
        }
        Ok(Self {
            num_blocks: c.num_blocks,
            d_model: c.d_model,
            d_int,
            attention_params: c.attention_params(),
            ffn_params: 3 * c.d_model * d_int,
        })
    }

    pub fn total(&self) -> usize {
        self.num_blocks * (self.attention_params + self.ffn_params)
    }

    pub fn neuron_params(&self) -> usize {
        3 * self.d_model
    }
}

/// Number of attention submodules to remove, rounded half away from zero.
pub fn attn_count(
    num_blocks: usize,
    sparsity: f64,
    ffn_params: usize,
    attention_params: usize,
    alpha: f64,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!(
            "sparsity {sparsity} outside [0, 1]"
        )));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} must be positive"
        )));
    }
    if attention_params == 0 {
        return Err(Error::InvalidArgument(
            "attention parameter count is zero".into(),
        ));
    }
    let exponent = ffn_params as f64 / (alpha * attention_params as f64);
    Ok((num_blocks as f64 * sparsity.powf(exponent)).round() as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    pub shape: BlockShape,
    pub target_sparsity: f64,
    pub alpha: f64,
    /// True when the attention share was forced to zero (stage-one-only runs).
    pub ffn_only: bool,
    pub n_attn_to_remove: usize,
    pub neurons_to_prune_per_block: usize,
    pub k_per_block: usize,
    pub predicted_pruned_params: usize,
    pub achieved_sparsity: f64,
}

impl PruningPlan {
    /// Largest allowed `|achieved − target|`: one neuron per block plus one
    /// attention submodule, relative to the block total.
    pub fn granularity_bound(&self) -> f64 {
        let s = &self.shape;
        (s.num_blocks * s.neuron_params() + s.attention_params) as f64 / s.total() as f64
    }

    /// Hidden dimensions to drop per block when the FFN budget is spent on the
    /// inverted (dimension) layout instead of neurons. One dimension costs
    /// `3 · d_int` parameters.
    pub fn inverted_dims_to_prune(&self) -> usize {
        let s = &self.shape;
        if s.d_int == 0 {
            return 0;
        }
        let dims = (self.neurons_to_prune_per_block * s.d_model) as f64 / s.d_int as f64;
        (dims.round() as usize).min(s.d_model)
    }

    pub fn to_report(&self) -> Report {
        let mut r = Report::new();
        r.push("target_sparsity", format!("{:.4}", self.target_sparsity))
            .push("alpha", self.alpha)
            .push("ffn_only", self.ffn_only)
            .push("num_blocks", self.shape.num_blocks)
            .push("attention_params_per_block", self.shape.attention_params)
            .push("ffn_params_per_block", self.shape.ffn_params)
            .push("total_block_params", self.shape.total())
            .push("n_attn_to_remove", self.n_attn_to_remove)
            .push(
                "neurons_to_prune_per_block",
                self.neurons_to_prune_per_block,
            )
            .push("k_per_block", self.k_per_block)
            .push("predicted_pruned_params", self.predicted_pruned_params)
            .push(
                "achieved_sparsity",
                format!("{:.4}", self.achieved_sparsity),
            );
        r
    }
}

pub fn make_plan(shape: &BlockShape, sparsity: f64, alpha: f64) -> Result<PruningPlan> {
    check_sparsity(sparsity)?;
    let n_attn = attn_count(
        shape.num_blocks,
        sparsity,
        shape.ffn_params,
        shape.attention_params,
        alpha,
    )?;
    plan_with_attention(shape, sparsity, alpha, n_attn, false)
}

/// Plan that spends the whole budget on FFN neurons.
pub fn make_ffn_only_plan(shape: &BlockShape, sparsity: f64) -> Result<PruningPlan> {
    check_sparsity(sparsity)?;
    plan_with_attention(shape, sparsity, DEFAULT_ALPHA, 0, true)
}

fn check_sparsity(sparsity: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!(
            "sparsity {sparsity} outside [0, 1)"
        )));
    }
    Ok(())
}

fn plan_with_attention(
    shape: &BlockShape,
    sparsity: f64,
    alpha: f64,
    mut n_attn: usize,
    ffn_only: bool,
) -> Result<PruningPlan> {
    let total = shape.total();
    let target = (sparsity * total as f64).round() as usize;
    while n_attn > 0 && n_attn * shape.attention_params > target {
        n_attn -= 1;
    }
    let residual = target - n_attn * shape.attention_params;
    let per_neuron_row = shape.num_blocks * shape.neuron_params();
    let neurons = if per_neuron_row == 0 {
        0
    } else {
        (residual as f64 / per_neuron_row as f64).round() as usize
    };
    if neurons > shape.d_int {
        let max = (n_attn * shape.attention_params + shape.num_blocks * shape.ffn_params) as f64
            / total as f64;
        return Err(Error::Infeasible {
            target: sparsity,
            n_attn,
            max,
            detail: format!(
                "needs {neurons} neurons per block but the FFNs only have {}",
                shape.d_int
            ),
        });
    }
    let pruned = n_attn * shape.attention_params + neurons * per_neuron_row;
    Ok(PruningPlan {
        shape: *shape,
        target_sparsity: sparsity,
        alpha,
        ffn_only,
        n_attn_to_remove: n_attn,
        neurons_to_prune_per_block: neurons,
        k_per_block: shape.d_int - neurons,
        predicted_pruned_params: pruned,
        achieved_sparsity: pruned as f64 / total as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub removed_attention: Vec<usize>,
    pub k_per_block: Vec<usize>,
    pub block_params_after: usize,
    pub achieved_sparsity: f64,
}

impl VerifyReport {
    pub fn to_report(&self) -> Report {
        let mut r = Report::new();
        r.push("removed_attention", join(&self.removed_attention))
            .push("k_per_block", join(&self.k_per_block))
            .push("block_params_after", self.block_params_after)
            .push(
                "achieved_sparsity",
                format!("{:.4}", self.achieved_sparsity),
            );
        r
    }
}

/// Recounts `after` and checks it against `plan`, which must have been made
/// for `before`'s dense shape. Every discrepancy is listed in the error.
pub fn verify_plan(
    before: &ModelWeights,
    after: &ModelWeights,
    plan: &PruningPlan,
) -> Result<VerifyReport> {
    let shape = BlockShape::of_model(before)?;
    if shape != plan.shape {
        return Err(Error::PlanMismatch(vec![format!(
            "plan was made for {:?}, model has {:?}",
            plan.shape, shape
        )]));
    }
    if BlockShape::of_model(after)? != shape {
        return Err(Error::PlanMismatch(vec![
            "pruned model does not derive from the same dense shape".into(),
        ]));
    }
    let mut problems = Vec::new();
    let removed = after.removed_attention_blocks();
    if removed.len() != plan.n_attn_to_remove {
        if plan.n_attn_to_remove == 0 {
            for b in &removed {
                problems.push(format!(
                    "block {b}: attention removed but plan removes 0 attentions"
                ));
            }
        } else {
            problems.push(format!(
                "plan removes {} attentions, model has {} removed (blocks {})",
                plan.n_attn_to_remove,
                removed.len(),
                join(&removed)
            ));
        }
    }

    let counts = count_block_parameters(after);
    let dims = plan.inverted_dims_to_prune();
    for (b, block) in after.blocks.iter().enumerate() {
        let expected = match &block.ffn.hidden_dims {
            Some(_) => 3 * shape.d_int * (shape.d_model - dims),
            None => plan.k_per_block * shape.neuron_params(),
        };
        let found = counts.ffn[b];
        if found != expected {
            problems.push(format!(
                "block {b}: FFN has {found} parameters, plan expects {expected} (delta {})",
                found as i64 - expected as i64
            ));
        }
    }

    let total = shape.total();
    let achieved = 1.0 - counts.total as f64 / total as f64;
    if (achieved - plan.target_sparsity).abs() > plan.granularity_bound() {
        problems.push(format!(
            "achieved sparsity {achieved:.6} is more than {:.6} from target {:.6}",
            plan.granularity_bound(),
            plan.target_sparsity
        ));
    }
    if !problems.is_empty() {
        return Err(Error::PlanMismatch(problems));
    }
    Ok(VerifyReport {
        removed_attention: removed,
        k_per_block: after.blocks.iter().map(|b| b.ffn.width()).collect(),
        block_params_after: counts.total,
        achieved_sparsity: achieved,
    })
}
