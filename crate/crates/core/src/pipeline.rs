//! End-to-end orchestration behind the CLI: plan, stage one, stage two,
//! verification and evaluation, each producing a fixed-order report.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::budget::{
    make_ffn_only_plan, make_plan, verify_plan, BlockShape, PruningPlan, VerifyReport,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corpus::{load_corpus, sample_calibration, save_corpus, TokenCorpus};
use crate::depth::{greedy_remove_attentions, DepthPruneState};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{
    count_block_parameters, evaluate_perplexity_with, AttentionOverlay, EvalReport, ModelConfig,
    ModelWeights,
};
use crate::report::{join, Report};
use crate::synth::{random_model, sample_corpus};
use crate::width::{apply_stage1, apply_stage1_inverted, NormKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stage1Mode {
    #[default]
    Neurons,
    Inverted,
}

impl fmt::Display for Stage1Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage1Mode::Neurons => "neurons",
            Stage1Mode::Inverted => "inverted",
        })
    }
}

impl FromStr for Stage1Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neurons" => Ok(Stage1Mode::Neurons),
            "inverted" => Ok(Stage1Mode::Inverted),
            other => Err(Error::InvalidArgument(format!(
                "unknown stage1 mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stages {
    One,
    Two,
    #[default]
    Both,
}

impl Stages {
    fn runs_stage1(self) -> bool {
        matches!(self, Stages::One | Stages::Both)
    }

    fn runs_stage2(self) -> bool {
        matches!(self, Stages::Two | Stages::Both)
    }
}

impl fmt::Display for Stages {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stages::One => "1",
            Stages::Two => "2",
            Stages::Both => "both",
        })
    }
}

impl FromStr for Stages {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stages::One),
            "2" => Ok(Stages::Two),
            "both" => Ok(Stages::Both),
            other => Err(Error::InvalidArgument(format!("unknown stages `{other}`"))),
        }
    }
}

/// Pruning hyperparameters, independent of where models and corpora live.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOptions {
    pub sparsity: f64,
    pub alpha: f64,
    pub calib_samples_stage1: usize,
    pub calib_samples_stage2: usize,
    pub norm_kind: NormKind,
    pub stage1_mode: Stage1Mode,
    pub stages: Stages,
    /// Give the whole budget to FFN neurons (no attention share).
    pub ffn_only_budget: bool,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            sparsity: 0.25,
            alpha: crate::budget::DEFAULT_ALPHA,
            calib_samples_stage1: 32,
            calib_samples_stage2: 1,
            norm_kind: NormKind::L2,
            stage1_mode: Stage1Mode::Neurons,
            stages: Stages::Both,
            ffn_only_budget: false,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl PruneOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidArgument(format!(
                "sparsity {} outside [0, 1)",
                self.sparsity
            )));
        }
        if self.stages.runs_stage1() && self.calib_samples_stage1 == 0 {
            return Err(Error::InvalidArgument(
                "calib-samples-stage1 must be at least 1".into(),
            ));
        }
        if self.stages.runs_stage2() && self.calib_samples_stage2 == 0 {
            return Err(Error::InvalidArgument(
                "calib-samples-stage2 must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn plan_for(&self, model: &ModelWeights) -> Result<PruningPlan> {
        let shape = BlockShape::of_model(model)?;
        if self.ffn_only_budget {
            make_ffn_only_plan(&shape, self.sparsity)
        } else {
            make_plan(&shape, self.sparsity, self.alpha)
        }
    }
}

/// File-level configuration of a `prune` run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model_path: PathBuf,
    pub calib_path: PathBuf,
    pub eval_paths: Vec<PathBuf>,
    pub out_path: PathBuf,
    pub seq_len: usize,
    pub options: PruneOptions,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub model: ModelWeights,
    pub plan: PruningPlan,
    pub trajectory: Option<DepthPruneState>,
    pub verification: Option<VerifyReport>,
    pub report: Report,
}

fn fmt_ppl(x: f64) -> String {
    format!("{x:.6}")
}

/// Runs the configured stages on an in-memory model.
pub fn prune(
    model: &ModelWeights,
    calib: &TokenCorpus,
    evals: &[(String, TokenCorpus)],
    opts: &PruneOptions,
) -> Result<PruneOutcome> {
    opts.validate()?;
    let plan = opts.plan_for(model)?;
    let exec = opts.exec;
    let ppl = |m: &ModelWeights, c: &TokenCorpus| -> Result<EvalReport> {
        evaluate_perplexity_with(m, c, &AttentionOverlay::none(), exec)
    };

    let mut report = Report::new();
    report
        .push("stages", opts.stages)
        .push("stage1_mode", opts.stage1_mode)
        .push("norm_kind", opts.norm_kind)
        .push("seed", opts.seed)
        .push("calib_samples_stage1", opts.calib_samples_stage1)
        .push("calib_samples_stage2", opts.calib_samples_stage2);
    report.extend("plan.", &plan.to_report());

    let calib_before = ppl(model, calib)?;
    let evals_before = evals
        .iter()
        .map(|(_, c)| ppl(model, c))
        .collect::<Result<Vec<_>>>()?;

    let mut current = model.clone();
    if opts.stages.runs_stage1() {
        let applied = match opts.stage1_mode {
            Stage1Mode::Neurons => stage1_neurons(&mut current, calib, &plan, opts)?,
            Stage1Mode::Inverted => stage1_inverted(&mut current, calib, &plan, opts)?,
        };
        report.push("stage1.applied", applied);
        let widths: Vec<usize> = current.blocks.iter().map(|b| b.ffn.width()).collect();
        report.push("stage1.k_per_block", join(&widths));
        if opts.stage1_mode == Stage1Mode::Inverted {
            report.push("stage1.inverted_dims_pruned", plan.inverted_dims_to_prune());
        }
    }

    let mut trajectory = None;
    if opts.stages.runs_stage2() {
        let already = current.removed_attention_blocks().len();
        if already > plan.n_attn_to_remove {
            return Err(Error::InvalidArgument(format!(
                "model already has {already} attentions removed, plan calls for {}",
                plan.n_attn_to_remove
            )));
        }
        let n_remove = plan.n_attn_to_remove - already;
        let calib2 = sample_calibration(calib, opts.calib_samples_stage2, opts.seed)?;
        let (pruned, state) = greedy_remove_attentions(&current, &calib2, n_remove, exec)?;
        current = pruned;
        report.push("stage2.removed", n_remove);
        for (i, r) in state.removed_order.iter().enumerate() {
            report.push(format!("stage2.step.{i}.block"), r.block);
            report.push(format!("stage2.step.{i}.perplexity"), fmt_ppl(r.perplexity));
        }
        trajectory = Some(state);
    }

    let calib_after = ppl(&current, calib)?;
    report
        .push("calib.perplexity_before", fmt_ppl(calib_before.perplexity))
        .push("calib.perplexity_after", fmt_ppl(calib_after.perplexity));
    for (i, ((name, corpus), before)) in evals.iter().zip(&evals_before).enumerate() {
        let after = ppl(&current, corpus)?;
        report
            .push(format!("eval.{i}.name"), name)
            .push(
                format!("eval.{i}.perplexity_before"),
                fmt_ppl(before.perplexity),
            )
            .push(
                format!("eval.{i}.perplexity_after"),
                fmt_ppl(after.perplexity),
            );
    }

    let counts = count_block_parameters(&current);
    report.push("block_params_after", counts.total);

    let verification = if is_complete(&current, &plan, opts.stage1_mode) {
        let v = verify_plan(model, &current, &plan)?;
        report.push("verify", "pass");
        report.extend("verify.", &v.to_report());
        Some(v)
    } else {
        report.push("verify", "skipped");
        None
    };

    Ok(PruneOutcome {
        model: current,
        plan,
        trajectory,
        verification,
        report,
    })
}

/// True once both stages of `plan` are reflected in `model`.
fn is_complete(model: &ModelWeights, plan: &PruningPlan, mode: Stage1Mode) -> bool {
    let attn_done = model.removed_attention_blocks().len() == plan.n_attn_to_remove;
    let width_done = match mode {
        Stage1Mode::Neurons => model
            .blocks
            .iter()
            .all(|b| b.ffn.width() == plan.k_per_block),
        Stage1Mode::Inverted => {
            let dims = plan.inverted_dims_to_prune();
            let keep = plan.shape.d_model - dims;
            model.blocks.iter().all(|b| match &b.ffn.hidden_dims {
                Some(h) => h.input.len() == keep,
                None => dims == 0,
            })
        }
    };
    attn_done && width_done
}

fn stage1_neurons(
    model: &mut ModelWeights,
    calib: &TokenCorpus,
    plan: &PruningPlan,
    opts: &PruneOptions,
) -> Result<bool> {
    let k = plan.k_per_block;
    if model.blocks.iter().all(|b| b.ffn.width() == k) {
        return Ok(false);
    }
    if model.blocks.iter().any(|b| b.ffn.kept_neurons.is_some()) {
        return Err(Error::InvalidArgument(format!(
            "model is already width-pruned to a different K than the plan's {k}"
        )));
    }
    let calib1 = sample_calibration(calib, opts.calib_samples_stage1, opts.seed)?;
    let (pruned, _) = apply_stage1(model, &calib1, k, opts.norm_kind, opts.exec)?;
    *model = pruned;
    Ok(true)
}

fn stage1_inverted(
    model: &mut ModelWeights,
    calib: &TokenCorpus,
    plan: &PruningPlan,
    opts: &PruneOptions,
) -> Result<bool> {
    let dims = plan.inverted_dims_to_prune();
    let keep = plan.shape.d_model - dims;
    if dims == 0 {
        return Ok(false);
    }
    if model.blocks.iter().all(|b| {
        b.ffn
            .hidden_dims
            .as_ref()
            .is_some_and(|h| h.input.len() == keep)
    }) {
        return Ok(false);
    }
    if model.blocks.iter().any(|b| b.ffn.hidden_dims.is_some()) {
        return Err(Error::InvalidArgument(
            "model is already dimension-pruned to a different width".into(),
        ));
    }
    let calib1 = sample_calibration(calib, opts.calib_samples_stage1, opts.seed)?;
    let (pruned, _) = apply_stage1_inverted(model, &calib1, keep, opts.norm_kind, opts.exec)?;
    *model = pruned;
    Ok(true)
}

fn display_name(path: &Path) -> String {
    path.display().to_string()
}

/// `prune`: loads inputs, runs [`prune`], writes the checkpoint.
pub fn run_prune(cfg: &RunConfig) -> Result<PruneOutcome> {
    let model = load_checkpoint(&cfg.model_path)?;
    let calib = load_corpus(&cfg.calib_path, cfg.seq_len)?;
    let evals = cfg
        .eval_paths
        .iter()
        .map(|p| Ok((display_name(p), load_corpus(p, cfg.seq_len)?)))
        .collect::<Result<Vec<_>>>()?;
    let outcome = prune(&model, &calib, &evals, &cfg.options)?;
    save_checkpoint(&outcome.model, &cfg.out_path)?;
    Ok(outcome)
}

/// `plan`: the budget split for a checkpoint.
pub fn run_plan(model_path: &Path, opts: &PruneOptions) -> Result<Report> {
    let model = load_checkpoint(model_path)?;
    Ok(opts.plan_for(&model)?.to_report())
}

pub fn eval_report(report: &EvalReport) -> Report {
    let mut r = Report::new();
    r.push("perplexity", fmt_ppl(report.perplexity))
        .push("mean_nll", format!("{:.9}", report.mean_nll))
        .push("tokens_scored", report.tokens_scored)
        .push("sequences", report.sequences);
    r
}

/// `eval`: perplexity of a checkpoint on each corpus.
pub fn run_eval(
    model_path: &Path,
    corpus_paths: &[PathBuf],
    seq_len: usize,
    exec: Exec,
) -> Result<Report> {
    let model = load_checkpoint(model_path)?;
    let mut out = Report::new();
    for (i, path) in corpus_paths.iter().enumerate() {
        let corpus = load_corpus(path, seq_len)?;
        let e = evaluate_perplexity_with(&model, &corpus, &AttentionOverlay::none(), exec)?;
        out.push(format!("eval.{i}.name"), display_name(path));
        out.extend(&format!("eval.{i}."), &eval_report(&e));
    }
    Ok(out)
}

pub fn inspect_report(model: &ModelWeights) -> Report {
    let c = &model.config;
    let counts = count_block_parameters(model);
    let mut r = Report::new();
    r.push("num_blocks", c.num_blocks)
        .push("d_model", c.d_model)
        .push("n_heads", c.n_heads)
        .push("n_kv_heads", c.n_kv_heads)
        .push("head_dim", c.head_dim)
        .push("vocab_size", c.vocab_size)
        .push("max_seq_len", c.max_seq_len)
        .push("rope_theta", c.rope_theta)
        .push("norm_eps", c.norm_eps);
    for (i, b) in model.blocks.iter().enumerate() {
        r.push(
            format!("block.{i}.attention_present"),
            b.attention_present(),
        )
        .push(format!("block.{i}.d_int"), b.ffn.width())
        .push(format!("block.{i}.original_d_int"), b.ffn.original_width)
        .push(format!("block.{i}.attention_params"), counts.attention[i])
        .push(format!("block.{i}.ffn_params"), counts.ffn[i]);
        if let Some(h) = &b.ffn.hidden_dims {
            r.push(format!("block.{i}.ffn_input_dims"), h.input.len())
                .push(format!("block.{i}.ffn_output_dims"), h.output.len());
        }
    }
    r.push("removed_attention", join(&model.removed_attention_blocks()))
        .push("total_block_params", counts.total);
    if let Ok(shape) = BlockShape::of_model(model) {
        let dense = shape.total();
        r.push("dense_block_params", dense).push(
            "sparsity",
            format!("{:.4}", 1.0 - counts.total as f64 / dense as f64),
        );
    }
    r
}

/// `inspect`: architecture and parameter summary of a checkpoint.
pub fn run_inspect(model_path: &Path) -> Result<Report> {
    Ok(inspect_report(&load_checkpoint(model_path)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub out_path: PathBuf,
    pub calib_path: PathBuf,
    pub eval_path: Option<PathBuf>,
    pub seq_len: usize,
    pub calib_sequences: usize,
    pub eval_sequences: usize,
    pub seed: u64,
}

/// `synth`: writes the toy model plus corpora sampled from it.
pub fn run_synth(cfg: &SynthConfig, exec: Exec) -> Result<Report> {
    let config = ModelConfig::toy();
    if cfg.seq_len > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: cfg.seq_len,
            max: config.max_seq_len,
        });
    }
    let model = random_model(&config, cfg.seed);
    save_checkpoint(&model, &cfg.out_path)?;
    let calib = sample_corpus(&model, cfg.calib_sequences, cfg.seq_len, cfg.seed, exec)?;
    save_corpus(&calib, &cfg.calib_path)?;
    let mut r = Report::new();
    r.push("model", display_name(&cfg.out_path))
        .push("calib", display_name(&cfg.calib_path))
        .push("calib_sequences", calib.len());
    if let Some(path) = &cfg.eval_path {
        let eval = sample_corpus(
            &model,
            cfg.eval_sequences,
            cfg.seq_len,
            cfg.seed.wrapping_add(1),
            exec,
        )?;
        save_corpus(&eval, path)?;
        r.push("eval", display_name(path))
            .push("eval_sequences", eval.len());
    }
    r.push("seq_len", cfg.seq_len);
    Ok(r)
}
