use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use twostage_core::exec::with_threads;
use twostage_core::pipeline::{
    run_eval, run_inspect, run_plan, run_prune, run_synth, PruneOptions, RunConfig, Stage1Mode,
    Stages, SynthConfig,
};
use twostage_core::report::Report;
use twostage_core::width::NormKind;
use twostage_core::{Error, Exec};

/// Two-stage structured pruning: FFN neurons first, then whole attention
/// submodules.
#[derive(Debug, Parser)]
#[command(name = "twostage", version)]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Also print the report as a single JSON object.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print how a sparsity target splits between attentions and neurons.
    Plan(PlanArgs),
    /// Prune a checkpoint and write the result.
    Prune(PruneArgs),
    /// Perplexity of a checkpoint on one or more corpora.
    Eval(EvalArgs),
    /// Architecture and parameter summary of a checkpoint.
    Inspect(InspectArgs),
    /// Write the toy model and corpora sampled from it.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Neurons,
    Inverted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StagesArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Args)]
struct BudgetArgs {
    /// Fraction of attention + FFN block parameters to remove, in [0, 1).
    #[arg(long)]
    sparsity: f64,

    /// Balance between attention and FFN pruning.
    #[arg(long, default_value_t = 1.5)]
    alpha: f64,

    /// Spend the whole budget on FFN neurons.
    #[arg(long)]
    ffn_only_budget: bool,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    model_path: PathBuf,

    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[arg(long)]
    model_path: PathBuf,

    #[arg(long)]
    calib_path: PathBuf,

    /// Corpora to report perplexity on before and after pruning.
    #[arg(long, num_args = 1..)]
    eval_paths: Vec<PathBuf>,

    #[command(flatten)]
    budget: BudgetArgs,

    #[arg(long, default_value_t = 32)]
    calib_samples_stage1: usize,

    #[arg(long, default_value_t = 1)]
    calib_samples_stage2: usize,

    #[arg(long, value_enum, default_value = "l2")]
    norm_kind: NormArg,

    #[arg(long, value_enum, default_value = "neurons")]
    stage1_mode: ModeArg,

    #[arg(long, value_enum, default_value = "both")]
    stages: StagesArg,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Tokens per sequence when windowing corpus files.
    #[arg(long, default_value_t = 128)]
    seq_len: usize,

    #[arg(long)]
    out_path: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model_path: PathBuf,

    #[arg(long, num_args = 1.., required = true)]
    eval_paths: Vec<PathBuf>,

    #[arg(long, default_value_t = 128)]
    seq_len: usize,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    model_path: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Where to write the model checkpoint.
    #[arg(long)]
    out_path: PathBuf,

    #[arg(long)]
    calib_path: PathBuf,

    #[arg(long)]
    eval_path: Option<PathBuf>,

    #[arg(long, default_value_t = 128)]
    seq_len: usize,

    #[arg(long, default_value_t = 8)]
    calib_sequences: usize,

    #[arg(long, default_value_t = 4)]
    eval_sequences: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn options(b: &BudgetArgs, exec: Exec) -> PruneOptions {
    PruneOptions {
        sparsity: b.sparsity,
        alpha: b.alpha,
        ffn_only_budget: b.ffn_only_budget,
        exec,
        ..PruneOptions::default()
    }
}

fn run(cli: &Cli) -> Result<Report, Error> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match &cli.command {
        Command::Plan(a) => run_plan(&a.model_path, &options(&a.budget, exec)),
        Command::Prune(a) => {
            let cfg = RunConfig {
                model_path: a.model_path.clone(),
                calib_path: a.calib_path.clone(),
                eval_paths: a.eval_paths.clone(),
                out_path: a.out_path.clone(),
                seq_len: a.seq_len,
                options: PruneOptions {
                    calib_samples_stage1: a.calib_samples_stage1,
                    calib_samples_stage2: a.calib_samples_stage2,
                    norm_kind: match a.norm_kind {
                        NormArg::L2 => NormKind::L2,
                        NormArg::L1 => NormKind::L1,
                    },
                    stage1_mode: match a.stage1_mode {
                        ModeArg::Neurons => Stage1Mode::Neurons,
                        ModeArg::Inverted => Stage1Mode::Inverted,
                    },
                    stages: match a.stages {
                        StagesArg::One => Stages::One,
                        StagesArg::Two => Stages::Two,
                        StagesArg::Both => Stages::Both,
                    },
                    seed: a.seed,
                    ..options(&a.budget, exec)
                },
            };
            run_prune(&cfg).map(|o| o.report)
        }
        Command::Eval(a) => run_eval(&a.model_path, &a.eval_paths, a.seq_len, exec),
        Command::Inspect(a) => run_inspect(&a.model_path),
        Command::Synth(a) => run_synth(
            &SynthConfig {
                out_path: a.out_path.clone(),
                calib_path: a.calib_path.clone(),
                eval_path: a.eval_path.clone(),
                seq_len: a.seq_len,
                calib_sequences: a.calib_sequences,
                eval_sequences: a.eval_sequences,
                seed: a.seed,
            },
            exec,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match with_threads(cli.threads, || run(&cli)) {
        Ok(report) => {
            print!("{report}");
            if cli.json {
                println!("{}", report.to_json());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_infeasible() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
