//! Sweeps the attention/FFN balance `alpha` over a grid and the sparsity
//! target over a range on the toy model, printing evaluation perplexity and
//! the number of attentions each plan removes.
//!
//! ```text
//! cargo run --release -p twostage-core --example alpha_sweep [calib_seqs] [seq_len]
//! ```

use twostage_core::model::ModelConfig;
use twostage_core::pipeline::{prune, PruneOptions};
use twostage_core::synth::{random_model, sample_corpus};
use twostage_core::Exec;

const ALPHAS: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 3.0, 5.0];
const SPARSITIES: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let calib_seqs = args.next().transpose()?.unwrap_or(4);
    let seq_len = args.next().transpose()?.unwrap_or(64);

    let model = random_model(&ModelConfig::toy(), 0);
    let calib = sample_corpus(&model, calib_seqs, seq_len, 0, Exec::default())?;
    let eval = vec![(
        "eval".to_string(),
        sample_corpus(&model, 2, seq_len, 1, Exec::default())?,
    )];

    print!("{:>6}", "alpha");
    for s in SPARSITIES {
        print!("  {:>14}", format!("s={s}"));
    }
    println!();
    for alpha in ALPHAS {
        print!("{alpha:>6}");
        for sparsity in SPARSITIES {
            let opts = PruneOptions {
                sparsity,
                alpha,
                calib_samples_stage1: calib_seqs,
                ..PruneOptions::default()
            };
            let cell = match prune(&model, &calib, &eval, &opts) {
                Ok(out) => format!(
                    "{} ({}a)",
                    out.report.get("eval.0.perplexity_after").unwrap_or("?"),
                    out.plan.n_attn_to_remove
                ),
                Err(e) if e.is_infeasible() => "infeasible".into(),
                Err(e) => return Err(e.into()),
            };
            print!("  {cell:>14}");
        }
        println!();
    }
    Ok(())
}
