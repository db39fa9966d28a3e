use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use twostage_core::checkpoint::save_checkpoint;
use twostage_core::corpus::save_corpus;
use twostage_core::model::{evaluate_perplexity, ModelConfig};
use twostage_core::pipeline::eval_report;
use twostage_core::synth::{random_corpus, random_model, uniform_model};

fn twostage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twostage"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Files {
    _dir: TempDir,
    model: PathBuf,
    calib: PathBuf,
    root: PathBuf,
}

fn toy_files() -> Files {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let model = root.join("toy.tsck");
    let calib = root.join("calib.tcrp");
    save_checkpoint(&random_model(&ModelConfig::toy(), 0), &model).unwrap();
    save_corpus(&random_corpus(256, 4, 32, 0), &calib).unwrap();
    Files {
        _dir: dir,
        model,
        calib,
        root,
    }
}

#[test]
fn plan_at_quarter_sparsity() {
    let f = toy_files();
    let o = twostage(&["plan", "--model-path", s(&f.model), "--sparsity", "0.25"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    for line in [
        "n_attn_to_remove=1",
        "neurons_to_prune_per_block=43",
        "achieved_sparsity=0.2500",
    ] {
        assert!(out.lines().any(|l| l == line), "missing {line} in\n{out}");
    }
}

#[test]
fn plan_at_zero_is_a_no_op() {
    let f = toy_files();
    let o = twostage(&["plan", "--model-path", s(&f.model), "--sparsity", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("n_attn_to_remove=0\n") && out.contains("neurons_to_prune_per_block=0\n"));
}

#[test]
fn infeasible_plan_exits_with_two() {
    let f = toy_files();
    let o = twostage(&[
        "plan",
        "--model-path",
        s(&f.model),
        "--sparsity",
        "0.99",
        "--alpha",
        "0.1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("theoretical maximum"));
}

#[test]
fn validation_and_io_errors_exit_with_one() {
    let f = toy_files();
    let o = twostage(&["plan", "--model-path", s(&f.model), "--sparsity", "1.0"]);
    assert_eq!(o.status.code(), Some(1));

    let bytes = std::fs::read(&f.model).unwrap();
    let corrupt = f.root.join("corrupt.tsck");
    std::fs::write(&corrupt, &bytes[..bytes.len() / 2]).unwrap();
    let o = twostage(&["inspect", "--model-path", s(&corrupt)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let o = twostage(&["inspect", "--model-path", s(&f.root.join("missing.tsck"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_of_uniform_fixture_prints_vocab_size() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("uniform.tsck");
    let corpus_path = dir.path().join("c.tcrp");
    let corpus = random_corpus(256, 3, 16, 5);
    save_checkpoint(&uniform_model(256), &model).unwrap();
    save_corpus(&corpus, &corpus_path).unwrap();
    let o = twostage(&[
        "eval",
        "--model-path",
        s(&model),
        "--eval-paths",
        s(&corpus_path),
        "--seq-len",
        "16",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("eval.0.perplexity=256.000000\n"), "{out}");

    let module = eval_report(&evaluate_perplexity(&uniform_model(256), &corpus).unwrap());
    for (k, v) in module.entries() {
        assert!(out.contains(&format!("eval.0.{k}={v}\n")), "{k} differs");
    }
}

#[test]
fn inspect_reports_dense_counts() {
    let f = toy_files();
    let out = stdout(&twostage(&["inspect", "--model-path", s(&f.model)]));
    assert!(out.contains("num_blocks=4\n"));
    assert!(out.contains("block.0.attention_params=16384\n"));
    assert!(out.contains("block.3.ffn_params=33024\n"));
    assert!(out.contains("total_block_params=197632\n"));
}

fn prune_args<'a>(f: &'a Files, out: &'a str) -> Vec<&'a str> {
    vec![
        "prune",
        "--model-path",
        s(&f.model),
        "--calib-path",
        s(&f.calib),
        "--sparsity",
        "0.25",
        "--calib-samples-stage1",
        "4",
        "--seq-len",
        "32",
        "--out-path",
        out,
    ]
}

#[test]
fn prune_is_deterministic_and_inspectable() {
    let f = toy_files();
    let a = f.root.join("a.tsck");
    let b = f.root.join("b.tsck");
    let first = twostage(&prune_args(&f, s(&a)));
    assert_eq!(
        first.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let mut args = prune_args(&f, s(&b));
    args.insert(0, "--sequential");
    let second = twostage(&args);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let strip = |o: &Output| stdout(o).replace(s(&a), "").replace(s(&b), "");
    assert_eq!(strip(&first), strip(&second));
    assert!(stdout(&first).contains("verify=pass\n"));

    let out = stdout(&twostage(&["inspect", "--model-path", s(&a)]));
    assert!(out.contains("block.0.d_int=129\n"));
    assert!(out
        .lines()
        .any(|l| l.starts_with("removed_attention=") && l.len() > "removed_attention=".len()));
}

#[test]
fn json_flag_adds_one_object() {
    let f = toy_files();
    let out = stdout(&twostage(&[
        "--json",
        "plan",
        "--model-path",
        s(&f.model),
        "--sparsity",
        "0.25",
    ]));
    let last = out.lines().last().unwrap();
    assert!(last.starts_with('{') && last.ends_with('}'));
    assert!(last.contains("\"n_attn_to_remove\":"));
}

#[test]
fn synth_writes_loadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.tsck");
    let calib = dir.path().join("c.tcrp");
    let o = twostage(&[
        "synth",
        "--out-path",
        s(&model),
        "--calib-path",
        s(&calib),
        "--seq-len",
        "8",
        "--calib-sequences",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let o = twostage(&[
        "eval",
        "--model-path",
        s(&model),
        "--eval-paths",
        s(&calib),
        "--seq-len",
        "8",
    ]);
    assert!(stdout(&o).contains("eval.0.sequences=2\n"));
}
