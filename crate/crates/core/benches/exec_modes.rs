//! Sequential vs. parallel execution of the data-parallel hot paths.

use std::hint::black_box;
use std::sync::OnceLock;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use twostage_core::corpus::TokenCorpus;
use twostage_core::depth::greedy_remove_attentions;
use twostage_core::model::{evaluate_perplexity_with, AttentionOverlay, ModelConfig, ModelWeights};
use twostage_core::synth::{random_corpus, random_model};
use twostage_core::width::{score_neurons, NormKind};
use twostage_core::Exec;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn fixture() -> &'static (ModelWeights, TokenCorpus) {
    static FIXTURE: OnceLock<(ModelWeights, TokenCorpus)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let config = ModelConfig::toy();
        (
            random_model(&config, 0),
            random_corpus(config.vocab_size, 8, 128, 1),
        )
    })
}

fn bench_perplexity(c: &mut Criterion) {
    let (model, corpus) = fixture();
    let mut group = c.benchmark_group("perplexity_8x128");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                evaluate_perplexity_with(model, corpus, &AttentionOverlay::none(), exec).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let (model, corpus) = fixture();
    let mut group = c.benchmark_group("score_neurons_8x128");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| score_neurons(model, corpus, NormKind::L2, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_greedy(c: &mut Criterion) {
    let (model, corpus) = fixture();
    let one = corpus.select(&[0]);
    let mut group = c.benchmark_group("greedy_remove_2");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| greedy_remove_attentions(black_box(model), &one, 2, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_perplexity, bench_scoring, bench_greedy);
criterion_main!(benches);
