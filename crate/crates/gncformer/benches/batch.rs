//! Rayon fan-out vs the sequential fallback on the two batch-level
//! workloads: training-step gradients and greedy-decode evaluation.
//! Both paths must produce bit-identical results; the bench measures what
//! the fan-out buys on the current machine.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use gncformer::model::{build_model, ModelConfig};
use gncformer::parallel::{batch_map, batch_map_seq};
use gncformer::task::{generate_task, Example, TaskSpec, BOS, EOS};
use gncformer::train::{batch_gradients, batch_gradients_seq};

fn bench_setup() -> (gncformer::model::GncformerModel, Vec<Example>) {
    let config = ModelConfig {
        source_vocab: 20,
        target_vocab: 20,
        ..ModelConfig::default()
    };
    let model = build_model(&config, 0).expect("build");
    let data = generate_task(&TaskSpec {
        samples: 64,
        ..TaskSpec::default()
    })
    .expect("task");
    (model, data.train)
}

fn bench_batch_gradients(c: &mut Criterion) {
    let (model, train) = bench_setup();
    let batch: Vec<&Example> = train.iter().take(16).collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| batch_gradients(black_box(&model), &batch, 0.1, 0.0, 0, 1).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| batch_gradients_seq(black_box(&model), &batch, 0.1, 0.0, 0, 1).unwrap())
    });
    group.finish();
}

fn bench_eval_decode(c: &mut Criterion) {
    let (model, train) = bench_setup();
    let examples: Vec<&Example> = train.iter().take(8).collect();
    let decode = |ex: &&Example| {
        model
            .greedy_decode(&ex.source, ex.target.len() + 4, BOS, EOS)
            .unwrap()
    };
    let mut group = c.benchmark_group("eval_decode");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| batch_map(black_box(&examples), decode))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| batch_map_seq(black_box(&examples), decode))
    });
    group.finish();
}

criterion_group!(benches, bench_batch_gradients, bench_eval_decode);
criterion_main!(benches);
