use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rvg_bench::fixture;
use rvg_core::model::{configure_ablation, forward, Policy};
use rvg_core::training::{batch_gradients, evaluate, grounding_loss, Phase, Selection, TrainContext};
use rvg_core::{AblationVariant, GumbelSampler, Tape, TrainConfig};

fn single_example(c: &mut Criterion) {
    let f = fixture(32, 40);
    let ablation = configure_ablation(AblationVariant::Full);
    let ex = f.examples.iter().max_by_key(|e| e.tokens.real_len()).unwrap();
    let scene = &f.scenes[ex.scene];
    let mut group = c.benchmark_group("example");
    group.bench_function("greedy_forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new(&f.store);
            let out = forward(&mut tape, &f.model, &ablation, ex, scene, Policy::Greedy).unwrap();
            black_box(out.scores)
        })
    });
    group.bench_function("sampled_forward_backward", |b| {
        b.iter(|| {
            let mut sampler = GumbelSampler::new(1.0, true, 5).unwrap();
            let mut tape = Tape::new(&f.store);
            let out = forward(&mut tape, &f.model, &ablation, ex, scene, Policy::Sample(&mut sampler)).unwrap();
            let loss = grounding_loss(&mut tape, out.scores, ex.gt).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
    group.finish();
}

fn batches(c: &mut Criterion) {
    let f = fixture(32, 40);
    let cfg = TrainConfig::default();
    let batch: Vec<_> = f.examples.iter().take(cfg.batch_size).collect();
    let mut group = c.benchmark_group("batch32");
    group.sample_size(20);
    for variant in [AblationVariant::Full, AblationVariant::Chain, AblationVariant::NoNode] {
        let ctx = TrainContext {
            model: &f.model,
            ablation: configure_ablation(variant),
            cfg: &cfg,
            scenes: &f.scenes,
            seed: 7,
        };
        group.bench_with_input(BenchmarkId::new("finetune_gradients", variant), &batch, |b, batch| {
            b.iter(|| black_box(batch_gradients(&f.store, &ctx, batch, Phase::Finetune, Selection::StraightThrough).unwrap()))
        });
    }
    group.bench_function("evaluate", |b| {
        let ablation = configure_ablation(AblationVariant::Full);
        let examples = &f.examples[..cfg.batch_size];
        b.iter(|| black_box(evaluate(&f.store, &f.model, &ablation, examples, &f.scenes).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, single_example, batches);
criterion_main!(benches);
