use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use moesumm_bench::desk_fixture;
use moesumm_core::autodiff::Graph;
use moesumm_core::decoding::greedy_decode;
use moesumm_core::metrics::rouge;
use moesumm_core::model::PackedBatch;
use moesumm_core::objectives::{batch_loss, ObjectiveOptions};
use moesumm_core::{ForwardOptions, RoutingOverride, Tensor};

fn matmul(c: &mut Criterion) {
    let a = Tensor::full(&[256, 64], 0.5);
    let b = Tensor::full(&[64, 256], 0.25);
    c.bench_function("matmul 256x64x256", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(&a);
            let y = g.constant(&b);
            black_box(g.matmul(x, y).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let (params, corpora) = desk_fixture(16);
    let examples = &corpora[0].1;
    let pairs: Vec<(&[usize], &[usize])> = examples
        .iter()
        .map(|e| (e.source_ids.as_slice(), e.target_ids.as_slice()))
        .collect();
    let batch = PackedBatch::new(0, &pairs).unwrap();
    let mut group = c.benchmark_group("loss and backward, batch 16");
    for (name, margin_enabled) in [("with margin", true), ("generation only", false)] {
        let opts = ObjectiveOptions {
            margin_enabled,
            ..Default::default()
        };
        group.bench_function(name, |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (bound, _) = params.bind(&mut g, None);
                let loss = batch_loss(&mut g, &params, &bound, &batch, &opts, RoutingOverride::None).unwrap();
                black_box(g.backward(loss.root).unwrap());
            })
        });
    }
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let (params, corpora) = desk_fixture(1);
    let src = corpora[2].1[0].source_ids.clone();
    c.bench_function("greedy decode", |bench| {
        bench.iter(|| black_box(greedy_decode(&params, &src, 2, &ForwardOptions::full()).unwrap()))
    });
}

fn rouge_scores(c: &mut Criterion) {
    let a: Vec<u32> = (0..200).map(|i| i % 17).collect();
    let b: Vec<u32> = (0..200).map(|i| (i * 7) % 19).collect();
    c.bench_function("rouge 200 tokens", |bench| bench.iter(|| black_box(rouge(&a, &b))));
}

criterion_group!(benches, matmul, train_step, decoding, rouge_scores);
criterion_main!(benches);
