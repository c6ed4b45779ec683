use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use metro_bench::{filled, model_and_input};
use metro_core::autodiff::Graph;
use metro_core::model::Retain;
use metro_core::synth::Preset;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let (a, b) = (filled(n, n, 1), filled(n, n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_fwd_bwd");
    group.sample_size(20);
    for (tokens, width) in [(216usize, 32usize), (445, 32)] {
        let (q, k, v) = (
            filled(tokens, width, 3),
            filled(tokens, width, 4),
            filled(tokens, width, 5),
        );
        group.bench_function(format!("{tokens}x{width}"), |bch| {
            bch.iter(|| {
                let mut g = Graph::new();
                let (qv, kv, vv) = (
                    g.leaf(q.clone(), true),
                    g.leaf(k.clone(), true),
                    g.leaf(v.clone(), true),
                );
                let out = g.attention(qv, kv, vv, 4).unwrap();
                let s = g.sum(out);
                g.backward(s).unwrap();
                black_box(g.take_grad(qv));
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for (name, preset) in [("hand", Preset::Hand), ("body", Preset::Body)] {
        let (model, input) = model_and_input(preset, 1);
        group.bench_function(name, |bch| {
            bch.iter(|| black_box(model.infer(&input, Retain::None).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, attention, forward);
criterion_main!(benches);
