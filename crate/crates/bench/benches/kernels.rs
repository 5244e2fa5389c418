use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use hhft_bench::{batch, desk, tensor};
use hhft_core::model::ModelKind;
use hhft_core::numerics::Tape;
use hhft_core::training::{auc, bce_loss};

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    for n in [32, 128, 256] {
        let (a, b) = (tensor(&[n, n], 0.1), tensor(&[n, n], 0.7));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| a.matmul(black_box(&b)).unwrap()));
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let (q, k, v) = (tensor(&[256, 4, 32], 0.1), tensor(&[256, 4, 32], 0.2), tensor(&[256, 4, 32], 0.3));
    c.bench_function("attention fwd+bwd b256 t4 d32 h4", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let (q, k, v) = (tape.param(q.clone()), tape.param(k.clone()), tape.param(v.clone()));
            let out = tape.attention(q, k, v, 4).unwrap();
            let loss = tape.sum(out);
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train step b256");
    for kind in [ModelKind::Mlp, ModelKind::SharedTransformer, ModelKind::Hhft] {
        let (model, records) = desk(kind, 256);
        let b = batch(&model, &records);
        g.bench_function(kind.name(), |bench| {
            bench.iter(|| {
                let tape = Tape::new();
                let vars = model.store.register(&tape);
                let z = model.forward(&tape, &vars, &b).unwrap();
                let loss = bce_loss(&tape, z, &b.labels).unwrap();
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let n = 100_000;
    let scores: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64).collect();
    let labels: Vec<f64> = (0..n).map(|i| ((i * 31) % 3 == 0) as u8 as f64).collect();
    c.bench_function("auc 100k", |bench| bench.iter(|| auc(black_box(&scores), &labels).unwrap()));
}

criterion_group!(benches, gemm, attention, train_step, metrics);
criterion_main!(benches);
