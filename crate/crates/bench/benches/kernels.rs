use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use objslot::segmentation::hungarian_match;
use objslot::slot_attention::{SlotAttention, SlotConfig};
use objslot::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let a = rnd(&[n, n], 1);
        let b = rnd(&[n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let av = g.constant(a.clone());
                let bv = g.constant(b.clone());
                let y = g.matmul(av, bv).unwrap();
                black_box(g.value(y).numel())
            })
        });
    }
    group.finish();
}

fn decompose(c: &mut Criterion) {
    // one clip at the default sizes: 8 frames of 8x8 patches, 64 channels
    let mut store = ParamStore::new();
    let cfg = SlotConfig {
        n_slots: 4,
        dim: 64,
        ..SlotConfig::default()
    };
    let sa = SlotAttention::new(&mut store, "slots", cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let features = rnd(&[8, 64, 64], 3);

    c.bench_function("decompose/forward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(features.clone());
            let out = sa.decompose(&mut g, &p, x).unwrap();
            black_box(g.value(out.tokens).numel())
        })
    });
    c.bench_function("decompose/forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(features.clone());
            let out = sa.decompose(&mut g, &p, x).unwrap();
            let loss = g.sum(out.tokens);
            g.backward(loss).unwrap();
            black_box(g.value(loss).data()[0])
        })
    });
}

fn hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for n in [4, 16, 64] {
        let cost = rnd(&[n, n], 4);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(hungarian_match(&cost).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, decompose, hungarian);
criterion_main!(benches);
