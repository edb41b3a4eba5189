//! Microbenchmarks for the hot numeric kernels.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use v2m_core::graph::Graph;
use v2m_core::tensor::Tensor;

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::randn(&[64, 64], &mut rng);
    let b = Tensor::randn(&[64, 64], &mut rng);
    c.bench_function("matmul_64_forward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new_unchecked();
            let na = g.input(a.clone());
            let nb = g.input(b.clone());
            let y = g.matmul(na, nb);
            black_box(g.value(y).data()[0])
        })
    });
    c.bench_function("matmul_64_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new_unchecked();
            let na = g.input(a.clone());
            let nb = g.input(b.clone());
            let y = g.matmul(na, nb);
            let sq = g.mul(y, y);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            black_box(grads.of(na, &g).data()[0])
        })
    });
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[60, 4, 4, 16], &mut rng);
    let w = Tensor::randn(&[2, 2, 16, 16], &mut rng);
    c.bench_function("conv2d_downsample_60f", |bench| {
        bench.iter(|| {
            let mut g = Graph::new_unchecked();
            let nx = g.input(x.clone());
            let nw = g.input(w.clone());
            let y = g.conv2d(nx, nw, 2, 0);
            black_box(g.value(y).data()[0])
        })
    });
}

fn bench_softmax_rms(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[4, 80, 80], &mut rng);
    c.bench_function("softmax_attention_scores", |bench| {
        bench.iter(|| {
            let mut g = Graph::new_unchecked();
            let nx = g.input(x.clone());
            let y = g.softmax(nx, 2);
            black_box(g.value(y).data()[0])
        })
    });
    let h = Tensor::randn(&[80, 64], &mut rng);
    let gain = Tensor::ones(&[64]);
    c.bench_function("rms_norm_80x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new_unchecked();
            let nh = g.input(h.clone());
            let ng = g.input(gain.clone());
            let y = g.rms_norm(nh, ng, 1e-6);
            black_box(g.value(y).data()[0])
        })
    });
}

criterion_group!(kernels, bench_matmul, bench_conv, bench_softmax_rms);
criterion_main!(kernels);
