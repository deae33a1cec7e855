//! Compares the rayon and sequential paths of the hot kernels.
//!
//! Run with `cargo bench -p lsmfm-tensor`. The sequential numbers are taken
//! from the same binary by switching `par::set_parallel(false)`; building with
//! `--no-default-features` removes rayon entirely.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lsmfm_tensor::{par, Border, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn modes() -> Vec<(&'static str, bool)> {
    if cfg!(feature = "parallel") {
        vec![("parallel", true), ("sequential", false)]
    } else {
        vec![("sequential", false)]
    }
}

fn conv_fwd_bwd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::uniform(&[2, 8, 32, 32, 32], 1.0, &mut rng);
    let w = Tensor::uniform(&[8, 8, 3, 3, 3], 0.2, &mut rng);
    let mut group = c.benchmark_group("conv3d_8x8_32cube");
    group.sample_size(10);
    for (label, on) in modes() {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new("forward_backward", label), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone(), true);
                let wv = g.leaf(w.clone(), true);
                let y = g.conv3d(xv, wv, None, 1, 1);
                let l = g.mean(y);
                g.backward(l);
                g.grad(wv).map(|t| t.data()[0])
            })
        });
    }
    par::set_parallel(true);
    group.finish();
}

fn attention_bmm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = Tensor::uniform(&[64, 64, 8], 1.0, &mut rng);
    let k = Tensor::uniform(&[64, 64, 8], 1.0, &mut rng);
    let mut group = c.benchmark_group("bmm_64x64x8_batch64");
    for (label, on) in modes() {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new("qk_softmax", label), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let qv = g.leaf(q.clone(), true);
                let kv = g.leaf(k.clone(), true);
                let s = g.bmm(qv, kv, false, true);
                let p = g.softmax_rows(s, 64);
                let l = g.mean(p);
                g.backward(l);
                g.grad(qv).map(|t| t.data()[0])
            })
        });
    }
    par::set_parallel(true);
    group.finish();
}

fn box_filter(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::uniform(&[1, 1, 64, 64, 64], 1.0, &mut rng);
    let kernel = vec![1.0 / 7.0; 7];
    let mut group = c.benchmark_group("box7_64cube");
    for (label, on) in modes() {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new("filter3_valid", label), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let y = g.filter3(xv, &kernel, Border::Valid);
                g.value(y).data()[0]
            })
        });
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(benches, conv_fwd_bwd, attention_bmm, box_filter);
criterion_main!(benches);
