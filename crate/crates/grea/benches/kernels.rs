//! Sequential vs rayon variants of the hot kernels.
//!
//! The parallel entries only appear when the `parallel` feature is on
//! (the default). On a single-core host expect the rayon numbers to sit
//! at or slightly above sequential — the point of the pairing is to make
//! regressions in either path visible, and to measure the split gain on
//! multi-core machines.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use grea::tensor::kernels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, k, n) = (512, 64, 64);
    let a = rand_vec(&mut rng, m * k);
    let b = rand_vec(&mut rng, k * n);
    let mut g = c.benchmark_group("matmul");
    g.throughput(Throughput::Elements((m * k * n) as u64));
    let label = format!("{m}x{k}x{n}");
    g.bench_function(BenchmarkId::new("seq", &label), |bch| {
        bch.iter(|| kernels::matmul_seq(black_box(&a), black_box(&b), m, k, n));
    });
    #[cfg(feature = "parallel")]
    g.bench_function(BenchmarkId::new("par", &label), |bch| {
        bch.iter(|| kernels::matmul_par(black_box(&a), black_box(&b), m, k, n));
    });
    g.finish();
}

fn bench_spmm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d, edges) = (2048usize, 64usize, 8192usize);
    let triples: Vec<(usize, usize, f64)> = (0..edges)
        .map(|_| {
            (
                rng.random_range(0..n),
                rng.random_range(0..n),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let adj = kernels::SparseSym::from_triples(n, &triples);
    let x = rand_vec(&mut rng, n * d);
    let mut g = c.benchmark_group("spmm");
    g.throughput(Throughput::Elements((adj.weights.len() * d) as u64));
    let label = format!("n{n}_d{d}");
    g.bench_function(BenchmarkId::new("seq", &label), |bch| {
        bch.iter(|| kernels::spmm_seq(black_box(&adj), black_box(&x), d));
    });
    #[cfg(feature = "parallel")]
    g.bench_function(BenchmarkId::new("par", &label), |bch| {
        bch.iter(|| kernels::spmm_par(black_box(&adj), black_box(&x), d));
    });
    g.finish();
}

fn bench_segment_sum(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rows, d, segs) = (2048usize, 64usize, 128usize);
    let x = rand_vec(&mut rng, rows * d);
    let segments: Vec<usize> = (0..rows).map(|i| i * segs / rows).collect();
    let mut g = c.benchmark_group("segment_sum");
    g.throughput(Throughput::Elements((rows * d) as u64));
    let label = format!("{rows}rows_{segs}segs");
    g.bench_function(BenchmarkId::new("seq", &label), |bch| {
        bch.iter(|| kernels::segment_sum_seq(black_box(&x), d, black_box(&segments), segs));
    });
    #[cfg(feature = "parallel")]
    g.bench_function(BenchmarkId::new("par", &label), |bch| {
        bch.iter(|| kernels::segment_sum_par(black_box(&x), d, black_box(&segments), segs));
    });
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_spmm, bench_segment_sum);
criterion_main!(benches);
