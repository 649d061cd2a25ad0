//! Sequential versus data-parallel execution of the hot kernels.
//!
//! Without the `parallel` feature only the sequential arm is measured.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use sdlab::kernels::{conv3x3_with, matmul_at_b_with, matmul_with, ConvShape};
use sdlab::par::Exec;
use sdlab::rng::{normal_mat, stream, Stream};
use std::hint::black_box;

fn modes() -> Vec<(&'static str, Exec)> {
    let mut m = vec![("seq", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    m.push(("par", Exec::Parallel));
    m
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = stream(0, Stream::Data);
    for &(rows, k, n) in &[(256usize, 96usize, 96usize), (1024, 128, 128)] {
        let a = normal_mat(&mut rng, rows, k);
        let b = normal_mat(&mut rng, k, n);
        let g = normal_mat(&mut rng, rows, n);
        group.throughput(Throughput::Elements((rows * k * n) as u64));
        for (name, exec) in modes() {
            let id = format!("{rows}x{k}x{n}");
            group.bench_with_input(BenchmarkId::new(format!("forward/{name}"), &id), &exec, |bch, &e| {
                bch.iter(|| matmul_with(e, black_box(&a), black_box(&b)))
            });
            group.bench_with_input(BenchmarkId::new(format!("weight_grad/{name}"), &id), &exec, |bch, &e| {
                bch.iter(|| matmul_at_b_with(e, black_box(&a), black_box(&g)))
            });
        }
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    let mut rng = stream(1, Stream::Data);
    let s = ConvShape {
        cin: 8,
        cout: 8,
        h: 16,
        w: 16,
    };
    for batch in [16usize, 128] {
        let x = normal_mat(&mut rng, batch, s.cin * s.h * s.w);
        let w = normal_mat(&mut rng, 1, s.weight_len()).into_vec();
        let b = vec![0.0; s.cout];
        group.throughput(Throughput::Elements(batch as u64));
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, batch), &exec, |bch, &e| {
                bch.iter(|| conv3x3_with(e, black_box(&x), &w, &b, s))
            });
        }
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_matmul, bench_conv
}
criterion_main!(benches);
