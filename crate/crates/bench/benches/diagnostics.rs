use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lamp_bench::regression;
use lamp_core::diagnostics::{best_subset, harvey_collier};

fn subset(c: &mut Criterion) {
    let mut group = c.benchmark_group("best_subset");
    group.sample_size(20);
    for (p, k) in [(10, 3), (20, 4), (50, 6)] {
        let (x, y) = regression(200, p, 3);
        group.bench_with_input(BenchmarkId::from_parameter(format!("p{p}_k{k}")), &k, |b, &k| {
            b.iter(|| best_subset(&x, &y, k).unwrap())
        });
    }
    group.finish();
}

fn linearity(c: &mut Criterion) {
    let mut group = c.benchmark_group("harvey_collier");
    for n in [51, 200, 1000] {
        let (x, y) = regression(n, 5, 4);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| harvey_collier(&x, &y, 0.05).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, subset, linearity);
criterion_main!(benches);
