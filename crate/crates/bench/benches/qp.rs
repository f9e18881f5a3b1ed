use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;
use vinesim::qpdiff::{solve, solve_backward};
use vinesim_bench::qp_instance;

fn qp(c: &mut Criterion) {
    let mut g = c.benchmark_group("qp");
    for n in [8, 16, 30] {
        let p = qp_instance(n, 3).problem;
        g.bench_with_input(BenchmarkId::new("solve", n), &p, |b, p| b.iter(|| solve(p, None).unwrap()));
        let sol = solve(&p, None).unwrap();
        g.bench_with_input(BenchmarkId::new("warm_solve", n), &p, |b, p| b.iter(|| solve(p, Some(&sol)).unwrap()));
        let w = DVector::from_element(n, 1.0);
        g.bench_with_input(BenchmarkId::new("backward", n), &p, |b, p| {
            b.iter(|| solve_backward(p, &sol, &w).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, qp);
criterion_main!(benches);
