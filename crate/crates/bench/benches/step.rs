use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vinesim::engine::{rollout_batch, step, RolloutConfig};
use vinesim_bench::{clutter_batch, grown_state};

fn single_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("step");
    for grown in [0, 50, 150] {
        let (scene, params, state) = grown_state(grown);
        g.bench_with_input(BenchmarkId::new("links", state.n), &state, |b, s| {
            b.iter(|| step(s, &params, &scene, params.growth_mps).unwrap())
        });
    }
    g.finish();
}

fn batched_rollout(c: &mut Criterion) {
    let mut g = c.benchmark_group("rollout_batch_20_steps");
    g.sample_size(10);
    for max_links in [10, 40] {
        for batch in [1, 64] {
            let (scene, params, states) = clutter_batch(max_links, batch, 0);
            let config = RolloutConfig {
                steps: 20,
                batch,
                max_links,
                ..Default::default()
            };
            g.bench_function(BenchmarkId::new(format!("max_links_{max_links}"), batch), |b| {
                b.iter(|| rollout_batch(&states, std::slice::from_ref(&params), &scene, &config, None).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, single_step, batched_rollout);
criterion_main!(benches);
