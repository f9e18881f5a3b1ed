use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vinesim::presets::{planted_qp, PlantedQp};
use vinesim::qpdiff::{solve, solve_backward, solve_batch, QpProblem, QpStatus};

fn instance(seed: u64, max_n: usize) -> PlantedQp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_n);
    let m_eq = rng.gen_range(0..=n / 2);
    let m_ineq = rng.gen_range(0..=2 * n);
    planted_qp(&mut rng, n, m_eq, m_ineq, 100.0)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn random_instances_satisfy_kkt_and_match_planted_optimum() {
    for seed in 0..300 {
        let p = instance(seed, 30);
        let sol = solve(&p.problem, None).unwrap();
        assert_eq!(sol.status, QpStatus::Solved, "seed {seed}");
        let r = sol.kkt_residuals(&p.problem);
        assert!(r.within_tolerance(&p.problem), "seed {seed}: {r:?}");
        assert!(max_diff(sol.z.as_slice(), &p.z) < 1e-7, "seed {seed}");
        assert!(max_diff(sol.mu.as_slice(), &p.mu) < 1e-6, "seed {seed}");
    }
}

#[test]
fn warm_start_reproduces_cold_solution() {
    for seed in 0..50 {
        let p = instance(1000 + seed, 20);
        let cold = solve(&p.problem, None).unwrap();
        let warm = solve(&p.problem, Some(&cold)).unwrap();
        assert!(max_diff(cold.z.as_slice(), warm.z.as_slice()) < 1e-10);
        assert!(warm.iterations <= cold.iterations);
    }
}

#[test]
fn batch_matches_individual_solves() {
    let problems: Vec<QpProblem> = (0..20).map(|s| instance(2000 + s, 15).problem).collect();
    let batch = solve_batch(&problems);
    for (p, b) in problems.iter().zip(batch) {
        let single = solve(p, None).unwrap();
        assert_eq!(single.z, b.unwrap().z);
    }
}

/// `L = w' z`; compare analytic parameter gradients with central differences of re-solves.
fn check_backward(p: &PlantedQp, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.problem.n();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |prob: &QpProblem| -> f64 {
        let s = solve(prob, None).unwrap();
        s.z.iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let sol = solve(&p.problem, None).unwrap();
    let g = solve_backward(&p.problem, &sol, &DVector::from_vec(w.clone())).unwrap();
    let h = 1e-6;
    let compare = |analytic: f64, perturb: &dyn Fn(&mut QpProblem, f64)| {
        let mut a = p.problem.clone();
        perturb(&mut a, h);
        let mut b = p.problem.clone();
        perturb(&mut b, -h);
        let fd = (loss(&a) - loss(&b)) / (2.0 * h);
        let scale = analytic.abs().max(fd.abs());
        assert!((analytic - fd).abs() <= 1e-4 * scale + 1e-8, "seed {seed}: analytic {analytic} fd {fd}");
    };
    for i in 0..n.min(5) {
        compare(g.lin[i], &|q, d| q.lin[i] += d);
    }
    for i in 0..p.problem.n_eq().min(3) {
        compare(g.b_eq[i], &|q, d| q.b_eq[i] += d);
        compare(g.a_eq[(i, 0)], &|q, d| q.a_eq[(i, 0)] += d);
    }
    for i in 0..p.problem.n_ineq().min(4) {
        compare(g.h_ineq[i], &|q, d| q.h_ineq[i] += d);
        compare(g.g_ineq[(i, n - 1)], &|q, d| q.g_ineq[(i, n - 1)] += d);
    }
    // symmetric perturbation of Q
    let j = n - 1;
    compare(if j == 0 { g.q[(0, 0)] } else { 2.0 * g.q[(0, j)] }, &|q, d| {
        q.q[(0, j)] += d;
        if j != 0 {
            q.q[(j, 0)] += d;
        }
    });
}

#[test]
fn backward_matches_finite_differences() {
    for seed in 0..100 {
        let p = instance(5000 + seed, 12);
        check_backward(&p, seed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solutions_are_kkt_points(seed in any::<u64>()) {
        let p = instance(seed, 25);
        let sol = solve(&p.problem, None).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Solved);
        prop_assert!(sol.kkt_residuals(&p.problem).within_tolerance(&p.problem));
    }

    #[test]
    fn objective_is_minimal_against_feasible_perturbations(seed in any::<u64>(), t in 0.0f64..1.0) {
        let p = instance(seed, 10);
        let sol = solve(&p.problem, None).unwrap();
        // any other feasible point (here a convex combination with a random feasible point)
        // cannot have a lower objective
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let other = {
            let mut q = p.problem.clone();
            for v in q.lin.iter_mut() {
                *v += rng.gen_range(-1.0..1.0);
            }
            solve(&q, None).unwrap().z
        };
        let mix = &sol.z * (1.0 - t) + &other * t;
        prop_assert!(p.problem.objective(&mix) >= p.problem.objective(&sol.z) - 1e-9);
    }
}
