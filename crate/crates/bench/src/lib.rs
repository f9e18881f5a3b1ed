//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vinesim::engine::{launch_states, rollout, RolloutConfig};
use vinesim::presets::{self, planted_qp, PlantedQp};
use vinesim::{PhysParams, Scene, VineState};

/// Cluttered scene, reference vine and `batch` launch states with room for `max_links`.
pub fn clutter_batch(max_links: usize, batch: usize, seed: u64) -> (Scene, PhysParams, Vec<VineState>) {
    let scene = presets::scene("clutter").expect("preset");
    let params = presets::reference_params();
    let d = params.d_segment_m;
    let states = launch_states(scene.base, 3, d, 0.2 * d, max_links, batch, seed, [-0.3, 0.3]).expect("launch");
    (scene, params, states)
}

/// A vine grown for `steps` steps in the cluttered scene, so its contacts are realistic.
pub fn grown_state(steps: usize) -> (Scene, PhysParams, VineState) {
    let (scene, params, states) = clutter_batch(40, 1, 0);
    let config = RolloutConfig {
        steps,
        ..Default::default()
    };
    let traj = rollout(&states[0], &params, &scene, &config).expect("rollout");
    let last = traj.last().clone();
    (scene, params, last)
}

/// Well-conditioned QP with `n` variables, `n / 4` equalities and `n` inequalities.
pub fn qp_instance(n: usize, seed: u64) -> PlantedQp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    planted_qp(&mut rng, n, n / 4, n, 100.0)
}
