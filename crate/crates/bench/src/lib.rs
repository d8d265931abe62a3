//! Shared fixtures for the benchmark targets.

use marsnav_core::dataset::{build_dataset, DatasetConfig, Split};
use marsnav_core::tensor::Tensor;
use marsnav_core::{Cell, NavWorld, Task, TerrainParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape product")
}

/// An `n x n` world with roughly `risky` of its cells blocked and the goal
/// in the centre.
pub fn random_world(n: usize, risky: f64, seed: u64) -> NavWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let goal = Cell::new(n as i32 / 2, n as i32 / 2);
    let safe = (0..n * n)
        .map(|i| i == goal.y as usize * n + goal.x as usize || !rng.gen_bool(risky))
        .collect();
    NavWorld::new(n, safe, goal, "bench", 4).expect("valid world")
}

/// Training tasks from a small generated corpus at input size `size`.
pub fn corpus_tasks(size: usize, maps: usize, seed: u64) -> Vec<Task> {
    let d = build_dataset(&DatasetConfig::new(TerrainParams::for_size(size), maps, 7, seed)).expect("corpus");
    d.tasks(Split::Train).expect("train split")
}
