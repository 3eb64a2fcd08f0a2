//! Fixtures shared by the benchmarks.

use funcnet::datagen::generate_scene;
use funcnet::iseg::SegProbs;
use funcnet::tensor::Tensor;
use funcnet::voxel::{Coord, SegmentedScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// A generated scene of `category` at `res`.
pub fn scene(category: usize, res: usize) -> SegmentedScene {
    generate_scene(category, 17, res).expect("category in range").seg
}

/// Random label probabilities over the scene's voxels, normalized per voxel.
pub fn random_probs(res: usize, labels: usize, seed: u64) -> SegProbs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = res.pow(3);
    let raw: Vec<f64> = (0..labels * n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let mut data = raw.clone();
    for v in 0..n {
        let total: f64 = (0..labels).map(|l| raw[l * n + v]).sum();
        for l in 0..labels {
            data[l * n + v] = raw[l * n + v] / total;
        }
    }
    SegProbs::new(res, labels, data).expect("sizes match")
}

pub fn random_points(count: usize, res: usize, seed: u64) -> Vec<Coord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| [rng.gen_range(0..res), rng.gen_range(0..res), rng.gen_range(0..res)])
        .collect()
}
