//! Seeded inputs shared by the benchmarks in `benches/`.

use cassi_core::io::{random_coded_mask, toy_scene};
use cassi_core::{HsiCube, SensingOperator, SsmParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A `size`×`size`×`bands` toy scene and its coded operator at `d = 2`.
pub fn scene(size: usize, bands: usize) -> (HsiCube, SensingOperator) {
    let cube = toy_scene(size, size, bands, 7);
    let op = SensingOperator::new(size, size, random_coded_mask(size, size, 3), 2, bands).unwrap();
    (cube, op)
}

/// Stable random SSM parameters and an input sequence of length `l`.
pub fn ssm_problem(l: usize, n: usize) -> (Vec<f64>, SsmParams) {
    let mut g = ChaCha8Rng::seed_from_u64(11);
    let p = SsmParams {
        a: (0..n).map(|_| -g.gen_range(0.05..3.0)).collect(),
        b: (0..l * n).map(|_| g.gen_range(-1.0..1.0)).collect(),
        c: (0..l * n).map(|_| g.gen_range(-1.0..1.0)).collect(),
        d: 0.5,
        delta: (0..l).map(|_| g.gen_range(0.001..1.0)).collect(),
    };
    let x = (0..l).map(|_| g.gen_range(-1.0..1.0)).collect();
    (x, p)
}
