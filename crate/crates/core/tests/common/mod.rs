#![allow(dead_code)]

use cassi_core::autodiff::{Tape, Var};
use cassi_core::denoiser::NetConfig;
use cassi_core::gradcheck::finite_diff_check;
use cassi_core::scan::CubeSpec;
use cassi_core::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(out ∘ R)` for a fixed random `R`, so no output coordinate cancels.
pub fn probe_loss(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0x5eed)));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

pub fn assert_grad<F>(label: &str, f: F, theta: &Tensor)
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let err = finite_diff_check(f, theta, GRAD_EPS).unwrap();
    assert!(err <= GRAD_TOL, "{label}: relative gradient error {err:e}");
}

/// One-level network small enough for exhaustive gradient checks on 8×8.
pub fn tiny_net() -> NetConfig {
    NetConfig {
        base_channels: 4,
        levels: 1,
        blocks_per_level: 1,
        bottleneck_blocks: 1,
        cube: CubeSpec {
            patch: 4,
            h: 2,
            w: 2,
            c: 2,
        },
        state_size: 3,
        ffn_expansion: 1,
    }
}
