mod common;

use cassi_core::ssm::*;
use cassi_core::{Tape, Tensor};
use common::rng;
use proptest::prelude::*;
use rand::Rng;

fn random_params<R: Rng>(g: &mut R, l: usize, n: usize) -> SsmParams {
    SsmParams {
        a: (0..n).map(|_| -g.gen_range(0.05..3.0)).collect(),
        b: (0..l * n).map(|_| g.gen_range(-1.0..1.0)).collect(),
        c: (0..l * n).map(|_| g.gen_range(-1.0..1.0)).collect(),
        d: g.gen_range(-1.0..1.0),
        delta: (0..l).map(|_| g.gen_range(0.001..1.0)).collect(),
    }
}

#[test]
fn scan_equals_naive_oracle_over_100_seeds() {
    for seed in 0..100u64 {
        let mut g = rng(seed);
        let l = if seed % 10 == 0 { 4096 } else { g.gen_range(1..=512) };
        let n = g.gen_range(1..=16);
        let p = random_params(&mut g, l, n);
        let x: Vec<f64> = (0..l).map(|_| g.gen_range(-1.0..1.0)).collect();
        let fast = selective_scan(&x, &p).unwrap();
        let disc = p.discretize().unwrap();
        let slow = naive_scan_oracle(&x, &disc.a_bar, &disc.b_bar, &p.c, p.d, n).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn tape_scan_matches_single_channel_scan() {
    let mut g = rng(3);
    let (ch, l, n) = (3, 40, 5);
    let x = Tensor::randn(&[ch, l], 1.0, &mut g);
    let delta = Tensor::uniform(&[ch, l], 0.01, 1.0, &mut g);
    let a = Tensor::uniform(&[ch, n], -3.0, -0.1, &mut g);
    let b = Tensor::randn(&[n, l], 1.0, &mut g);
    let c = Tensor::randn(&[n, l], 1.0, &mut g);
    let d = Tensor::randn(&[ch], 1.0, &mut g);
    let mut tape = Tape::new();
    let vars: Vec<_> = [&x, &delta, &a, &b, &c, &d]
        .iter()
        .map(|t| tape.constant((*t).clone()))
        .collect();
    let y = tape
        .selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])
        .unwrap();
    let y = tape.value(y).clone();
    // B and C are shared by channels and stored state-major on the tape
    let token_major =
        |t: &Tensor| -> Vec<f64> { (0..l).flat_map(|s| (0..n).map(move |k| t.data()[k * l + s])).collect() };
    for k in 0..ch {
        let p = SsmParams {
            a: a.data()[k * n..(k + 1) * n].to_vec(),
            b: token_major(&b),
            c: token_major(&c),
            d: d.data()[k],
            delta: delta.data()[k * l..(k + 1) * l].to_vec(),
        };
        let want = selective_scan(&x.data()[k * l..(k + 1) * l], &p).unwrap();
        for (u, v) in y.data()[k * l..(k + 1) * l].iter().zip(&want) {
            assert!((u - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn zoh_values() {
    let (a, b) = discretize_zoh(&[-1.0], &[1.0], 0.1).unwrap();
    assert!((a[0] - 0.904837418035959_6).abs() < 1e-15);
    assert!((b[0] - 0.095162581964040_43).abs() < 1e-15);
    let (a, _) = discretize_zoh(&[-1.0], &[1.0], std::f64::consts::LN_2).unwrap();
    assert!((a[0] - 0.5).abs() < 1e-15);
    // |ΔA| = 1e-12: the series ΔB(1 + ΔA/2) differs from ΔB by ~1e-24
    let (_, b) = discretize_zoh(&[-1.0], &[2.0], 1e-12).unwrap();
    assert!((b[0] - 2e-12).abs() <= 1e-22);
    assert!(discretize_zoh(&[-1.0], &[1.0], 0.0).is_err());
}

#[test]
fn continuous_solution_is_matched() {
    for delta in [0.25, 0.5] {
        let dev = continuous_response_check(&[-1.0], &[1.0], &[1.0], 0.0, 1.0, delta, 16).unwrap();
        assert!(dev <= 1e-9, "Δ={delta}: {dev}");
    }
    let dev = continuous_response_check(
        &[-1.0, -2.5, -0.3],
        &[1.0, 0.5, -2.0],
        &[0.3, 1.0, 1.0],
        0.7,
        1.3,
        0.1,
        200,
    )
    .unwrap();
    assert!(dev <= 1e-9);
    assert_eq!(
        continuous_response_check(&[-1.0], &[1.0], &[1.0], 0.5, 0.0, 0.25, 16).unwrap(),
        0.0
    );
}

#[test]
fn stable_over_long_sequences() {
    let mut g = rng(8);
    let l = 100_000;
    let n = 16;
    let p = random_params(&mut g, l, n);
    let x: Vec<f64> = (0..l).map(|_| g.gen_range(-1.0..1.0)).collect();
    let y = selective_scan(&x, &p).unwrap();
    assert!(y.iter().all(|v| v.is_finite() && v.abs() < 1e3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn causal(seed: u64, l in 2usize..64, n in 1usize..8) {
        let mut g = rng(seed);
        let p = random_params(&mut g, l, n);
        let x: Vec<f64> = (0..l).map(|_| g.gen_range(-1.0..1.0)).collect();
        let cut = g.gen_range(0..l - 1);
        let mut x2 = x.clone();
        for v in &mut x2[cut + 1..] {
            *v += g.gen_range(-5.0..5.0);
        }
        let y1 = selective_scan(&x, &p).unwrap();
        let y2 = selective_scan(&x2, &p).unwrap();
        prop_assert_eq!(&y1[..=cut], &y2[..=cut]);
    }

    #[test]
    fn discretized_transition_in_unit_interval(seed: u64, n in 1usize..16) {
        let mut g = rng(seed);
        let p = random_params(&mut g, 4, n);
        let disc = p.discretize().unwrap();
        prop_assert!(disc.a_bar.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn deterministic(seed: u64) {
        let mut g = rng(seed);
        let p = random_params(&mut g, 33, 4);
        let x: Vec<f64> = (0..33).map(|_| g.gen()).collect();
        let a = selective_scan(&x, &p).unwrap();
        let b = selective_scan(&x, &p).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn length_mismatch_rejected() {
    let mut g = rng(1);
    let p = random_params(&mut g, 5, 2);
    assert!(selective_scan(&[1.0; 4], &p).is_err());
    assert!(naive_scan_oracle(&[1.0; 3], &[0.5; 4], &[1.0; 4], &[1.0; 4], 0.0, 2).is_err());
}
