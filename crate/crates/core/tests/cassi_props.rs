mod common;

use cassi_core::cassi::{build_dense_phi, DENSE_LIMIT};
use cassi_core::*;
use common::rng;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

fn random_op<R: Rng>(g: &mut R, h: usize, w: usize, bands: usize, d: usize) -> SensingOperator {
    let mask = (0..h * w).map(|_| g.gen::<f64>()).collect();
    SensingOperator::new(h, w, mask, d, bands).unwrap()
}

fn random_cube<R: Rng>(g: &mut R, h: usize, w: usize, b: usize) -> HsiCube {
    HsiCube::new(h, w, b, (0..h * w * b).map(|_| g.gen::<f64>()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn adjoint_identity(h in 1usize..=8, w in 1usize..=8, b in 1usize..=4, d in 0usize..=2, seed: u64) {
        let mut g = rng(seed);
        let op = random_op(&mut g, h, w, b, d);
        let x = random_cube(&mut g, h, w, b);
        let wp = op.detector_width();
        let y = Measurement::new(h, wp, (0..h * wp).map(|_| g.gen::<f64>() - 0.5).collect()).unwrap();
        let px = forward_project(&x, &op).unwrap();
        let aty = adjoint_project(&y, &op).unwrap();
        let lhs: f64 = px.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        let nx = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((lhs - rhs).abs() / (nx * ny) <= 1e-10);
    }

    #[test]
    fn dense_matrix_agrees_and_gram_is_diagonal(h in 1usize..=5, w in 1usize..=5, b in 1usize..=4, d in 0usize..=3, seed: u64) {
        let mut g = rng(seed);
        let op = random_op(&mut g, h, w, b, d);
        let phi = build_dense_phi(&op).unwrap();
        let x = random_cube(&mut g, h, w, b);
        let dense = &phi * DVector::from_column_slice(x.data());
        let fast = forward_project(&x, &op).unwrap();
        for (a, b) in dense.iter().zip(fast.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let gram = &phi * phi.transpose();
        let diag = phi_diag(&op);
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                if i == j {
                    prop_assert!((gram[(i, i)] - diag[i]).abs() <= 1e-12);
                } else {
                    prop_assert_eq!(gram[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn shift_back_matches_index_oracle(h in 1usize..=6, w in 1usize..=6, b in 1usize..=4, d in 0usize..=3, seed: u64) {
        let mut g = rng(seed);
        let op = random_op(&mut g, h, w, b, d);
        let wp = op.detector_width();
        let y = Measurement::new(h, wp, (0..h * wp).map(|_| g.gen::<f64>()).collect()).unwrap();
        let x = shift_back(&y, &op).unwrap();
        for band in 0..b {
            for r in 0..h {
                for c in 0..w {
                    prop_assert_eq!(x.get(r, c, band), y.data()[r * wp + c + d * band]);
                }
            }
        }
    }

    #[test]
    fn non_overlapping_bands_round_trip(h in 1usize..=5, w in 1usize..=5, b in 1usize..=4, extra in 0usize..=2, seed: u64) {
        let mut g = rng(seed);
        let op = SensingOperator::new(h, w, vec![1.0; h * w], w + extra, b).unwrap();
        let x = random_cube(&mut g, h, w, b);
        let back = shift_back(&forward_project(&x, &op).unwrap(), &op).unwrap();
        prop_assert_eq!(back, x);
    }
}

#[test]
fn impulse_lands_at_its_shift() {
    let (h, w, b, d) = (2, 3, 3, 2);
    let op = SensingOperator::new(h, w, vec![1.0; h * w], d, b).unwrap();
    for k in 0..b {
        let mut x = HsiCube::zeros(h, w, b);
        x.set(0, 0, k, 0.75);
        let y = forward_project(&x, &op).unwrap();
        assert_eq!((y.height(), y.width()), (2, 7));
        for (i, &v) in y.data().iter().enumerate() {
            assert_eq!(v, if i == d * k { 0.75 } else { 0.0 });
        }
        let back = shift_back(&y, &op).unwrap();
        assert_eq!(back.get(0, 0, k), 0.75);
    }
}

#[test]
fn dense_identity_and_row_sums() {
    let op = SensingOperator::new(3, 3, vec![1.0; 9], 0, 1).unwrap();
    let phi = build_dense_phi(&op).unwrap();
    assert_eq!(phi, nalgebra::DMatrix::identity(9, 9));

    let mut g = rng(4);
    let mask: Vec<f64> = (0..12).map(|_| if g.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let op = SensingOperator::new(3, 4, mask.clone(), 1, 3).unwrap();
    let phi = build_dense_phi(&op).unwrap();
    let wp = op.detector_width();
    for r in 0..3 {
        for x in 0..wp {
            let expect = (0..3)
                .filter(|&b| x >= b && x - b < 4 && mask[r * 4 + x - b] == 1.0)
                .count() as f64;
            assert_eq!(phi.row(r * wp + x).sum(), expect);
        }
    }
}

#[test]
fn dense_oracle_scale_guard() {
    let op = SensingOperator::new(32, 32, vec![1.0; 1024], 1, 5).unwrap();
    assert!(op.cube_len() > DENSE_LIMIT);
    assert!(matches!(build_dense_phi(&op), Err(Error::ScaleGuard { .. })));
}

#[test]
fn phi_diag_closed_forms() {
    let op = SensingOperator::new(1, 2, vec![1.0, 1.0], 1, 2).unwrap();
    assert_eq!(phi_diag(&op), vec![1.0, 2.0, 1.0]);
    let op = SensingOperator::new(1, 3, vec![0.5, 0.0, 0.9], 0, 1).unwrap();
    assert_eq!(phi_diag(&op), vec![0.25, 0.0, 0.81]);
    let op = SensingOperator::new(2, 2, vec![0.0; 4], 2, 3).unwrap();
    assert!(phi_diag(&op).iter().all(|&v| v == 0.0));
}

#[test]
fn shot_noise_variance_at_eleven_bits() {
    let n = 100;
    let y = Measurement::new(n, n, vec![1.0; n * n]).unwrap();
    let noisy = add_shot_noise(&y, 11, 7).unwrap();
    let mean = noisy.data().iter().sum::<f64>() / (n * n) as f64;
    let var = noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n * n - 1) as f64;
    let expect = 1.0 / 2047.0;
    assert!((var - expect).abs() / expect < 0.2, "variance {var} vs {expect}");
    assert!((mean - 1.0).abs() < 0.01);
    assert_eq!(add_shot_noise(&y, 11, 7).unwrap(), noisy);
    let zero = Measurement::new(3, 3, vec![0.0; 9]).unwrap();
    assert_eq!(add_shot_noise(&zero, 11, 1).unwrap(), zero);
    let neg = Measurement::new(1, 2, vec![0.5, -0.1]).unwrap();
    assert!(add_shot_noise(&neg, 11, 1).is_err());
}

#[test]
fn shot_noise_preserves_pixel_means() {
    let values = vec![0.1, 0.4, 0.7, 1.0, 0.25, 0.9];
    let y = Measurement::new(2, 3, values.clone()).unwrap();
    let draws = 10_000;
    let mut sums = vec![0.0; values.len()];
    for seed in 0..draws {
        let s = add_shot_noise(&y, 11, seed).unwrap();
        for (acc, v) in sums.iter_mut().zip(s.data()) {
            *acc += v;
        }
    }
    // counts are Poisson with mean v * scale; the sample mean has
    // standard deviation sqrt(v / scale / draws)
    let scale = 2047.0 / 1.0;
    for (v, s) in values.iter().zip(&sums) {
        let mean = s / draws as f64;
        let sd = (v / scale / draws as f64).sqrt();
        assert!(
            (mean - v).abs() <= 3.0 * sd,
            "pixel {v}: mean {mean}, 3σ = {}",
            3.0 * sd
        );
    }
}
