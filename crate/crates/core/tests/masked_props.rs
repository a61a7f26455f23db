mod common;

use cassi_core::cassi::{forward_project, SensingOperator};
use cassi_core::hqs::{UnfoldConfig, UnfoldingModel};
use cassi_core::io::{random_coded_mask, toy_scene};
use cassi_core::masked::{apply_mask, generate_mask, train, train_step, TrainConfig, TrainSample};
use cassi_core::{ModelWeights, Tensor};
use common::{assert_grad, probe_loss, rng, tiny_net};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn zero_count_is_exact(h in 1usize..20, w in 1usize..20, ratio in prop_oneof![Just(0.3), Just(0.5), Just(0.8), 0.0f64..0.999], seed: u64) {
        let m = generate_mask(h, w, ratio, seed).unwrap();
        prop_assert_eq!(m.zero_count(), (ratio * (h * w) as f64).round() as usize);
        prop_assert!(m.values().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn apply_mask_gradient_passes_at_open_positions() {
    let m = generate_mask(5, 6, 0.5, 1).unwrap();
    let theta = Tensor::randn(&[3, 5, 6], 1.0, &mut rng(2));
    assert_grad(
        "apply_mask",
        |t, x| {
            let y = apply_mask(t, x, &m)?;
            let y = t.gelu(y);
            probe_loss(t, y, 3)
        },
        &theta,
    );
}

fn setup(stages: usize) -> (UnfoldingModel, ModelWeights, Vec<TrainSample>) {
    let m = UnfoldingModel::new(
        UnfoldConfig {
            stages,
            share_weights: true,
            net: tiny_net(),
        },
        4,
    )
    .unwrap();
    let w = m.init_weights(11).unwrap();
    let op = SensingOperator::new(16, 16, random_coded_mask(16, 16, 3), 2, 4).unwrap();
    let samples = vec![TrainSample {
        cube: toy_scene(16, 16, 4, 7),
        op,
    }];
    (m, w, samples)
}

#[test]
fn one_mask_is_used_throughout() {
    let (m, mut w, samples) = setup(2);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        steps: 3,
        masked: true,
        zero_ratio: 0.5,
        mask_seed: 9,
        grad_clip: Some(1.0),
        ..TrainConfig::default()
    };
    let report = train(&m, &mut w, &samples, &cfg).unwrap();
    let mask = report.mask.clone().unwrap();
    let eval_mask = generate_mask(16, 16, 0.5, 9).unwrap();
    assert_eq!(report.mask_digests.len(), 3);
    assert!(report.mask_digests.iter().all(|d| *d == eval_mask.digest()));
    assert_eq!(mask, eval_mask);

    let resampled = train(
        &m,
        &mut w.clone(),
        &samples,
        &TrainConfig {
            resample_mask: true,
            ..cfg
        },
    )
    .unwrap();
    assert_ne!(resampled.mask_digests[0], resampled.mask_digests[1]);
}

#[test]
fn unmasked_path_is_untouched() {
    let (m, w, samples) = setup(2);
    let s = &samples[0];
    let y = forward_project(&s.cube, &s.op).unwrap();
    let plain = m.reconstruct(&y, &s.op, &w, None).unwrap();
    let open = generate_mask(16, 16, 0.0, 0).unwrap();
    let with_open = m.reconstruct(&y, &s.op, &w, Some(&open)).unwrap();
    assert_eq!(plain, with_open);
    let half = generate_mask(16, 16, 0.5, 0).unwrap();
    assert_ne!(plain, m.reconstruct(&y, &s.op, &w, Some(&half)).unwrap());

    let cfg = TrainConfig {
        steps: 2,
        ..TrainConfig::default()
    };
    let report = train(&m, &mut w.clone(), &samples, &cfg).unwrap();
    assert!(report.mask.is_none() && report.mask_digests.is_empty());
}

#[test]
fn zero_rate_leaves_weights_unchanged() {
    let (m, mut w, samples) = setup(1);
    let before = w.clone();
    let r = train_step(&m, &mut w, &samples, &TrainConfig::default(), 0.0, None).unwrap();
    assert!(r.loss.is_finite() && r.loss > 0.0);
    assert_eq!(w, before);
}

#[test]
fn losses_repeat_bit_for_bit() {
    let (m, w, samples) = setup(1);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        steps: 3,
        masked: true,
        noise_bits: Some(10),
        noise_seed: 4,
        grad_clip: Some(1.0),
        ..TrainConfig::default()
    };
    let run = || {
        let mut w = w.clone();
        let r = train(&m, &mut w, &samples, &cfg).unwrap();
        (r.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(), w)
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
}

#[test]
fn invalid_configs_are_rejected() {
    let (m, mut w, samples) = setup(1);
    for cfg in [
        TrainConfig {
            zero_ratio: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            grad_clip: Some(0.0),
            ..TrainConfig::default()
        },
    ] {
        assert!(train(&m, &mut w, &samples, &cfg).is_err());
    }
    assert!(train(&m, &mut w, &[], &TrainConfig::default()).is_err());
    assert!(train_step(&m, &mut w, &[], &TrainConfig::default(), 0.1, None).is_err());
}

#[test]
fn toy_overfit_reduces_loss() {
    let (m, mut w, samples) = setup(2);
    let cfg = TrainConfig {
        learning_rate: 0.1,
        steps: 200,
        grad_clip: Some(1.0),
        ..TrainConfig::default()
    };
    let report = train(&m, &mut w, &samples, &cfg).unwrap();
    let after = train_step(&m, &mut w.clone(), &samples, &cfg, 0.0, None).unwrap().loss;
    let initial = report.losses[0];
    assert!(after < 0.5 * initial, "loss {initial} -> {after}");
}
