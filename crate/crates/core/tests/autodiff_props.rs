mod common;

use cassi_core::autodiff::{ElementwiseKind, Padding};
use cassi_core::{Error, Tape, Tensor};
use common::rng;
use proptest::prelude::*;

// Direct cross-correlation with zero padding.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for r in 0..oh {
            for c in 0..ow {
                let mut s = 0.0;
                for i in 0..ci {
                    for u in 0..ks {
                        for v in 0..ks {
                            let rr = (r * stride + u) as isize - pad as isize;
                            let cc = (c * stride + v) as isize - pad as isize;
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                                s += k.data()[((o * ci + i) * ks + u) * ks + v]
                                    * x.data()[(i * h + rr as usize) * w + cc as usize];
                            }
                        }
                    }
                }
                out[(o * oh + r) * ow + c] = s;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

fn conv(x: &Tensor, k: &Tensor, stride: usize, pad: Padding) -> Tensor {
    let mut t = Tape::new();
    let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
    let y = t.conv2d(xv, kv, stride, pad).unwrap();
    t.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_nested_loops(seed: u64, ks in prop::sample::select(vec![1usize, 3]), stride in 1usize..=2, same: bool, h in 3usize..9, w in 3usize..9) {
        let mut g = rng(seed);
        let x = Tensor::randn(&[2, h, w], 1.0, &mut g);
        let k = Tensor::randn(&[3, 2, ks, ks], 1.0, &mut g);
        let (pad, mode) = if same { ((ks - 1) / 2, Padding::Same) } else { (0, Padding::Valid) };
        let got = conv(&x, &k, stride, mode);
        let want = conv_oracle(&x, &k, stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_is_linear(seed: u64, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut g = rng(seed);
        let x = Tensor::randn(&[2, 5, 6], 1.0, &mut g);
        let y = Tensor::randn(&[2, 5, 6], 1.0, &mut g);
        let k = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut g);
        let mix = x.zip_map(&y, |a, b| alpha * a + beta * b).unwrap();
        let lhs = conv(&mix, &k, 1, Padding::Same);
        let rhs = conv(&x, &k, 1, Padding::Same).zip_map(&conv(&y, &k, 1, Padding::Same), |a, b| alpha * a + beta * b).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn same_padding_keeps_spatial_dims(h in 1usize..10, w in 1usize..10, ks in prop::sample::select(vec![1usize, 3])) {
        let x = Tensor::ones(&[1, h, w]);
        let k = Tensor::ones(&[2, 1, ks, ks]);
        let y = conv(&x, &k, 1, Padding::Same);
        prop_assert_eq!(y.shape(), &[2, h, w]);
    }
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let s = t.elementwise(ElementwiseKind::Add, a, Some(b)).unwrap();
    assert_eq!(t.value(s).data(), &[4.0, 6.0]);
    let z = t.constant(Tensor::zeros(&[2]));
    let m = t.elementwise(ElementwiseKind::Mul, a, Some(z)).unwrap();
    assert_eq!(t.value(m).data(), &[0.0, 0.0]);
    let zero = t.constant(Tensor::scalar(0.0));
    let sg = t.elementwise(ElementwiseKind::Sigmoid, zero, None).unwrap();
    assert_eq!(t.value(sg).item(), 0.5);
    let two = t.constant(Tensor::scalar(2.0));
    let sc = t.elementwise(ElementwiseKind::Mul, a, Some(two)).unwrap();
    assert_eq!(t.value(sc).data(), &[2.0, 4.0]);
    let c = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let err = t.elementwise(ElementwiseKind::Sub, a, Some(c)).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
    assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    assert!(t.elementwise(ElementwiseKind::Add, a, None).is_err());
}

#[test]
fn backward_examples() {
    let mut g = rng(1);
    let x = Tensor::randn(&[3, 2], 1.0, &mut g);
    let w0 = Tensor::randn(&[3, 2], 1.0, &mut g);
    let mut t = Tape::new();
    let w = t.param(w0.clone());
    let xv = t.constant(x.clone());
    let p = t.mul(w, xv).unwrap();
    let loss = t.sum(p);
    let grads = t.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &x);
    assert!(grads.get(xv).is_none());

    let mut t = Tape::new();
    let w = t.param(w0.clone());
    let sq = t.mul(w, w).unwrap();
    let s = t.sum(sq);
    let loss = t.scale(s, 0.5);
    let grads = t.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &w0);
}

#[test]
fn conv_channel_mismatch_is_reported() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(&[2, 4, 4]));
    let k = t.constant(Tensor::ones(&[1, 3, 3, 3]));
    let err = t.conv2d(x, k, 1, Padding::Same).unwrap_err().to_string();
    assert!(err.contains("input channels"), "{err}");
    let k5 = t.constant(Tensor::ones(&[1, 2, 5, 5]));
    assert!(t.conv2d(x, k5, 1, Padding::Same).is_err());
    let k3 = t.constant(Tensor::ones(&[1, 2, 3, 3]));
    assert!(t.conv2d(x, k3, 3, Padding::Same).is_err());
}

#[test]
fn deterministic_graphs() {
    let run = || {
        let mut g = rng(9);
        let mut t = Tape::new();
        let x = t.param(Tensor::randn(&[2, 6, 6], 1.0, &mut g));
        let k = t.param(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut g));
        let y = t.conv2d(x, k, 2, Padding::Same).unwrap();
        let y = t.gelu(y);
        let l = t.sum(y);
        let gr = t.backward(l).unwrap();
        (
            t.value(y).clone(),
            gr.get(x).unwrap().clone(),
            gr.get(k).unwrap().clone(),
        )
    };
    let (a, b) = (run(), run());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}
