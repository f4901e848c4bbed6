mod common;

use common::{compensated_sum, random_vec, reference_log_softmax, reference_softmax, rng};
use ppc_core::tape::kl_from_logits;
use ppc_core::{Tape, Tensor};
use proptest::prelude::*;

#[test]
fn softmax_matches_compensated_reference() {
    let mut r = rng(11);
    for _ in 0..50 {
        let row = random_vec(&mut r, 17, 8.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 17], row.clone()).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        for (a, b) in tape.value(s).data().iter().zip(reference_softmax(&row)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn kl_matches_compensated_reference() {
    let mut r = rng(12);
    for _ in 0..50 {
        let p = random_vec(&mut r, 23, 5.0);
        let q = random_vec(&mut r, 23, 5.0);
        let (lp, lq) = (reference_log_softmax(&p), reference_log_softmax(&q));
        let expected = compensated_sum(lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)));
        let got = kl_from_logits(&p, &q).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");

        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::new(&[1, 23], p).unwrap());
        let qv = tape.constant(Tensor::new(&[1, 23], q).unwrap());
        let k = tape.kl_divergence(pv, qv).unwrap();
        assert_eq!(tape.item(k), got);
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut r = rng(13);
    for target in 0..9 {
        let row = random_vec(&mut r, 9, 4.0);
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[1, 9], row.clone()).unwrap());
        let l = tape.cross_entropy(x, target).unwrap();
        tape.backward(l).unwrap();
        let soft = reference_softmax(&row);
        for (j, (g, p)) in tape.grad(x).unwrap().iter().zip(soft).enumerate() {
            let expected = p - f64::from(u8::from(j == target));
            assert!((g - expected).abs() < 1e-8);
        }
        let lse = reference_log_softmax(&row);
        assert!((tape.item(l) + lse[target]).abs() < 1e-12);
    }
}

fn composite_grads(seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut tape = Tape::new();
    let a = tape.param(Tensor::new(&[3, 4], random_vec(&mut r, 12, 1.0)).unwrap());
    let w = tape.param(Tensor::new(&[4, 5], random_vec(&mut r, 20, 1.0)).unwrap());
    let g = tape.param(Tensor::new(&[5], random_vec(&mut r, 5, 1.0)).unwrap());
    let b = tape.param(Tensor::new(&[5], random_vec(&mut r, 5, 1.0)).unwrap());
    let z = tape.matmul(a, w).unwrap();
    let z = tape.layer_norm(z, g, b, 1e-5).unwrap();
    let z = tape.gelu(z);
    let l = tape.cross_entropy_rows(z, &[0, 3, 4]).unwrap();
    tape.backward(l).unwrap();
    [a, w, g, b].iter().map(|v| tape.grad(*v).unwrap().to_vec()).collect()
}

#[test]
fn backward_is_deterministic() {
    let first = composite_grads(14);
    let second = composite_grads(14);
    let bits = |g: &Vec<Vec<f64>>| g.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&first), bits(&second));
}

#[test]
fn single_precision_tracks_double() {
    let mut r = rng(15);
    let row = random_vec(&mut r, 12, 3.0);
    let mut t64 = Tape::<f64>::new();
    let x = t64.constant(Tensor::new(&[1, 12], row.clone()).unwrap());
    let s64 = t64.softmax_rows(x).unwrap();
    let mut t32 = Tape::<f32>::new();
    let row32: Vec<f32> = row.iter().map(|&v| v as f32).collect();
    let x = t32.constant(Tensor::new(&[1, 12], row32).unwrap());
    let s32 = t32.softmax_rows(x).unwrap();
    for (a, b) in t64.value(s64).data().iter().zip(t32.value(s32).data()) {
        assert!((a - f64::from(*b)).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..4, data in prop::collection::vec(-700.0f64..700.0, 24)) {
        let cols = data.len() / rows;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[rows, cols], data[..rows * cols].to_vec()).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        for i in 0..rows {
            let row = tape.value(s).row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_nonnegative(p in prop::collection::vec(-30.0f64..30.0, 8), q in prop::collection::vec(-30.0f64..30.0, 8)) {
        prop_assert!(kl_from_logits(&p, &q).unwrap() >= -1e-12);
        prop_assert_eq!(kl_from_logits(&p, &p).unwrap(), 0.0);
    }
}
