mod common;

use common::*;
use mtnet_core::enhance::Enhancer;
use mtnet_core::gradcheck::{check_network, probe};
use mtnet_core::{Mode, Session, Tensor};

fn enhance(store: &mtnet_core::ParamStore<f64>, e: &Enhancer, x: &Tensor<f64>, lengths: &[usize]) -> Tensor<f64> {
    let mut s = Session::new(store, Mode::Train);
    let v = s.g.constant(x.clone());
    let out = e.forward(&mut s, v, lengths).unwrap();
    s.g.value(out.enhanced).clone()
}

#[test]
fn zero_kernels_pass_input_through() {
    let (e, mut store) = build(1, |pb| Enhancer::new(pb, 8, 3));
    fill(&mut store, "kernel", 0.0);
    let x = normalish(&mut rng(1), &[2, 1, 6, 8]);
    assert_eq!(enhance(&store, &e, &x, &[6, 6]), x);
}

#[test]
fn second_stage_zeroed_reduces_to_one_subtraction() {
    let (e, mut store) = build(2, |pb| Enhancer::new(pb, 8, 3));
    fill(&mut store, "dcnn2", 0.0);
    let x = normalish(&mut rng(2), &[2, 1, 7, 8]);
    let mut s = Session::new(&store, Mode::Train);
    let v = s.g.constant(x.clone());
    let d1 = e.stages[0].forward(&mut s, v, &[7, 7]).unwrap();
    let want: Vec<f64> = x.data().iter().zip(s.g.value(d1).data()).map(|(a, b)| a - b).collect();
    assert_eq!(enhance(&store, &e, &x, &[7, 7]).data(), &want[..]);
}

#[test]
fn shape_is_preserved() {
    let (e, store) = build(3, |pb| Enhancer::new(pb, 256, 16));
    let x = normalish(&mut rng(3), &[1, 1, 98, 256]);
    assert_eq!(enhance(&store, &e, &x, &[98]).shape(), &[1, 1, 98, 256]);
    let (e, store) = build(4, |pb| Enhancer::new(pb, 16, 4));
    for t in [1, 2, 5, 13] {
        let x = normalish(&mut rng(t as u64), &[2, 1, t, 16]);
        assert_eq!(enhance(&store, &e, &x, &[t, t]).shape(), &[2, 1, t, 16]);
    }
}

#[test]
fn wrong_frequency_size_is_rejected() {
    let (e, store) = build(5, |pb| Enhancer::new(pb, 16, 4));
    let mut s = Session::new(&store, Mode::Train);
    let v = s.g.constant(Tensor::zeros(&[1, 1, 4, 15]));
    assert!(e.forward(&mut s, v, &[4]).is_err());
}

#[test]
fn padded_frames_stay_zero_and_do_not_leak() {
    let (e, store) = build(6, |pb| Enhancer::new(pb, 8, 3));
    let mut x = normalish(&mut rng(6), &[2, 1, 9, 8]);
    for h in 5..9 {
        for w in 0..8 {
            x.data_mut()[((9) + h) * 8 + w] = 0.0;
        }
    }
    let out = enhance(&store, &e, &x, &[9, 5]);
    for h in 5..9 {
        for w in 0..8 {
            assert_eq!(out.at(&[1, 0, h, w]), 0.0);
        }
    }
    // Changing padding content must not change the valid output.
    let mut x2 = x.clone();
    x2.data_mut()[(9 + 7) * 8 + 3] = 5.0;
    let out2 = enhance(&store, &e, &x2, &[9, 5]);
    for h in 0..5 {
        for w in 0..8 {
            assert_eq!(out.at(&[1, 0, h, w]), out2.at(&[1, 0, h, w]));
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in SEEDS {
        let (e, store) = build(seed, |pb| Enhancer::new(pb, 5, 2));
        let mut r = rng(seed);
        let x = normalish(&mut r, &[2, 1, 4, 5]);
        let w = normalish(&mut r, &[2, 1, 4, 5]);
        let report = check_network(&store, Mode::Train, &[x], 4, |s, v| {
            let out = e.forward(s, v[0], &[4, 3])?;
            probe(&mut s.g, out.enhanced, &w)
        })
        .unwrap();
        assert_grad_ok("enhancer", seed, &report);
    }
}

#[test]
fn eval_mode_uses_running_statistics() {
    let (e, mut store) = build(7, |pb| Enhancer::new(pb, 6, 2));
    let x = normalish(&mut rng(7), &[3, 1, 5, 6]);
    let updates = {
        let mut s = Session::new(&store, Mode::Train);
        let v = s.g.constant(x.clone());
        e.forward(&mut s, v, &[5, 5, 5]).unwrap();
        s.bn_updates().to_vec()
    };
    assert_eq!(updates.len(), 10);
    store.apply_bn_updates(&updates, 0.1);
    let eval = |x: &Tensor<f64>, lengths: &[usize]| {
        let mut s = Session::new(&store, Mode::Eval);
        let v = s.g.constant(x.clone());
        let out = e.forward(&mut s, v, lengths).unwrap();
        s.g.value(out.enhanced).clone()
    };
    // With running statistics each item is processed independently of the batch.
    let single = Tensor::new(vec![1, 1, 5, 6], x.data()[..30].to_vec()).unwrap();
    let alone = eval(&single, &[5]);
    let batched = eval(&x, &[5, 5, 5]);
    assert_close(&batched.data()[..30], alone.data(), 1e-12);
}
