mod common;

use common::*;
use mtnet_core::metrics::{compute_eer, cosine_score, eer_curve};
use mtnet_core::optim::{Adam, Sgd};
use mtnet_core::Error;
use rand::Rng;

#[test]
fn zero_gradient_leaves_parameters() {
    let mut p = [0.3f64, -1.2];
    Sgd::new(0.005, 0.9).step(0, &mut p, &[0.0, 0.0]).unwrap();
    assert_eq!(p, [0.3, -1.2]);
    Adam::new(0.0005).step(0, &mut p, &[0.0, 0.0]).unwrap();
    assert_eq!(p, [0.3, -1.2]);
}

#[test]
fn first_sgd_step_is_plain_gradient_descent() {
    let mut p = [2.0f64];
    Sgd::new(0.005, 0.9).step(0, &mut p, &[4.0]).unwrap();
    assert!((p[0] - (2.0 - 0.005 * 4.0)).abs() < 1e-15);
}

#[test]
fn optimizers_reject_mismatched_shapes() {
    assert!(matches!(Sgd::new(0.1f64, 0.9).step(0, &mut [0.0; 3], &[1.0; 2]), Err(Error::Shape { .. })));
    assert!(matches!(Adam::new(0.1f64).step(0, &mut [0.0; 3], &[1.0; 4]), Err(Error::Shape { .. })));
}

/// Minimizes `f(p) = |p|^2` (gradient `2p`).
fn bowl(mut step: impl FnMut(&mut [f64], &[f64]), start: &[f64], iters: usize) -> f64 {
    let mut p = start.to_vec();
    for _ in 0..iters {
        let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        step(&mut p, &g);
    }
    p.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn quadratic_bowl_converges() {
    for seed in SEEDS {
        let start = uniform(&mut rng(seed), &[5], -1.0, 1.0).into_data();
        let mut sgd = Sgd::new(0.005, 0.9);
        assert!(bowl(|p, g| sgd.step(0, p, g).unwrap(), &start, 500) < 1e-3);
        // The paper's Adam rate moves at most ~5e-4 per step, too slow to
        // cross a unit bowl in 500 steps; a larger rate exercises the update.
        let mut adam = Adam::new(0.01);
        assert!(bowl(|p, g| adam.step(0, p, g).unwrap(), &start, 500) < 1e-3);
    }
}

#[test]
fn optimizer_slots_are_independent() {
    let mut sgd = Sgd::new(0.1f64, 0.9);
    let (mut a, mut b) = ([1.0], [1.0]);
    sgd.step(0, &mut a, &[1.0]).unwrap();
    sgd.step(0, &mut a, &[1.0]).unwrap();
    sgd.step(7, &mut b, &[1.0]).unwrap();
    assert!((b[0] - 0.9).abs() < 1e-15);
    assert!((a[0] - (0.9 - 0.19)).abs() < 1e-15);
}

#[test]
fn cosine_examples_and_scaling() {
    let a = [0.3f32, -0.2, 0.9];
    assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-7);
    assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
    assert!(matches!(cosine_score(&[0.0, 0.0], &a[..2]), Err(Error::ZeroVector)));
    let mut r = rng(1);
    for _ in 0..100 {
        let x: Vec<f32> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let c: f32 = r.random_range(0.1..10.0);
        let xs: Vec<f32> = x.iter().map(|v| v * c).collect();
        let s = cosine_score(&x, &y).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!((cosine_score(&xs, &y).unwrap() - s).abs() < 1e-6);
    }
}

/// Exhaustive sweep: FRR/FAR by direct counting at every candidate
/// threshold, then linear interpolation of FRR - FAR's sign change.
fn sweep_oracle(same: &[f64], diff: &[f64]) -> (Vec<(f64, f64, f64)>, f64) {
    let mut ts: Vec<f64> = same.iter().chain(diff).copied().collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    ts.push(f64::INFINITY);
    let pts: Vec<(f64, f64, f64)> = ts
        .iter()
        .map(|&t| {
            let frr = same.iter().filter(|&&s| s < t).count() as f64 / same.len() as f64;
            let far = diff.iter().filter(|&&s| s >= t).count() as f64 / diff.len() as f64;
            (t, frr, far)
        })
        .collect();
    for i in 0..pts.len() {
        let d = pts[i].1 - pts[i].2;
        if d == 0.0 {
            return (pts.clone(), pts[i].1);
        }
        if d > 0.0 {
            let (f0, a0) = (pts[i - 1].1, pts[i - 1].2);
            let d0 = f0 - a0;
            let w = d0 / (d0 - d);
            let frr = f0 + w * (pts[i].1 - f0);
            return (pts.clone(), frr);
        }
    }
    unreachable!("FRR - FAR ends at +1")
}

#[test]
fn eer_matches_exhaustive_sweep() {
    let mut r = rng(77);
    for _ in 0..100 {
        let (ns, nd) = (r.random_range(1..40), r.random_range(1..80));
        let shift = r.random_range(-1.0..2.0);
        // Coarse rounding creates ties within and across the two sets.
        let draw = |r: &mut rand_chacha::ChaCha8Rng, mu: f64| ((r.random::<f64>() + mu) * 20.0).round() / 20.0;
        let same: Vec<f64> = (0..ns).map(|_| draw(&mut r, shift)).collect();
        let diff: Vec<f64> = (0..nd).map(|_| draw(&mut r, 0.0)).collect();
        let (pts, want) = sweep_oracle(&same, &diff);
        let curve = eer_curve(&same, &diff).unwrap();
        assert_eq!(curve.len(), pts.len());
        for (c, p) in curve.iter().zip(&pts) {
            assert_eq!(c.threshold, p.0);
            assert!((c.frr - p.1).abs() <= 1e-9 && (c.far - p.2).abs() <= 1e-9);
        }
        assert!((compute_eer(&same, &diff).unwrap() - want).abs() <= 1e-9);
    }
}

#[test]
fn eer_reference_cases() {
    assert_eq!(compute_eer(&[0.9, 0.95, 0.7], &[0.1, 0.3, 0.69]).unwrap(), 0.0);
    let mut r = rng(8);
    let scores: Vec<f64> = (0..500).map(|_| r.random()).collect();
    assert!((compute_eer(&scores, &scores).unwrap() - 0.5).abs() <= 0.02);
    let other: Vec<f64> = (0..500).map(|_| r.random()).collect();
    assert!((compute_eer(&scores, &other).unwrap() - 0.5).abs() <= 0.06);
    assert!(matches!(compute_eer(&[], &[1.0]), Err(Error::EmptyScores)));
    assert!(matches!(compute_eer(&[1.0], &[]), Err(Error::EmptyScores)));
}

#[test]
fn eer_is_invariant_under_monotone_transforms() {
    let mut r = rng(12);
    for _ in 0..50 {
        let same: Vec<f64> = (0..30).map(|_| r.random_range(-0.5..1.0)).collect();
        let diff: Vec<f64> = (0..40).map(|_| r.random_range(-1.0..0.5)).collect();
        let f = |v: &[f64]| v.iter().map(|x| (3.0 * x).exp() + 2.0).collect::<Vec<_>>();
        let (a, b) = (compute_eer(&same, &diff).unwrap(), compute_eer(&f(&same), &f(&diff)).unwrap());
        assert!((a - b).abs() < 1e-12);
    }
}
