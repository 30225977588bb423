#![allow(dead_code)]

use mtnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: std::ops::Range<u64> = 0..10;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn normalish(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}

use mtnet_core::params::{Group, ParamBuilder, ParamStore};

/// Builds a component into a fresh f64 parameter store.
pub fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64, ChaCha8Rng>) -> T) -> (T, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed ^ 0x5eed);
    let out = {
        let mut pb = ParamBuilder::new(&mut store, &mut r, Group::Enhancement);
        f(&mut pb)
    };
    (out, store)
}

/// Sets every parameter whose name contains `pattern` to `value`.
pub fn fill(store: &mut ParamStore<f64>, pattern: &str, value: f64) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.contains(pattern)).map(|(id, _)| id).collect();
    assert!(!ids.is_empty(), "no parameter matches {pattern}");
    for id in ids {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
    }
}

pub fn assert_grad_ok(what: &str, seed: u64, report: &mtnet_core::gradcheck::Report) {
    assert!(report.checked > 0, "{what}: nothing checked");
    assert!(
        report.max_rel_err <= GRAD_TOL,
        "{what} seed {seed}: rel err {:.3e} at {:?} ({} entries)",
        report.max_rel_err,
        report.worst,
        report.checked
    );
}
