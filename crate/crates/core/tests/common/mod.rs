#![allow(dead_code)]

use cloudmask_core::{ParamId, ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

pub fn uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn binary_mask(seed: u64, n: usize, p: f64) -> Vec<f64> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()
}

pub fn zero<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId]) {
    for &id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    let worst = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= tol, "max abs diff {worst:e} > {tol:e}");
}
