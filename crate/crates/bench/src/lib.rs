//! Inputs shared by the kernel benches.

use cloudmask_core::Tensor;

/// Deterministic values in `[-1, 1)` from a 64-bit LCG.
pub fn filled(shape: &[usize], seed: u64) -> Vec<f32> {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
            (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::from_vec(shape, filled(shape, seed)).expect("shape matches length")
}

/// Binary target map, roughly half set.
pub fn target(shape: &[usize], seed: u64) -> Tensor<f32> {
    let data = filled(shape, seed).into_iter().map(|v| (v > 0.0) as u8 as f32).collect();
    Tensor::from_vec(shape, data).expect("shape matches length")
}
