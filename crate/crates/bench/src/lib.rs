//! Shared inputs for the benchmarks.

use qflow_core::Tensor;

/// Deterministic pseudo-random tensor in `[-1, 1)` without pulling an RNG
/// into the benchmark crate.
pub fn tensor(shape: &[usize], salt: u64) -> Tensor<f32> {
    let mut state = salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    Tensor::from_fn(shape.to_vec(), |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 40) as f32 / (1u64 << 23) as f32 - 1.0
    })
}
