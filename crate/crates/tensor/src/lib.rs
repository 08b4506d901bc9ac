//! Minimal dense `f64` tensors with tape-based reverse-mode autodiff.
//!
//! Everything runs on the CPU in double precision, which keeps finite
//! difference gradient checks meaningful.

pub mod container;
mod error;
mod gemm;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gemm::gemm;
pub use params::{Gradients, Param, ParamId, ParamKind, ParamStore};
pub use tape::{concat_cols, concat_rows, Mask, Tape, Var};
pub use tensor::Tensor;

/// Seeded generator used for every parameter init and noise draw.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal tensor.
pub fn randn(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}
