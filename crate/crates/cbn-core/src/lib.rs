//! Numerical core for cross-iteration batch normalization.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors, deterministic RNG, convolution
//! * [`compensation`]: statistic gradients, Taylor compensation of past
//!   mini-batch statistics, validity-clamped aggregation, window sizing
//! * [`normalizers`]: batch normalization and its cross-iteration variants
//!   (train forward, backward, and shared eval path)
//! * [`network`]: small layer zoo, forward/backward, SGD with momentum
//! * [`oracles`]: independent brute-force reference implementations used to
//!   verify the optimized paths (replay of exact statistics, naive statistic
//!   Jacobians, finite differences, gradient-ratio diagnostics)

pub mod compensation;
pub mod error;
pub mod network;
pub mod normalizers;
pub mod oracles;
pub mod tensor;

pub use error::{CoreError, CoreResult};
pub use tensor::Tensor;
