//! Zero-chain hard instances for nonconvex optimization: the chain kernel, its
//! rotated and soft-projected embeddings, deterministic and stochastic oracles,
//! numerical certification, query-complexity benchmarks and a Grover simulator.

pub mod bench;
pub mod error;
pub mod grover;
pub mod haar;
pub mod instance;
pub mod jet;
pub mod kernel;
pub mod oracles;
pub mod params;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Kernel64 = kernel::Kernel<f64>;
pub type Kernel32 = kernel::Kernel<f32>;
pub type Instance64 = instance::Instance<f64>;
pub type Instance32 = instance::Instance<f32>;
pub type Embedding64 = haar::RotationEmbedding<f64>;
