//! Deterministic numeric foundation shared by every other module: dense
//! tensors, 2-D convolution with hand-written gradients, a symmetric
//! eigensolver, seeded random streams and the `TNS1` binary tensor format.
//!
//! Training and inference run in `f32`. Everything generic over [`Real`]
//! also runs in `f64`, which the gradient checks and eigensolver tests use
//! as a high-precision verification mode.

mod conv;
mod eig;
mod real;
mod rng;
mod tensor;
pub mod tns;

pub(crate) use conv::conv2d_backward_parts;
pub use conv::{conv2d_backward, conv2d_forward, conv_output_len, ConvGrads};
pub use eig::{sym_eig, SymEig};
pub use real::Real;
pub use rng::{rng_derive, stream_key, SeededRng};
pub use tensor::{DenseMatrix, KernelBank, Tensor3};
