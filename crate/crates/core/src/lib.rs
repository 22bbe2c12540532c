//! Matrix-based Rényi α-entropy, mutual information and relation
//! distillation losses over kernel Gram matrices.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`tensor`] | dense `f64` tensors, NPY I/O, row normalisation |
//! | [`autodiff`] | eager reverse-mode tape and finite-difference checks |
//! | [`gram`] | linear-kernel Gram matrices and their normalisations |
//! | [`entropy`] | Rényi entropy, joint entropy, mutual information |
//! | [`relation`] | attention relation module shared by teacher and student |
//! | [`losses`] | compression, distillation and toy task losses |
//! | [`train`] | synthetic teacher/student harness with Adam |
//! | [`bench`] | timing of the Frobenius and eigenvalue entropy paths |
//!
//! Everything runs in `f64`. The `parallel` feature (default) spreads batch
//! kernels over rayon; results are identical with the feature disabled.

pub mod autodiff;
pub mod bench;
pub mod entropy;
mod error;
pub mod gram;
pub mod linalg;
pub mod losses;
pub mod par;
pub mod relation;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
