//! Structured-gradient optimization toolkit.
//!
//! * [`linalg`]: dense matrices, Jacobi eigensolver, SVD, norms.
//! * [`matfun`]: Newton-Schulz / PolarExpress / Denman-Beavers inverse square roots.
//! * [`optim`]: ASGO (theoretical and practical), DASGO, Muon, Shampoo,
//!   full-matrix AdaGrad, AdamW and SGD behind one stepping interface.
//! * [`problems`]: desk-scale objectives with exact gradients and known constants.
//! * [`theory`]: computable convergence bounds and inequality suites.

pub mod error;
pub mod linalg;
pub mod matfun;
pub mod optim;
pub mod par;
pub mod problems;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::Matrix;
