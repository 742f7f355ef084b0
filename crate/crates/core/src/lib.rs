//! Softmax-free attention.
//!
//! Token similarity is a Gaussian kernel of pairwise distances, so the
//! attention matrix is a Gram matrix and admits a Nyström factorisation
//! `Ŝ = Pᵀ A† P` built from `m` bottleneck tokens. The pseudoinverse `A†`
//! of the small `m × m` landmark block comes from a Newton-Raphson
//! iteration, which keeps the whole pipeline differentiable and linear in
//! the sequence length `n`.
//!
//! Module map:
//!
//! * [`matcore`]: dense matrices, norms, Jacobi eigendecomposition and
//!   allocation accounting.
//! * [`kernel`]: projections, Gaussian and softmax attention matrices.
//! * [`pinv`]: Newton-Raphson and eigendecomposition pseudoinverses.
//! * [`sampling`]: bottleneck token selection.
//! * [`attention`]: the linear attention operator and its exact oracle.
//! * [`autograd`]: a small reverse-mode tape over the operations above.
//! * [`model`]: a stacked classifier, a synthetic task and its trainer.

pub mod attention;
pub mod autograd;
pub mod error;
pub mod kernel;
pub mod matcore;
pub mod model;
pub mod pinv;
pub mod sampling;

pub use error::{Error, Result};
pub use matcore::{Matrix, NormKind, Real};
