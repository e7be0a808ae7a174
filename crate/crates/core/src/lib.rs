//! Centroid-routed, group-gated sparse attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense row-major matrices, stable softmax/logsumexp, the
//!   `FTNS` tensor dump format and seeded random streams.
//! - [`autodiff`]: a small reverse-mode tape over the matrix ops used by the
//!   training paths.
//! - [`grouping`]: centroid banks, routing scores, Sinkhorn / softmax
//!   normalisation and hard top-k memberships.
//! - [`attention`]: full causal attention and the soft group-gated variant
//!   used during training.
//! - [`sparse`]: the hard-mask inference path, the disjoint two-pass
//!   decomposition with its logsumexp merge, and the pair-count cost model.
//! - [`diagnostics`]: dominance, stability, balance and group inspection.
//! - [`lab`]: a toy byte-level language model used for the two-phase
//!   collapse experiments.

pub mod attention;
pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod grouping;
pub mod lab;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Mask, Matrix, Real};
