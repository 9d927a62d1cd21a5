//! Build, range-train and polynomialize small transformers for inference
//! under homomorphic encryption, then audit the result.
//!
//! The crate follows a three-stage recipe:
//!
//! 1. **HE-friendly architecture** ([`transformer`]): softmax is replaced by a
//!    pointwise σ-attention with length scaling and a multiplicative mask;
//!    normalization is either BatchNorm (vision) or LayerNorm (language).
//! 2. **HE-friendly weights** ([`training`]): fine-tuning with auxiliary losses
//!    that shrink the input range of every activation and the variance seen
//!    by every LayerNorm.
//! 3. **Polynomial model** ([`polyconvert`]): each non-polynomial site is
//!    replaced by a fitted polynomial ([`polyfit`]); the resulting graph is
//!    checked to contain only additions and multiplications and its
//!    multiplicative depth is accounted against a bootstrapping budget.
//!
//! [`harness`] wires the stages into reproducible desk-scale experiments.

pub mod error;
pub mod harness;
pub mod polyconvert;
pub mod polyfit;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
