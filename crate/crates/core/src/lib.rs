//! Tool-augmented low-resource translation: a bilingual dictionary tool, a
//! tag-based generation protocol, supervised fine-tuning with synthetic tool
//! calls, group-relative policy optimization with masked tool output, and the
//! evaluation harness.
//!
//! The numeric core ([`policy`]) is generic over [`Scalar`]; the aliases
//! below fix the precision used for training and for gradient checks.

pub mod config;
pub mod data;
pub mod dictionary;
pub mod error;
pub mod eval;
pub mod exec;
pub mod grpo;
pub mod metrics;
pub mod policy;
pub mod protocol;
pub mod scalar;
pub mod sft;
pub mod stats;
pub mod testing;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// The policy used for training and inference: 32-bit parameters.
pub type Policy32 = policy::TransformerPolicy<f32>;
/// The same model in 64-bit arithmetic, used by finite-difference checks.
pub type Policy64 = policy::TransformerPolicy<f64>;
/// Gradient buffer matching [`Policy32`].
pub type Gradients32 = policy::Gradients<f32>;
/// Optimizer state matching [`Policy32`].
pub type AdamW32 = policy::AdamW<f32>;
