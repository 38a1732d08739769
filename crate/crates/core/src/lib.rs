//! Morphing attack detection with orthogonal identity disentanglement.
//!
//! A two-headed convolutional classifier scores images as bona fide (1) or
//! morphing attack (0). Alongside the binary cross-entropy, training
//! penalizes the squared inner product of the two identity embeddings,
//! pushing them toward orthogonality. The crate also ships a deterministic
//! synthetic morph dataset generator and the standard biometric error
//! metrics (APCER, BPCER, EER, DET curves).

pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pgm;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
