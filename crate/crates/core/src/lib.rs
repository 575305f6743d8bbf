//! Multi-loss snapshot ensemble pipeline for offline signature verification.
//!
//! A small deterministic CNN is trained on a signature identification task
//! under a three-part loss (cross-entropy, squared hinge, Cauchy-Schwarz
//! divergence) whose dominant term rotates across sequential trials. The
//! network is snapshotted after every trial; penultimate-layer features from
//! each snapshot feed per-user linear SVM ensembles, and verification picks
//! the most generalizable SVM per user. Evaluation reports FRR/FAR/EER under
//! writer-dependent and writer-independent protocols.

pub mod error;
pub mod tensor;
pub mod layers;
pub mod net;
pub mod optim;
pub mod gradcheck;
pub mod loss;
pub mod container;
pub mod train;
pub mod preprocess;
pub mod corpus;
pub mod verification;
pub mod eval;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
