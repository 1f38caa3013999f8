//! One-to-many unsupervised image-to-image translation with disentangled
//! domain-invariant and domain-specific codes, trained with an MMD-regularized
//! VAE path and a variational upper bound on the information the re-encoded
//! domain-specific code carries about the input.

pub mod tensor;
pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod nets;
pub mod objective;
pub mod stats;
pub mod trainer;
